//! Manifest CSV and binary feature file.
//!
//! Manifest header: `id,gender,split,label_<cat1>,...,label_<catC>`.
//! Feature file: `EMOD`, then little-endian u32 version (1), N, L, D, then
//! N·L·D f32 values, sample-major, layer-major, dim-minor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, EmotionLabel, FeatureBlock, Gender, Sample, Split};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"EMOD";
const FEATURE_VERSION: u32 = 1;

/// Raw contents of a feature file.
pub struct FeatureFile {
    pub layers: usize,
    pub dims: usize,
    pub blocks: Vec<FeatureBlock>,
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes"))
}

pub fn read_features(path: &Path) -> Result<FeatureFile> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Parse {
            location: path.display().to_string(),
            message: "missing EMOD magic".into(),
        });
    }
    let version = read_u32(&bytes, 4);
    if version != FEATURE_VERSION {
        return Err(Error::Parse {
            location: path.display().to_string(),
            message: format!("unsupported feature file version {version}"),
        });
    }
    let n = read_u32(&bytes, 8) as usize;
    let layers = read_u32(&bytes, 12) as usize;
    let dims = read_u32(&bytes, 16) as usize;
    let per = layers * dims;
    let expected = 20 + n * per * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "feature file holds {} bytes, header N={n} L={layers} D={dims} needs {expected}",
            bytes.len()
        )));
    }
    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        let start = 20 + i * per * 4;
        let values = bytes[start..start + per * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blocks.push(FeatureBlock::new(layers, dims, values)?);
    }
    Ok(FeatureFile {
        layers,
        dims,
        blocks,
    })
}

pub fn write_features(path: &Path, ds: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    put(&FEATURE_MAGIC)?;
    put(&FEATURE_VERSION.to_le_bytes())?;
    put(&(ds.len() as u32).to_le_bytes())?;
    put(&(ds.layers() as u32).to_le_bytes())?;
    put(&(ds.dims() as u32).to_le_bytes())?;
    for s in ds.samples() {
        for v in s.features.values() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_manifest(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "gender".into(), "split".into()];
    header.extend(ds.categories().iter().map(|c| format!("label_{c}")));
    w.write_record(&header)?;
    for s in ds.samples() {
        let mut rec = vec![s.id.clone(), s.gender.to_string(), s.split.to_string()];
        rec.extend(s.label.probs().iter().map(|p| format!("{p}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a manifest and its feature file; row `i` of the manifest pairs with
/// block `i` of the features.
pub fn load_manifest(manifest_path: &Path, feature_path: &Path) -> Result<Dataset> {
    let features = read_features(feature_path)?;
    let file = File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let where_ = |line: u64| format!("{}:{line}", manifest_path.display());

    let header = rdr.headers()?.clone();
    let fixed = ["id", "gender", "split"];
    if header.len() < 5 || header.iter().take(3).ne(fixed.iter().copied()) {
        return Err(Error::Parse {
            location: where_(1),
            message: "header must start with id,gender,split followed by label_ columns".into(),
        });
    }
    let mut categories = Vec::new();
    for h in header.iter().skip(3) {
        match h.strip_prefix("label_") {
            Some(name) if !name.is_empty() => categories.push(name.to_string()),
            _ => {
                return Err(Error::Parse {
                    location: where_(1),
                    message: format!("column {h:?} is not a label_<category> column"),
                })
            }
        }
    }

    let mut blocks = features.blocks.into_iter();
    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Parse {
                location: where_(line),
                message: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        let parse_err = |message: String| Error::Parse {
            location: where_(line),
            message,
        };
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(parse_err("empty id".into()));
        }
        let gender: Gender = rec[1]
            .parse()
            .map_err(|e: Error| parse_err(e.to_string()))?;
        let split: Split = rec[2]
            .parse()
            .map_err(|e: Error| parse_err(e.to_string()))?;
        let probs = rec
            .iter()
            .skip(3)
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(format!("label value {v:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        let label = EmotionLabel::new(probs)
            .map_err(|e| Error::Validation(format!("sample {id:?}: {e}")))?;
        let Some(features) = blocks.next() else {
            return Err(Error::Shape(format!(
                "manifest has more rows than the feature file (row for {id:?} has no block)"
            )));
        };
        samples.push(Sample {
            id,
            features,
            label,
            gender,
            split,
        });
    }
    let extra = blocks.count();
    if extra > 0 {
        return Err(Error::Shape(format!(
            "feature file has {extra} more blocks than manifest rows ({})",
            samples.len()
        )));
    }
    Dataset::new(categories, features.layers, features.dims, samples)
}

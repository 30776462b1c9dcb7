//! Binary checkpoint: `EMOC`, u32 version, category list, layout header,
//! tensor shapes, then every parameter as a little-endian f32 in declaration
//! order. All integers are little-endian u32. Class centers are training
//! statistics and are not stored.

use std::path::Path;

use super::{DetectorTarget, ModelBundle, ModelLayout};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EMOC";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Parse {
                location: format!("checkpoint byte {}", self.at),
                message: "truncated".into(),
            });
        }
        self.at += n;
        Ok(&self.bytes[self.at - n..self.at])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl ModelBundle {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put(&mut out, CHECKPOINT_VERSION as usize);
        put(&mut out, self.categories.len());
        for c in &self.categories {
            put(&mut out, c.len());
            out.extend_from_slice(c.as_bytes());
        }
        let l = &self.layout;
        let detector = match l.detector {
            None => 0,
            Some(DetectorTarget::Gender) => 1,
            Some(DetectorTarget::HammingAcc) => 2,
        };
        for v in [
            l.layers,
            l.dims,
            l.classes,
            l.hidden,
            l.adversaries,
            l.adv_hidden,
            l.biased_branch as usize,
            detector,
            l.dual_hidden.unwrap_or(0),
        ] {
            put(&mut out, v);
        }
        let tensors = self.tensors();
        put(&mut out, tensors.len());
        for t in &tensors {
            put(&mut out, t.rows());
            put(&mut out, t.cols());
        }
        for t in &tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                location: "checkpoint byte 0".into(),
                message: "missing EMOC magic".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                location: "checkpoint byte 4".into(),
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let n_cat = r.usize()?;
        let mut categories = Vec::with_capacity(n_cat.min(1024));
        for _ in 0..n_cat {
            let len = r.usize()?;
            let at = r.at;
            let name = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Parse {
                location: format!("checkpoint byte {at}"),
                message: format!("category name is not UTF-8: {e}"),
            })?;
            categories.push(name.to_string());
        }
        let mut h = [0usize; 9];
        for v in h.iter_mut() {
            *v = r.usize()?;
        }
        let detector = match h[7] {
            0 => None,
            1 => Some(DetectorTarget::Gender),
            2 => Some(DetectorTarget::HammingAcc),
            other => {
                return Err(Error::Parse {
                    location: "checkpoint header".into(),
                    message: format!("unknown detector tag {other}"),
                })
            }
        };
        let layout = ModelLayout {
            layers: h[0],
            dims: h[1],
            classes: h[2],
            hidden: h[3],
            adversaries: h[4],
            adv_hidden: h[5],
            biased_branch: h[6] != 0,
            detector,
            dual_hidden: (h[8] > 0).then_some(h[8]),
        };
        let mut bundle = ModelBundle::new(layout, categories, 0)?;
        let count = r.usize()?;
        let expected: Vec<(usize, usize)> = bundle.tensors().iter().map(|t| t.shape()).collect();
        if count != expected.len() {
            return Err(Error::Shape(format!(
                "checkpoint lists {count} tensors, layout implies {}",
                expected.len()
            )));
        }
        for &shape in &expected {
            let got = (r.usize()?, r.usize()?);
            if got != shape {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {got:?}, layout implies {shape:?}"
                )));
            }
        }
        for t in bundle.tensors_mut() {
            for v in t.data_mut() {
                *v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64;
            }
        }
        if r.at != bytes.len() {
            return Err(Error::Parse {
                location: format!("checkpoint byte {}", r.at),
                message: "trailing bytes".into(),
            });
        }
        Ok(bundle)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

//! Ratio × method × seed sweeps and report emission.
//!
//! A sweep loads (or generates) one dataset, applies the dominance filter
//! once, and then for every `(ratio, method, seed)` triple amplifies the
//! gender imbalance of the train/dev splits, trains, and scores the untouched
//! test split. Each finished run is written to `<out>/runs/` immediately, so
//! an interrupted sweep resumes by skipping triples already on disk. Reports
//! are rebuilt from those records and are a pure function of them.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    amplify_bias, dominant_filter, load_manifest, synth_generate, Dataset, RatioSpec, Split,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, PerClass};
use crate::seed::derive_seed;
use crate::trainers::{evaluate_split, train, MethodKind, MethodSpec, TrainConfig};

const TAG_AMPLIFY: u64 = 11;
const TAG_TRAIN: u64 = 12;

/// Synthetic data parameters; see [`SynthConfig`]. `ratio` is the gender
/// ratio the generator imposes on every split before amplification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub n: usize,
    pub classes: usize,
    pub dims: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_base_ratio")]
    pub ratio: u32,
    pub bias_strength: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_skew")]
    pub category_skew: f64,
    #[serde(default)]
    pub gender_amplitude: Option<f64>,
    #[serde(default)]
    pub expression_shift: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_layers() -> usize {
    4
}

fn default_base_ratio() -> u32 {
    1
}

fn default_skew() -> f64 {
    2.0
}

impl SynthSource {
    pub fn config(&self) -> Result<SynthConfig> {
        let mut cfg = SynthConfig::new(
            self.n,
            self.classes,
            self.dims,
            self.ratio,
            self.bias_strength,
            self.seed,
        )?;
        cfg.layers = self.layers;
        cfg.label_noise = self.label_noise;
        cfg.category_skew = self.category_skew;
        if let Some(a) = self.gender_amplitude {
            cfg.gender_amplitude = a;
        }
        if let Some(e) = self.expression_shift {
            cfg.expression_shift = e;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthSource),
    Manifest {
        manifest: PathBuf,
        features: PathBuf,
    },
}

/// A method given either by name or with hyperparameter overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodEntry {
    Name(MethodKind),
    Spec(MethodSpec),
}

impl MethodEntry {
    pub fn spec(&self) -> MethodSpec {
        match self {
            MethodEntry::Name(k) => MethodSpec::new(*k),
            MethodEntry::Spec(s) => s.clone(),
        }
    }
}

/// How ratios and methods combine into runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPlan {
    /// Every method at every ratio.
    #[default]
    Grid,
    /// ERM at every ratio, every other method at ratio 20 only.
    Standard,
}

/// The ratio at which [`SweepPlan::Standard`] compares methods.
pub const STANDARD_RATIO: u32 = 20;

fn default_ratios() -> Vec<u32> {
    RatioSpec::DEFAULT_RATIOS.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_methods() -> Vec<MethodEntry> {
    MethodKind::ALL
        .iter()
        .map(|&k| MethodEntry::Name(k))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub source: DataSource,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<u32>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodEntry>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub plan: SweepPlan,
    #[serde(default)]
    pub train: TrainConfig,
    /// Mixed into every per-run seed.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    #[serde(default)]
    pub workers: usize,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.ratios.contains(&0) {
            return Err(Error::Config(
                "ratios must be a nonempty list of positive integers".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let mut kinds: Vec<MethodKind> = self.methods.iter().map(|m| m.spec().kind).collect();
        kinds.sort();
        if kinds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("a method is listed twice".into()));
        }
        for m in &self.methods {
            m.spec().hyper.validate()?;
        }
        self.train.validate()?;
        if let DataSource::Synth(s) = &self.source {
            s.config()?;
        }
        Ok(())
    }

    /// Every `(method, ratio, seed)` to run, in report order.
    pub fn triples(&self) -> Vec<(MethodSpec, u32, u64)> {
        let mut methods: Vec<MethodSpec> = self.methods.iter().map(MethodEntry::spec).collect();
        methods.sort_by_key(|m| m.kind.order());
        let mut ratios = self.ratios.clone();
        ratios.sort_unstable();
        ratios.dedup();
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        let mut out = Vec::new();
        for m in &methods {
            for &r in &ratios {
                let included = match self.plan {
                    SweepPlan::Grid => true,
                    SweepPlan::Standard => m.kind == MethodKind::Erm || r == STANDARD_RATIO,
                };
                if included {
                    out.extend(seeds.iter().map(|&s| (m.clone(), r, s)));
                }
            }
        }
        out
    }
}

/// The six headline scores of one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub f1: f64,
    pub acc: f64,
    pub tpr_gap: f64,
    pub fpr_gap: f64,
    pub f1_gap: f64,
    pub dp_gap: f64,
}

impl Scores {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.f1,
            self.acc,
            self.tpr_gap,
            self.fpr_gap,
            self.f1_gap,
            self.dp_gap,
        ]
    }
}

impl From<&MetricReport> for Scores {
    fn from(m: &MetricReport) -> Self {
        Self {
            f1: m.f1,
            acc: m.acc,
            tpr_gap: m.tpr_gap,
            fpr_gap: m.fpr_gap,
            f1_gap: m.f1_gap,
            dp_gap: m.dp_gap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: MethodKind,
    pub ratio: u32,
    pub seed: u64,
    /// `None` when the run failed.
    pub scores: Option<Scores>,
    pub error: Option<String>,
}

impl ReportRow {
    fn key(&self) -> (usize, u32, u64) {
        (self.method.order(), self.ratio, self.seed)
    }
}

/// Everything persisted for one finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub row: ReportRow,
    pub per_class: Option<PerClass>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

fn run_stem(method: MethodKind, ratio: u32, seed: u64) -> String {
    format!("{method}_r{ratio}_s{seed}")
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Order-sensitive digest of the test split (ids, features, labels, tags).
pub fn test_split_fingerprint(ds: &Dataset) -> u64 {
    let mut h = DefaultHasher::new();
    for s in ds.split(Split::Test) {
        s.id.hash(&mut h);
        for v in s.features.values() {
            v.to_bits().hash(&mut h);
        }
        for v in s.label.probs() {
            v.to_bits().hash(&mut h);
        }
        s.gender.hash(&mut h);
    }
    h.finish()
}

/// Loads or generates the sweep's base dataset and applies the dominance
/// filter. Returns it with the majority-gender direction used for
/// amplification.
pub fn prepare_base(source: &DataSource) -> Result<(Dataset, RatioSpec)> {
    match source {
        DataSource::Synth(s) => {
            let cfg = s.config()?;
            let ds = dominant_filter(&synth_generate(&cfg)?);
            Ok((ds, cfg.ratio))
        }
        DataSource::Manifest { manifest, features } => {
            let ds = dominant_filter(&load_manifest(manifest, features)?);
            let dir = RatioSpec::observed(1, &ds)?;
            Ok((ds, dir))
        }
    }
}

/// One `(method, ratio, seed)` run on an already filtered dataset.
pub fn run_one(
    base: &Dataset,
    direction: &RatioSpec,
    method: &MethodSpec,
    ratio: u32,
    seed: u64,
    spec_seed: u64,
    cfg: &TrainConfig,
) -> Result<(RunRecord, Vec<u8>, String)> {
    let amplified = amplify_bias(
        base,
        &direction.with_ratio(ratio)?,
        derive_seed(&[spec_seed, TAG_AMPLIFY, ratio as u64, seed]),
    )?;
    if test_split_fingerprint(&amplified) != test_split_fingerprint(base) {
        return Err(Error::Internal(
            "amplification altered the test split".into(),
        ));
    }
    let mut cfg = cfg.clone();
    cfg.seed = derive_seed(&[
        spec_seed,
        TAG_TRAIN,
        method.kind.order() as u64,
        ratio as u64,
        seed,
    ]);
    let outcome = train(method, &cfg, &amplified)?;
    let report = evaluate_split(&outcome.bundle, &amplified, Split::Test)?;
    let record = RunRecord {
        row: ReportRow {
            method: method.kind,
            ratio,
            seed,
            scores: Some(Scores::from(&report)),
            error: None,
        },
        per_class: Some(report.per_class),
        best_epoch: Some(outcome.log.best_epoch),
        epochs_run: Some(outcome.log.epochs.len()),
    };
    Ok((
        record,
        outcome.bundle.to_checkpoint_bytes(),
        outcome.log.to_csv()?,
    ))
}

fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

/// Every run record found under `out/runs`, in report order.
pub fn load_rows(out: &Path) -> Result<Vec<ReportRow>> {
    let dir = runs_dir(out);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut rows = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let rec: RunRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
                location: path.display().to_string(),
                message: e.to_string(),
            })?;
            rows.push(rec.row);
        }
    }
    rows.sort_by_key(ReportRow::key);
    Ok(rows)
}

/// Runs every missing triple of `spec`, then writes `report.csv` and
/// `report.md` into the output directory. Returns all rows on disk.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ReportRow>> {
    spec.validate()?;
    let out = &spec.output_dir;
    for dir in [runs_dir(out), out.join("checkpoints"), out.join("logs")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let (base, direction) = prepare_base(&spec.source)?;
    let pending: Vec<(MethodSpec, u32, u64)> = spec
        .triples()
        .into_iter()
        .filter(|(m, r, s)| {
            !runs_dir(out)
                .join(format!("{}.json", run_stem(m.kind, *r, *s)))
                .exists()
        })
        .collect();
    info!("{} runs pending", pending.len());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::Internal(format!("worker pool: {e}")))?;
    let results: Vec<Result<()>> = pool.install(|| {
        pending
            .par_iter()
            .map(|(m, r, s)| {
                let stem = run_stem(m.kind, *r, *s);
                let record = match run_one(&base, &direction, m, *r, *s, spec.seed, &spec.train) {
                    Ok((record, checkpoint, log_csv)) => {
                        write_atomic(
                            &out.join("checkpoints").join(format!("{stem}.emoc")),
                            &checkpoint,
                        )?;
                        write_atomic(
                            &out.join("logs").join(format!("{stem}.csv")),
                            log_csv.as_bytes(),
                        )?;
                        record
                    }
                    Err(e) => {
                        warn!("run {stem} failed: {e}");
                        RunRecord {
                            row: ReportRow {
                                method: m.kind,
                                ratio: *r,
                                seed: *s,
                                scores: None,
                                error: Some(e.to_string()),
                            },
                            per_class: None,
                            best_epoch: None,
                            epochs_run: None,
                        }
                    }
                };
                let json = serde_json::to_vec_pretty(&record)?;
                write_atomic(&runs_dir(out).join(format!("{stem}.json")), &json)
            })
            .collect()
    });
    results.into_iter().collect::<Result<()>>()?;

    let rows = load_rows(out)?;
    write_atomic(
        &out.join("report.csv"),
        emit_report(&rows, ReportFormat::Csv).as_bytes(),
    )?;
    write_atomic(
        &out.join("report.md"),
        emit_report(&rows, ReportFormat::Markdown).as_bytes(),
    )?;
    Ok(rows)
}

const COLUMNS: [&str; 6] = ["F1", "ACC", "TPR_gap", "FPR_gap", "F1_gap", "DP_gap"];
const HIGHER_IS_BETTER: [bool; 6] = [true, true, false, false, false, false];

/// Rank marks per row and column within each ratio block: 1 = best,
/// 2 = second best, 0 = neither. Ties share a rank.
fn marks(rows: &[&ReportRow]) -> Vec<[u8; 6]> {
    let mut out = vec![[0u8; 6]; rows.len()];
    let mut ratios: Vec<u32> = rows.iter().map(|r| r.ratio).collect();
    ratios.sort_unstable();
    ratios.dedup();
    for ratio in ratios {
        for col in 0..6 {
            let mut vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.ratio == ratio)
                .filter_map(|r| r.scores.map(|s| s.as_array()[col]))
                .filter(|v| v.is_finite())
                .map(|v| round4(v))
                .collect();
            vals.sort_by(|a, b| a.total_cmp(b));
            if HIGHER_IS_BETTER[col] {
                vals.reverse();
            }
            vals.dedup();
            for (i, r) in rows.iter().enumerate() {
                if r.ratio != ratio {
                    continue;
                }
                if let Some(s) = r.scores {
                    let v = round4(s.as_array()[col]);
                    if vals.first() == Some(&v) {
                        out[i][col] = 1;
                    } else if vals.get(1) == Some(&v) {
                        out[i][col] = 2;
                    }
                }
            }
        }
    }
    out
}

/// Ranking uses the printed precision so equal-looking cells tie.
fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn sorted(rows: &[ReportRow]) -> Vec<&ReportRow> {
    let mut v: Vec<&ReportRow> = rows.iter().collect();
    v.sort_by_key(|r| r.key());
    v
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-method means over seeds for each ratio (failed runs excluded).
/// `seed` of each mean row holds the number of runs averaged.
pub fn seed_means(rows: &[ReportRow]) -> Vec<ReportRow> {
    let rows = sorted(rows);
    let mut out: Vec<ReportRow> = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let (m, r) = (rows[i].method, rows[i].ratio);
        let group: Vec<&ReportRow> = rows[i..]
            .iter()
            .take_while(|x| x.method == m && x.ratio == r)
            .copied()
            .collect();
        i += group.len();
        let ok: Vec<[f64; 6]> = group
            .iter()
            .filter_map(|x| x.scores.map(|s| s.as_array()))
            .collect();
        let scores = (!ok.is_empty()).then(|| {
            let mut acc = [0.0; 6];
            for a in &ok {
                for k in 0..6 {
                    acc[k] += a[k] / ok.len() as f64;
                }
            }
            Scores {
                f1: acc[0],
                acc: acc[1],
                tpr_gap: acc[2],
                fpr_gap: acc[3],
                f1_gap: acc[4],
                dp_gap: acc[5],
            }
        });
        out.push(ReportRow {
            method: m,
            ratio: r,
            seed: ok.len() as u64,
            error: scores.is_none().then(|| "every run failed".to_string()),
            scores,
        });
    }
    out
}

fn markdown_table(out: &mut String, rows: &[&ReportRow], third: &str) {
    let m = marks(rows);
    let _ = writeln!(
        out,
        "| Method | Ratio | {third} | {} |",
        COLUMNS.join(" | ")
    );
    let _ = writeln!(out, "|---|---|---|{}", "---:|".repeat(6));
    for (row, mk) in rows.iter().zip(&m) {
        let cells: Vec<String> = match row.scores {
            Some(s) => s
                .as_array()
                .iter()
                .zip(mk)
                .map(|(v, &k)| match k {
                    1 => format!("**{v:.4}**"),
                    2 => format!("<u>{v:.4}</u>"),
                    _ => format!("{v:.4}"),
                })
                .collect(),
            None => vec!["ERROR".to_string(); 6],
        };
        let _ = writeln!(
            out,
            "| {} | 1:{} | {} | {} |",
            row.method,
            row.ratio,
            row.seed,
            cells.join(" | ")
        );
    }
}

/// Renders rows in method order, then ratio, then seed. Markdown bolds the
/// best and underlines the second-best value of each column within a ratio
/// and, when any configuration has several seeds, appends a table of means.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat) -> String {
    let rows_sorted = sorted(rows);
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("method,ratio,seed,f1,acc,tpr_gap,fpr_gap,f1_gap,dp_gap,error\n");
            for r in rows_sorted {
                let vals = match r.scores {
                    Some(s) => s
                        .as_array()
                        .iter()
                        .map(|v| format!("{v:.6}"))
                        .collect::<Vec<_>>(),
                    None => vec![String::new(); 6],
                };
                let err = r.error.as_deref().map(csv_escape).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.method,
                    r.ratio,
                    r.seed,
                    vals.join(","),
                    err
                );
            }
        }
        ReportFormat::Markdown => {
            markdown_table(&mut out, &rows_sorted, "Seed");
            let means = seed_means(rows);
            if means.len() < rows.len() {
                out.push_str("\nMean over seeds:\n\n");
                let refs: Vec<&ReportRow> = means.iter().collect();
                markdown_table(&mut out, &refs, "Runs");
            }
        }
    }
    out
}

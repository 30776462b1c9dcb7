//! Training drivers for the fourteen debiasing strategies.
//!
//! Every method shares one loop: shuffle the train split per epoch, prepare
//! each batch (method-specific state such as EMA trackers or class centers is
//! updated here), build the composite loss with [`build_loss`], backpropagate
//! and take one AdamW step. After every epoch the dev split is scored and the
//! parameters with the best dev macro-F1 are kept; training stops after
//! `patience` epochs without strict improvement.

pub mod gradcheck;
mod optim;
mod probe;
mod steps;

use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Graph, Tensor};
use crate::dataset::{
    compute_reweights, downsample_balance, Dataset, Gender, ReweightMode, Sample, Split,
};
use crate::error::{Error, Result};
use crate::losses::{lvr_center_update, ClassBalanceWeights, EmaLossTracker};
use crate::metrics::{self, MetricReport};
use crate::model::{ClassCenters, DetectorTarget, ModelBundle, ModelLayout, Widths};
use crate::seed::{derive_seed, rng_from};

pub use optim::AdamW;
pub use probe::{gender_probe_accuracy, ProbeConfig};
pub use steps::{build_loss, StepInputs};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_SWAP: u64 = 3;
const TAG_DOWNSAMPLE: u64 = 4;

/// Rows per forward pass when scoring a whole split.
const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MethodKind {
    Erm,
    Adv,
    Madv,
    Gr,
    Ds,
    Rw,
    BlindPlusD,
    Gdro,
    Gadro,
    Lff,
    Sih,
    Disent,
    BlindMinusD,
    Lvr,
}

impl MethodKind {
    /// Report order.
    pub const ALL: [MethodKind; 14] = [
        MethodKind::Erm,
        MethodKind::Adv,
        MethodKind::Madv,
        MethodKind::Gr,
        MethodKind::Ds,
        MethodKind::Rw,
        MethodKind::BlindPlusD,
        MethodKind::Gdro,
        MethodKind::Gadro,
        MethodKind::Lff,
        MethodKind::Sih,
        MethodKind::Disent,
        MethodKind::BlindMinusD,
        MethodKind::Lvr,
    ];

    /// Whether the method needs train-time gender tags.
    pub fn bias_supervised(self) -> bool {
        matches!(
            self,
            MethodKind::Adv
                | MethodKind::Madv
                | MethodKind::Gr
                | MethodKind::Ds
                | MethodKind::Rw
                | MethodKind::BlindPlusD
                | MethodKind::Gdro
                | MethodKind::Gadro
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Erm => "ERM",
            MethodKind::Adv => "ADV",
            MethodKind::Madv => "MADV",
            MethodKind::Gr => "GR",
            MethodKind::Ds => "DS",
            MethodKind::Rw => "RW",
            MethodKind::BlindPlusD => "BLIND_PLUS_D",
            MethodKind::Gdro => "GDRO",
            MethodKind::Gadro => "GADRO",
            MethodKind::Lff => "LFF",
            MethodKind::Sih => "SIH",
            MethodKind::Disent => "DISENT",
            MethodKind::BlindMinusD => "BLIND_MINUS_D",
            MethodKind::Lvr => "LVR",
        }
    }

    /// Position in [`MethodKind::ALL`].
    pub fn order(self) -> usize {
        MethodKind::ALL
            .iter()
            .position(|&k| k == self)
            .expect("listed")
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', '+'], "_");
        let alias = match norm.as_str() {
            "BLIND_D" | "BLIND__D" => "BLIND_PLUS_D",
            "BLIND_MINUS" => "BLIND_MINUS_D",
            other => other,
        };
        MethodKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == alias)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Method hyperparameters. Every field has its published default and can be
/// overridden individually in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub lambda_adv: f64,
    pub lambda_diff: f64,
    /// Number of adversaries for MADV (ADV always uses one).
    pub k: usize,
    pub lambda_gr: f64,
    /// Temperature of the soft threshold in the GR penalty.
    pub tau: f64,
    pub gamma: f64,
    pub lambda_b: f64,
    pub lambda_gd: f64,
    pub q: f64,
    pub alpha: f64,
    pub r: f64,
    pub lambda_lvr: f64,
    pub omega: f64,
    pub beta: f64,
    /// Class-balanced CE; off means uniform class weights.
    pub class_balance: bool,
    /// LVR auxiliary center-logit CE.
    pub center_loss: bool,
    /// DisEnt feature swapping.
    pub swap: bool,
    /// Fraction of the step budget before swapping starts.
    pub swap_warmup: f64,
    pub reweight_mode: ReweightMode,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lambda_adv: 3.2,
            lambda_diff: 0.2,
            k: 3,
            lambda_gr: 4.0,
            tau: 0.05,
            gamma: 0.7,
            lambda_b: 1.0,
            lambda_gd: 4.0,
            q: 0.7,
            alpha: 0.7,
            r: 0.7,
            lambda_lvr: 0.1,
            omega: 0.3,
            beta: 0.999,
            class_balance: true,
            center_loss: true,
            swap: true,
            swap_warmup: 0.1,
            reweight_mode: ReweightMode::Joint,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_diff", self.lambda_diff),
            ("lambda_gr", self.lambda_gr),
            ("gamma", self.gamma),
            ("lambda_b", self.lambda_b),
            ("lambda_gd", self.lambda_gd),
            ("lambda_lvr", self.lambda_lvr),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        let unit = [
            ("alpha", self.alpha),
            ("r", self.r),
            ("omega", self.omega),
            ("swap_warmup", self.swap_warmup),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Config(format!("q = {} outside (0, 1]", self.q)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "beta = {} outside [0, 1)",
                self.beta
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau = {} must be positive",
                self.tau
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    #[serde(default)]
    pub hyper: Hyper,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            hyper: Hyper::default(),
        }
    }

    /// Components the method trains.
    pub fn layout(
        &self,
        layers: usize,
        dims: usize,
        classes: usize,
        widths: Widths,
    ) -> ModelLayout {
        let mut l = ModelLayout::plain(layers, dims, classes, widths);
        match self.kind {
            MethodKind::Adv => l.adversaries = 1,
            MethodKind::Madv => l.adversaries = self.hyper.k,
            MethodKind::BlindPlusD => l.detector = Some(DetectorTarget::Gender),
            MethodKind::BlindMinusD => l.detector = Some(DetectorTarget::HammingAcc),
            MethodKind::Lff | MethodKind::Sih => l.biased_branch = true,
            MethodKind::Disent => l.dual_hidden = Some(widths.dual_hidden),
            _ => {}
        }
        l
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub widths: Widths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            widths: Widths::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} must be >= 2",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} invalid",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay {} invalid",
                self.weight_decay
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether train-split gender tags are handed to the trainer at all.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GenderTags {
    #[default]
    Provided,
    Withheld,
}

/// Train-split gender tags behind an access check. Armed guards turn every
/// read into [`Error::GenderAccess`]; the trainer arms it for every method
/// that is not bias-supervised.
#[derive(Clone, Debug)]
pub struct GenderGuard {
    tags: Option<Vec<Gender>>,
    armed: bool,
}

impl GenderGuard {
    pub fn new(tags: Option<Vec<Gender>>, armed: bool) -> Self {
        Self { tags, armed }
    }

    pub fn is_armed(&self) -> bool {
        self.armed
    }

    pub fn read(&self, idx: &[usize]) -> Result<Vec<Gender>> {
        if self.armed {
            return Err(Error::GenderAccess(format!(
                "attempted to read {} train-split gender tags",
                idx.len()
            )));
        }
        let tags = self
            .tags
            .as_ref()
            .ok_or_else(|| Error::Config("gender tags were withheld from training".into()))?;
        Ok(idx.iter().map(|&i| tags[i]).collect())
    }

    /// Per-gender counts over all tags.
    pub fn sizes(&self) -> Result<[f64; 2]> {
        let all: Vec<usize> = (0..self.tags.as_ref().map_or(0, Vec::len)).collect();
        let tags = self.read(&all)?;
        let mut n = [0.0; 2];
        for gd in tags {
            n[gd.index()] += 1.0;
        }
        Ok(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1: f64,
    pub dev_acc: f64,
    pub dev_tpr_gap: f64,
    pub dev_fpr_gap: f64,
    pub dev_f1_gap: f64,
    pub dev_dp_gap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e)?;
        }
        if self.epochs.is_empty() {
            w.write_record([
                "epoch",
                "train_loss",
                "dev_f1",
                "dev_acc",
                "dev_tpr_gap",
                "dev_fpr_gap",
                "dev_f1_gap",
                "dev_dp_gap",
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: TrainLog,
}

/// Features of a sample list as one `N × D` tensor per layer.
pub fn layer_tensors(samples: &[&Sample], layers: usize, dims: usize) -> Result<Vec<Tensor>> {
    (0..layers)
        .map(|l| {
            let mut data = Vec::with_capacity(samples.len() * dims);
            for s in samples {
                data.extend(s.features.layer(l).iter().map(|&v| v as f64));
            }
            Tensor::from_vec(samples.len(), dims, data)
        })
        .collect()
}

fn label_tensor(samples: &[&Sample]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.label.probs().to_vec()).collect();
    Tensor::from_rows(&rows)
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * t.cols());
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::from_vec(idx.len(), t.cols(), data).expect("consistent shape")
}

/// Predicted distributions for every sample of `split`, in dataset order.
pub fn predict_split(bundle: &ModelBundle, ds: &Dataset, split: Split) -> Result<Vec<Vec<f64>>> {
    let samples: Vec<&Sample> = ds.split(split).map(|s| s.as_ref()).collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let xs = layer_tensors(chunk, ds.layers(), ds.dims())?;
        let p = bundle.predict(&xs)?;
        out.extend((0..p.rows()).map(|i| p.row_slice(i).to_vec()));
    }
    Ok(out)
}

/// Every metric of `bundle` on one split.
pub fn evaluate_split(bundle: &ModelBundle, ds: &Dataset, split: Split) -> Result<MetricReport> {
    let probs = predict_split(bundle, ds, split)?;
    let labels: Vec<&[f64]> = ds.split(split).map(|s| s.label.probs()).collect();
    let genders: Vec<Gender> = ds.split(split).map(|s| s.gender).collect();
    metrics::evaluate(&probs, &labels, &genders)
}

/// Dev scores; fairness gaps are NaN when a gender is missing from dev.
fn dev_scores(bundle: &ModelBundle, ds: &Dataset) -> Result<[f64; 6]> {
    let probs = predict_split(bundle, ds, Split::Dev)?;
    let labels: Vec<&[f64]> = ds.split(Split::Dev).map(|s| s.label.probs()).collect();
    let genders: Vec<Gender> = ds.split(Split::Dev).map(|s| s.gender).collect();
    if Gender::ALL.iter().all(|gd| genders.contains(gd)) {
        return Ok(metrics::evaluate(&probs, &labels, &genders)?.scalars());
    }
    let pred: Vec<Vec<bool>> = probs.iter().map(|p| metrics::binarize(p)).collect();
    let truth: Vec<Vec<bool>> = labels.iter().map(|y| metrics::binarize(y)).collect();
    let nan = f64::NAN;
    Ok([
        metrics::macro_f1(&pred, &truth)?,
        metrics::hamming_acc(&pred, &truth)?,
        nan,
        nan,
        nan,
        nan,
    ])
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    pub gender_tags: GenderTags,
}

/// Stateful single-run trainer. Most callers want [`train`].
pub struct Trainer {
    method: MethodSpec,
    cfg: TrainConfig,
    bundle: ModelBundle,
    opt: AdamW,
    layers: Vec<Tensor>,
    labels: Tensor,
    sample_weights: Vec<f64>,
    guard: GenderGuard,
    weights: ClassBalanceWeights,
    ema: Option<EmaLossTracker>,
    group_sizes: [f64; 2],
    swap_rng: ChaCha8Rng,
    swap_after: u64,
    steps: u64,
}

impl Trainer {
    /// Sets up a run on the train split of `ds`, applying the DS/RW dataset
    /// transforms. Returns the (possibly transformed) dataset alongside.
    pub fn new(
        method: &MethodSpec,
        cfg: &TrainConfig,
        ds: &Dataset,
        opts: &TrainOptions,
    ) -> Result<(Self, Dataset)> {
        method.hyper.validate()?;
        cfg.validate()?;
        let bs = method.kind.bias_supervised();
        if bs && opts.gender_tags == GenderTags::Withheld {
            return Err(Error::Config(format!(
                "{} is bias-supervised and needs train-time gender tags",
                method.kind
            )));
        }
        if ds.split_len(Split::Train) < 2 || ds.split_len(Split::Dev) == 0 {
            return Err(Error::Validation(format!(
                "training needs at least 2 train and 1 dev samples, got {} and {}",
                ds.split_len(Split::Train),
                ds.split_len(Split::Dev)
            )));
        }
        let ds = match method.kind {
            MethodKind::Ds => downsample_balance(ds, derive_seed(&[cfg.seed, TAG_DOWNSAMPLE]))?,
            _ => ds.clone(),
        };
        let sample_weights = match method.kind {
            MethodKind::Rw => ds
                .samples()
                .iter()
                .zip(compute_reweights(&ds, method.hyper.reweight_mode)?)
                .filter(|(s, _)| s.split == Split::Train)
                .map(|(_, w)| w)
                .collect(),
            _ => vec![1.0; ds.split_len(Split::Train)],
        };
        let train: Vec<&Sample> = ds.split(Split::Train).map(|s| s.as_ref()).collect();
        if train.len() < 2 {
            return Err(Error::Validation(
                "train split has fewer than 2 samples after transforms".into(),
            ));
        }
        let layers = layer_tensors(&train, ds.layers(), ds.dims())?;
        let labels = label_tensor(&train)?;
        let tags = match opts.gender_tags {
            GenderTags::Provided => Some(train.iter().map(|s| s.gender).collect()),
            GenderTags::Withheld => None,
        };
        let guard = GenderGuard::new(tags, !bs);
        let group_sizes = if matches!(method.kind, MethodKind::Gdro | MethodKind::Gadro) {
            guard.sizes()?
        } else {
            [0.0; 2]
        };

        let layout = method.layout(ds.layers(), ds.dims(), ds.num_categories(), cfg.widths);
        let mut bundle = ModelBundle::new(
            layout,
            ds.categories().to_vec(),
            derive_seed(&[cfg.seed, TAG_INIT]),
        )?;
        if method.kind == MethodKind::Lvr {
            bundle.centers = Some(ClassCenters::zeros(
                ds.num_categories(),
                cfg.widths.hidden,
                method.hyper.omega,
            ));
        }
        let weights = if method.hyper.class_balance {
            ClassBalanceWeights::new(&ds.train_label_mass(), method.hyper.beta)?
        } else {
            ClassBalanceWeights::uniform(ds.num_categories())
        };
        let ema = matches!(method.kind, MethodKind::Lff | MethodKind::Disent)
            .then(|| EmaLossTracker::new(train.len(), method.hyper.alpha));
        let per_epoch = Self::batches_per_epoch(train.len(), cfg.batch_size) as f64;
        let swap_after =
            (method.hyper.swap_warmup * per_epoch * cfg.max_epochs as f64).ceil() as u64;

        let trainer = Self {
            method: method.clone(),
            cfg: cfg.clone(),
            bundle,
            opt: AdamW::new(cfg.learning_rate, cfg.weight_decay),
            layers,
            labels,
            sample_weights,
            guard,
            weights,
            ema,
            group_sizes,
            swap_rng: rng_from(derive_seed(&[cfg.seed, TAG_SWAP])),
            swap_after,
            steps: 0,
        };
        Ok((trainer, ds))
    }

    fn batches_per_epoch(n: usize, b: usize) -> usize {
        let full = n / b;
        if n % b >= 2 {
            full + 1
        } else {
            full
        }
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn guard(&self) -> &GenderGuard {
        &self.guard
    }

    pub fn class_weights(&self) -> &ClassBalanceWeights {
        &self.weights
    }

    pub fn train_len(&self) -> usize {
        self.labels.rows()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Shuffled batches of train positions for `epoch`. A trailing batch of
    /// a single sample is dropped.
    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train_len()).collect();
        order.shuffle(&mut rng_from(derive_seed(&[
            self.cfg.seed,
            TAG_SHUFFLE,
            epoch as u64,
        ])));
        order
            .chunks(self.cfg.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Gathers a batch and updates per-method running state for it.
    pub fn prepare(&mut self, idx: &[usize]) -> Result<StepInputs> {
        let layers: Vec<Tensor> = self.layers.iter().map(|t| gather(t, idx)).collect();
        let labels = gather(&self.labels, idx);
        let mut inp = StepInputs::plain(layers, labels);
        inp.sample_weights = Tensor::column(
            &idx.iter()
                .map(|&i| self.sample_weights[i])
                .collect::<Vec<_>>(),
        );
        inp.group_sizes = self.group_sizes;
        if self.method.kind.bias_supervised() {
            inp.genders = Some(self.guard.read(idx)?);
        }
        match self.method.kind {
            MethodKind::Lff | MethodKind::Disent => {
                let mut g = Graph::new();
                let (bound, _) = self.bundle.bind(&mut g)?;
                let (ce_d, ce_b) = steps::branch_losses(&mut g, &bound, &inp)?;
                let ema = self.ema.as_mut().expect("LfF/DisEnt tracker");
                for (k, &i) in idx.iter().enumerate() {
                    ema.update(i, ce_b[k], ce_d[k]);
                }
                inp.difficulty = Some(Tensor::column(
                    &idx.iter().map(|&i| ema.weight(i)).collect::<Vec<_>>(),
                ));
                if self.method.kind == MethodKind::Disent
                    && self.method.hyper.swap
                    && self.steps >= self.swap_after
                {
                    let mut perm: Vec<usize> = (0..idx.len()).collect();
                    perm.shuffle(&mut self.swap_rng);
                    inp.perm = Some(perm);
                }
            }
            MethodKind::Lvr => {
                let h = self.bundle.embed(&inp.layers)?;
                let centers = self.bundle.centers.as_mut().expect("LVR centers");
                lvr_center_update(centers, &h, &inp.labels)?;
                inp.centers = Some(centers.centers.clone());
            }
            MethodKind::BlindPlusD => {
                let g = inp.genders.as_ref().expect("read above");
                inp.detector_target = Some(Tensor::column(
                    &g.iter().map(|gd| gd.target()).collect::<Vec<_>>(),
                ));
            }
            MethodKind::BlindMinusD => {
                let pred = self.bundle.predict(&inp.layers)?;
                inp.detector_target = Some(steps::hamming_targets(&pred, &inp.labels));
            }
            _ => {}
        }
        Ok(inp)
    }

    /// One optimizer step on the batch at train positions `idx`.
    pub fn step(&mut self, idx: &[usize]) -> Result<f64> {
        let inp = self.prepare(idx)?;
        let mut g = Graph::new();
        let (bound, vars) = self.bundle.bind(&mut g)?;
        let loss = build_loss(&mut g, &bound, &self.method, &self.weights, &inp)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} loss {value}",
                self.method.kind
            )));
        }
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        let mut params = self.bundle.tensors_mut();
        self.opt.step(&mut params, &grads)?;
        self.steps += 1;
        Ok(value)
    }

    /// Full training with early stopping on dev macro-F1.
    pub fn run(mut self, ds: &Dataset) -> Result<TrainOutcome> {
        let mut log = TrainLog::default();
        let mut best: Option<(f64, ModelBundle)> = None;
        let mut stale = 0;
        for epoch in 1..=self.cfg.max_epochs {
            let mut total = 0.0;
            let batches = self.batches(epoch);
            for (s, idx) in batches.iter().enumerate() {
                total += self.step(idx).map_err(|e| match e {
                    Error::NonFinite(m) => {
                        Error::NonFinite(format!("epoch {epoch} step {}: {m}", s + 1))
                    }
                    other => other,
                })?;
            }
            let train_loss = total / batches.len().max(1) as f64;
            let d = dev_scores(&self.bundle, ds)?;
            debug!(
                "{} epoch {epoch}: loss {train_loss:.4} dev F1 {:.4}",
                self.method.kind, d[0]
            );
            log.epochs.push(EpochLog {
                epoch,
                train_loss,
                dev_f1: d[0],
                dev_acc: d[1],
                dev_tpr_gap: d[2],
                dev_fpr_gap: d[3],
                dev_f1_gap: d[4],
                dev_dp_gap: d[5],
            });
            if best.as_ref().is_none_or(|(f, _)| d[0] > *f) {
                best = Some((d[0], self.bundle.clone()));
                log.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.cfg.patience {
                    break;
                }
            }
        }
        let (_, bundle) = best.expect("at least one epoch");
        Ok(TrainOutcome { bundle, log })
    }
}

/// Trains `method` on `ds` with gender tags provided.
pub fn train(method: &MethodSpec, cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(method, cfg, ds, &TrainOptions::default())
}

pub fn train_with(
    method: &MethodSpec,
    cfg: &TrainConfig,
    ds: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let (trainer, ds) = Trainer::new(method, cfg, ds, opts)?;
    trainer.run(&ds)
}

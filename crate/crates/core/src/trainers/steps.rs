//! Per-method composite objectives.
//!
//! [`build_loss`] is a pure function of the bound parameters and a prepared
//! batch, so the same code path serves training, gradient checks and the
//! neutral-hyperparameter comparisons. Anything stateful (EMA trackers, class
//! centers, swap permutations, detector targets) is computed beforehand by
//! the trainer and passed in through [`StepInputs`].

use log::warn;

use super::{MethodKind, MethodSpec};
use crate::compute::{Graph, Tensor, Var};
use crate::dataset::Gender;
use crate::error::{Error, Result};
use crate::losses::{
    blind_weighted_ce, ce_soft, diff_loss, dro_objective, gce_multilabel, gr_penalty,
    lvr_center_ce, lvr_reg, sih_debiased_ce, ClassBalanceWeights,
};
use crate::metrics::binarize;
use crate::model::{BoundBundle, DetectorTarget};

/// One batch plus every precomputed quantity a step may need.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInputs {
    /// One `B × D` tensor per feature layer.
    pub layers: Vec<Tensor>,
    /// `B × C` distributional labels.
    pub labels: Tensor,
    /// `B × 1`; all ones except under RW.
    pub sample_weights: Tensor,
    /// Present only for bias-supervised methods.
    pub genders: Option<Vec<Gender>>,
    /// `B × 1` relative difficulty `W(x)` (LfF, DisEnt).
    pub difficulty: Option<Tensor>,
    /// Swap permutation of the batch (DisEnt, after warm-up).
    pub perm: Option<Vec<usize>>,
    /// Class centers after this batch's update (LVR).
    pub centers: Option<Tensor>,
    /// `B × 1` detector targets (BLIND).
    pub detector_target: Option<Tensor>,
    /// Train-split gender sizes `[n_F, n_M]` (GADRO).
    pub group_sizes: [f64; 2],
}

impl StepInputs {
    pub fn batch_size(&self) -> usize {
        self.labels.rows()
    }

    /// Plain inputs with unit sample weights and nothing precomputed.
    pub fn plain(layers: Vec<Tensor>, labels: Tensor) -> Self {
        let b = labels.rows();
        Self {
            layers,
            labels,
            sample_weights: Tensor::filled(b, 1, 1.0),
            genders: None,
            difficulty: None,
            perm: None,
            centers: None,
            detector_target: None,
            group_sizes: [0.0; 2],
        }
    }

    fn genders(&self, what: &str) -> Result<&[Gender]> {
        self.genders
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{what} needs gender tags")))
    }
}

fn missing(what: &str) -> Error {
    Error::Internal(format!("{what} missing from prepared step inputs"))
}

fn mean_weighted(g: &mut Graph, per_sample: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone())?;
    let t = g.mul(per_sample, w)?;
    g.mean(t)
}

/// Mean of `per_sample` over the rows selected by `mask`, `None` if empty.
fn masked_mean(g: &mut Graph, per_sample: Var, mask: &[bool]) -> Result<Option<Var>> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(None);
    }
    let w: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 1.0 / n as f64 } else { 0.0 })
        .collect();
    let wv = g.constant(Tensor::column(&w))?;
    let t = g.mul(per_sample, wv)?;
    Ok(Some(g.sum(t)?))
}

fn both_genders(genders: &[Gender]) -> bool {
    Gender::ALL.iter().all(|gd| genders.contains(gd))
}

/// Composite training loss of one step for `method`.
pub fn build_loss(
    g: &mut Graph,
    bound: &BoundBundle,
    method: &MethodSpec,
    weights: &ClassBalanceWeights,
    inp: &StepInputs,
) -> Result<Var> {
    let h = &method.hyper;
    let xs = inp
        .layers
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let y = g.constant(inp.labels.clone())?;
    let b = inp.batch_size();

    match method.kind {
        MethodKind::Erm | MethodKind::Ds | MethodKind::Rw => {
            let out = bound.head.forward(g, &xs)?;
            let ce = ce_soft(g, y, out.probs, weights)?;
            mean_weighted(g, ce, &inp.sample_weights)
        }
        MethodKind::Adv | MethodKind::Madv => {
            let out = bound.head.forward(g, &xs)?;
            let ce = ce_soft(g, y, out.probs, weights)?;
            let base = mean_weighted(g, ce, &inp.sample_weights)?;
            let genders = inp.genders("adversarial training")?;
            if !both_genders(genders) {
                warn!("adversary term skipped: batch holds a single gender");
                return Ok(base);
            }
            let adv = bound
                .adversary
                .as_ref()
                .ok_or_else(|| missing("adversary"))?;
            let (logits, _) = adv.forward(g, out.aggregated, h.lambda_adv)?;
            let targets: Vec<f64> = genders.iter().map(|gd| gd.target()).collect();
            let t = g.constant(Tensor::column(&targets))?;
            let mut bce_sum: Option<Var> = None;
            for z in &logits {
                let bce = g.bce_with_logits(*z, t)?;
                let m = g.mean(bce)?;
                bce_sum = Some(match bce_sum {
                    None => m,
                    Some(s) => g.add(s, m)?,
                });
            }
            let bce_sum = bce_sum.ok_or_else(|| missing("adversary heads"))?;
            let bce = g.scale(bce_sum, 1.0 / logits.len() as f64)?;
            let mut total = g.add(base, bce)?;
            if method.kind == MethodKind::Madv {
                // Recomputed from detached features so the orthogonality
                // term only moves the adversary encoders.
                let agg = g.detach(out.aggregated)?;
                let mut hiddens = Vec::with_capacity(adv.encoders.len());
                for enc in &adv.encoders {
                    let z = enc.forward(g, agg)?;
                    hiddens.push(g.relu(z)?);
                }
                let diff = diff_loss(g, &hiddens, h.lambda_diff)?;
                let diff = g.scale(diff, 1.0 / (b * b) as f64)?;
                total = g.add(total, diff)?;
            }
            Ok(total)
        }
        MethodKind::Gr => {
            let out = bound.head.forward(g, &xs)?;
            let ce = ce_soft(g, y, out.probs, weights)?;
            let base = mean_weighted(g, ce, &inp.sample_weights)?;
            let genders = inp.genders("GR")?;
            let positives: Vec<Vec<bool>> =
                (0..b).map(|i| binarize(inp.labels.row_slice(i))).collect();
            let pen = gr_penalty(g, out.probs, &positives, genders, h.tau, h.lambda_gr)?;
            g.add(base, pen)
        }
        MethodKind::Gdro | MethodKind::Gadro => {
            let out = bound.head.forward(g, &xs)?;
            let ce = ce_soft(g, y, out.probs, weights)?;
            let genders = inp.genders("group DRO")?;
            let mut groups = [None, None];
            for gd in Gender::ALL {
                let mask: Vec<bool> = genders.iter().map(|&x| x == gd).collect();
                groups[gd.index()] = masked_mean(g, ce, &mask)?;
            }
            let pooled = g.mean(ce)?;
            let adjusted = method.kind == MethodKind::Gadro;
            let (loss, _) =
                dro_objective(g, groups, pooled, inp.group_sizes, h.lambda_gd, adjusted)?;
            Ok(loss)
        }
        MethodKind::BlindPlusD | MethodKind::BlindMinusD => {
            let out = bound.head.forward(g, &xs)?;
            let ce = ce_soft(g, y, out.probs, weights)?;
            let det = bound.detector.as_ref().ok_or_else(|| missing("detector"))?;
            let agg = g.detach(out.aggregated)?;
            let z = det.forward(g, agg)?;
            let target = inp
                .detector_target
                .as_ref()
                .ok_or_else(|| missing("detector target"))?;
            let kind = if method.kind == MethodKind::BlindPlusD {
                DetectorTarget::Gender
            } else {
                DetectorTarget::HammingAcc
            };
            let (main, det_loss) = blind_weighted_ce(g, ce, z, target, kind, h.gamma, h.lambda_b)?;
            let main = mean_weighted(g, main, &inp.sample_weights)?;
            let det_loss = g.mean(det_loss)?;
            g.add(main, det_loss)
        }
        MethodKind::Lff | MethodKind::Sih => {
            let out_d = bound.head.forward(g, &xs)?;
            let biased = bound
                .biased
                .as_ref()
                .ok_or_else(|| missing("biased head"))?;
            let out_b = biased.forward(g, &xs)?;
            let main = if method.kind == MethodKind::Lff {
                let w = inp
                    .difficulty
                    .as_ref()
                    .ok_or_else(|| missing("LfF difficulty"))?;
                let ce = ce_soft(g, y, out_d.probs, weights)?;
                mean_weighted(g, ce, w)?
            } else {
                let ce = sih_debiased_ce(g, y, out_d.probs, out_b.probs, h.r, weights)?;
                g.mean(ce)?
            };
            let gce = gce_multilabel(g, y, out_b.probs, h.q)?;
            let gce = g.mean(gce)?;
            g.add(main, gce)
        }
        MethodKind::Disent => {
            let dual = bound.dual.as_ref().ok_or_else(|| missing("dual encoder"))?;
            let w = inp
                .difficulty
                .as_ref()
                .ok_or_else(|| missing("DisEnt difficulty"))?;
            let agg = bound.head.aggregate(g, &xs)?;
            let out = dual.forward(g, agg, inp.perm.as_deref())?;
            let ce = ce_soft(g, y, out.debiased_probs, weights)?;
            let main = mean_weighted(g, ce, w)?;
            let gce = gce_multilabel(g, y, out.biased_probs, h.q)?;
            let gce = g.mean(gce)?;
            let mut total = g.add(main, gce)?;
            if let (Some((sd, sb)), Some(perm)) = (out.swapped, inp.perm.as_deref()) {
                let ce_sw = ce_soft(g, y, sd, weights)?;
                let main_sw = mean_weighted(g, ce_sw, w)?;
                let y_sw = g.gather_rows(y, perm)?;
                let gce_sw = gce_multilabel(g, y_sw, sb, h.q)?;
                let gce_sw = g.mean(gce_sw)?;
                total = g.add(total, main_sw)?;
                total = g.add(total, gce_sw)?;
            }
            Ok(total)
        }
        MethodKind::Lvr => {
            let out = bound.head.forward(g, &xs)?;
            let ce = ce_soft(g, y, out.probs, weights)?;
            let base = mean_weighted(g, ce, &inp.sample_weights)?;
            let centers = inp
                .centers
                .as_ref()
                .ok_or_else(|| missing("class centers"))?;
            let reg = lvr_reg(g, centers, out.hidden, y, h.lambda_lvr)?;
            let reg = g.scale(reg, 1.0 / b as f64)?;
            let mut total = g.add(base, reg)?;
            if h.center_loss {
                let lc = lvr_center_ce(g, centers, out.hidden, y, weights)?;
                let lc = g.mean(lc)?;
                total = g.add(total, lc)?;
            }
            Ok(total)
        }
    }
}

/// Per-sample uniform-weight CE of the debiased and biased branches under
/// the current parameters (inputs to the LfF/DisEnt EMA).
pub(crate) fn branch_losses(
    g: &mut Graph,
    bound: &BoundBundle,
    inp: &StepInputs,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let xs = inp
        .layers
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let y = g.constant(inp.labels.clone())?;
    let (pd, pb) = match (&bound.dual, &bound.biased) {
        (Some(dual), _) => {
            let agg = bound.head.aggregate(g, &xs)?;
            let out = dual.forward(g, agg, None)?;
            (out.debiased_probs, out.biased_probs)
        }
        (None, Some(biased)) => {
            let d = bound.head.forward(g, &xs)?.probs;
            (d, biased.forward(g, &xs)?.probs)
        }
        (None, None) => return Err(missing("biased branch")),
    };
    let uniform = ClassBalanceWeights::uniform(inp.labels.cols());
    let ce_d = ce_soft(g, y, pd, &uniform)?;
    let ce_b = ce_soft(g, y, pb, &uniform)?;
    Ok((g.value(ce_d).data().to_vec(), g.value(ce_b).data().to_vec()))
}

/// Hamming accuracy of each row of `pred` against `labels` after `1/C`
/// thresholding, as a `B × 1` column.
pub(crate) fn hamming_targets(pred: &Tensor, labels: &Tensor) -> Tensor {
    let c = labels.cols() as f64;
    let acc: Vec<f64> = (0..labels.rows())
        .map(|i| {
            let p = binarize(pred.row_slice(i));
            let t = binarize(labels.row_slice(i));
            p.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / c
        })
        .collect();
    Tensor::column(&acc)
}

//! Training objectives over soft (distributional) labels.
//!
//! Graph-level losses take a batch of predicted distributions `B × C` and
//! return either a per-sample column `B × 1` or a scalar. Probabilities are
//! clamped to `[PROB_FLOOR, 1]` before `log` or fractional powers.

use log::warn;

use crate::compute::{Graph, Tensor, Var, PROB_FLOOR};
use crate::dataset::Gender;
use crate::error::{Error, Result};
use crate::model::{ClassCenters, DetectorTarget};

/// Per-category weights `(1−β)/(1−β^{n_c})` from effective counts, scaled to
/// mean 1. Categories with no mass get weight 1 and do not enter the mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBalanceWeights {
    weights: Vec<f64>,
    beta: f64,
}

impl ClassBalanceWeights {
    pub fn new(effective_counts: &[f64], beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("beta {beta} outside [0, 1)")));
        }
        if effective_counts
            .iter()
            .any(|&n| !(n >= 0.0 && n.is_finite()))
        {
            return Err(Error::Config(
                "effective counts must be finite and >= 0".into(),
            ));
        }
        let raw: Vec<Option<f64>> = effective_counts
            .iter()
            .map(|&n| (n > 0.0).then(|| (1.0 - beta) / (1.0 - beta.powf(n))))
            .collect();
        let present: Vec<f64> = raw.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let weights = raw.iter().map(|w| w.map_or(1.0, |w| w / mean)).collect();
        Ok(Self { weights, beta })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            weights: vec![1.0; classes],
            beta: 0.0,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

fn safe_log(g: &mut Graph, probs: Var) -> Result<Var> {
    let p = g.clamp(probs, PROB_FLOOR, 1.0)?;
    g.log(p)
}

fn check_pair(g: &Graph, y: Var, probs: Var) -> Result<(usize, usize)> {
    let (ys, ps) = (g.shape(y), g.shape(probs));
    if ys != ps {
        return Err(Error::Shape(format!("labels {ys:?} vs predictions {ps:?}")));
    }
    Ok(ps)
}

/// `Σ_j w_j · y_j · (−log ŷ_j)` per sample.
pub fn ce_soft(g: &mut Graph, y: Var, probs: Var, weights: &ClassBalanceWeights) -> Result<Var> {
    let (_, c) = check_pair(g, y, probs)?;
    if weights.weights.len() != c {
        return Err(Error::Shape(format!(
            "{} class weights for {c} classes",
            weights.weights.len()
        )));
    }
    let lp = safe_log(g, probs)?;
    let w = g.constant(Tensor::row(&weights.weights))?;
    let yw = g.mul(y, w)?;
    let t = g.mul(yw, lp)?;
    let s = g.sum_rows(t)?;
    g.scale(s, -1.0)
}

/// `Σ_j y_j (1 − ŷ_j^q) / q` per sample.
pub fn gce_multilabel(g: &mut Graph, y: Var, probs: Var, q: f64) -> Result<Var> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("GCE q = {q} outside (0, 1]")));
    }
    check_pair(g, y, probs)?;
    let p = g.clamp(probs, PROB_FLOOR, 1.0)?;
    let pq = g.pow(p, q)?;
    let neg = g.scale(pq, -1.0 / q)?;
    let term = g.offset(neg, 1.0 / q)?;
    let t = g.mul(y, term)?;
    g.sum_rows(t)
}

/// `λ · Σ_{i≠j} ||H_iᵀ H_j||_F²` over ordered pairs, where `H_i` holds one
/// sample's hidden vector per column. For a single sample each term is the
/// squared dot product of the two hidden vectors.
pub fn diff_loss(g: &mut Graph, hiddens: &[Var], lambda: f64) -> Result<Var> {
    if hiddens.len() < 2 {
        warn!(
            "diff loss needs at least 2 hidden representations, got {}",
            hiddens.len()
        );
        return g.scalar(0.0);
    }
    let mut total: Option<Var> = None;
    for i in 0..hiddens.len() {
        for j in i + 1..hiddens.len() {
            let tj = g.transpose(hiddens[j])?;
            let m = g.matmul(hiddens[i], tj)?;
            let s = g.squared_l2(m)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
    }
    // Both orders of each pair contribute the same amount.
    g.scale(total.expect("k >= 2"), 2.0 * lambda)
}

/// Relative difficulty `ce_b / (ce_b + ce_d)`.
pub fn lff_weight(ce_b_ema: f64, ce_d_ema: f64) -> f64 {
    ce_b_ema / (ce_b_ema + ce_d_ema + 1e-12)
}

/// Per-sample exponential moving averages of the biased and debiased CE.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaLossTracker {
    alpha: f64,
    values: Vec<Option<[f64; 2]>>,
}

impl EmaLossTracker {
    pub fn new(samples: usize, alpha: f64) -> Self {
        Self {
            alpha,
            values: vec![None; samples],
        }
    }

    /// The first observation initializes the average.
    pub fn update(&mut self, idx: usize, ce_b: f64, ce_d: f64) {
        let a = self.alpha;
        self.values[idx] = Some(match self.values[idx] {
            None => [ce_b, ce_d],
            Some([b, d]) => [a * b + (1.0 - a) * ce_b, a * d + (1.0 - a) * ce_d],
        });
    }

    pub fn ema(&self, idx: usize) -> Option<[f64; 2]> {
        self.values[idx]
    }

    pub fn weight(&self, idx: usize) -> f64 {
        self.values[idx].map_or(0.5, |[b, d]| lff_weight(b, d))
    }
}

/// `Σ_j w_j (1 − ŷ_{B,j})^r · y_j · (−log ŷ_{D,j})` per sample, with the
/// biased prediction detached here.
pub fn sih_debiased_ce(
    g: &mut Graph,
    y: Var,
    probs_d: Var,
    probs_b: Var,
    r: f64,
    weights: &ClassBalanceWeights,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("SiH r = {r} outside [0, 1]")));
    }
    check_pair(g, probs_d, probs_b)?;
    let pb = g.detach(probs_b)?;
    let pb = g.clamp(pb, 0.0, 1.0)?;
    let neg = g.scale(pb, -1.0)?;
    let one_minus = g.offset(neg, 1.0)?;
    let factor = g.pow(one_minus, r)?;
    let yf = g.mul(y, factor)?;
    ce_soft(g, yf, probs_d, weights)
}

/// `λ · (sqrt(mean_j d_tpr_j²) + sqrt(mean_j d_fpr_j²))` over the classes
/// selected by each mask. Inputs are `1 × C` soft rates per gender.
pub fn gap_penalty(
    g: &mut Graph,
    tpr: [Var; 2],
    fpr: [Var; 2],
    masks: [&[bool]; 2],
    lambda: f64,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    for (rates, mask) in [(tpr, masks[0]), (fpr, masks[1])] {
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            continue;
        }
        let d = g.sub(rates[0], rates[1])?;
        let sq = g.mul(d, d)?;
        let m: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 1.0 / n as f64 } else { 0.0 })
            .collect();
        let mv = g.constant(Tensor::row(&m))?;
        let ms = g.mul(sq, mv)?;
        let mean = g.sum(ms)?;
        parts.push(g.pow(mean, 0.5)?);
    }
    let total = match parts.as_slice() {
        [] => return g.scalar(0.0),
        [a] => *a,
        [a, b] => g.add(*a, *b)?,
        _ => unreachable!(),
    };
    g.scale(total, lambda)
}

/// Sigmoid-relaxed TPR/FPR gap penalty. `positives[i][j]` is the binarized
/// reference label. Classes where either gender has no positives (for TPR)
/// or no negatives (for FPR) are left out.
pub fn gr_penalty(
    g: &mut Graph,
    probs: Var,
    positives: &[Vec<bool>],
    genders: &[Gender],
    tau: f64,
    lambda: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Config(format!(
            "GR temperature {tau} must be positive"
        )));
    }
    let (b, c) = g.shape(probs);
    if positives.len() != b || genders.len() != b {
        return Err(Error::Shape(format!(
            "{b} predictions, {} label rows, {} gender tags",
            positives.len(),
            genders.len()
        )));
    }
    if Gender::ALL.iter().any(|gd| !genders.contains(gd)) {
        warn!("GR penalty skipped: batch holds a single gender");
        return g.scalar(0.0);
    }
    let shifted = g.offset(probs, -1.0 / c as f64)?;
    let z = g.scale(shifted, 1.0 / tau)?;
    let s = g.sigmoid(z)?;

    let mut rates = [[None; 2]; 2];
    let mut masks = [vec![true; c], vec![true; c]];
    for (kind, want) in [(0, true), (1, false)] {
        for gd in Gender::ALL {
            let mut count = vec![0usize; c];
            for i in 0..b {
                if genders[i] == gd {
                    for j in 0..c {
                        count[j] += (positives[i][j] == want) as usize;
                    }
                }
            }
            let mut sel = Tensor::zeros(b, c);
            for i in 0..b {
                if genders[i] != gd {
                    continue;
                }
                for j in 0..c {
                    if positives[i][j] == want {
                        sel.set(i, j, 1.0 / count[j] as f64);
                    }
                }
            }
            for j in 0..c {
                if count[j] == 0 {
                    masks[kind][j] = false;
                }
            }
            let sv = g.constant(sel)?;
            let ws = g.mul(s, sv)?;
            rates[kind][gd.index()] = Some(g.sum_cols(ws)?);
        }
    }
    let r = |k: usize, i: usize| rates[k][i].expect("filled");
    gap_penalty(
        g,
        [r(0, 0), r(0, 1)],
        [r(1, 0), r(1, 1)],
        [&masks[0], &masks[1]],
        lambda,
    )
}

/// EMA center update: `c_i ← (1−ω)·(1/B)·Σ_l y_{l,i} h_l + ω·c_i`.
pub fn lvr_center_update(centers: &mut ClassCenters, h: &Tensor, y: &Tensor) -> Result<()> {
    let (b, dim) = h.shape();
    let (cc, cd) = centers.centers.shape();
    if b == 0 || y.rows() != b || y.cols() != cc || cd != dim {
        return Err(Error::Shape(format!(
            "center update with h {:?}, y {:?}, centers {:?}",
            h.shape(),
            y.shape(),
            centers.centers.shape()
        )));
    }
    let w = centers.omega;
    for i in 0..cc {
        for k in 0..dim {
            let mut s = 0.0;
            for l in 0..b {
                s += y.get(l, i) * h.get(l, k);
            }
            let prev = centers.centers.get(i, k);
            centers
                .centers
                .set(i, k, (1.0 - w) * s / b as f64 + w * prev);
        }
    }
    Ok(())
}

/// `||h_l − c_i||²` for every sample and class, `B × C`; centers constant.
pub fn center_sq_distances(g: &mut Graph, h: Var, centers: &Tensor) -> Result<Var> {
    let (_, dim) = g.shape(h);
    if centers.cols() != dim {
        return Err(Error::Shape(format!(
            "embeddings of width {dim}, centers of width {}",
            centers.cols()
        )));
    }
    let norms: Vec<f64> = (0..centers.rows())
        .map(|i| centers.row_slice(i).iter().map(|x| x * x).sum())
        .collect();
    let ct = g.constant(centers.transpose())?;
    let cross = g.matmul(h, ct)?;
    let cross2 = g.scale(cross, -2.0)?;
    let hh = g.mul(h, h)?;
    let hn = g.sum_rows(hh)?;
    let a = g.add(cross2, hn)?;
    let cn = g.constant(Tensor::row(&norms))?;
    g.add(a, cn)
}

/// `λ · Σ_i Σ_l y_{l,i} ||h_l − c_i||²`.
pub fn lvr_reg(g: &mut Graph, centers: &Tensor, h: Var, y: Var, lambda: f64) -> Result<Var> {
    let d = center_sq_distances(g, h, centers)?;
    check_pair(g, y, d)?;
    let t = g.mul(y, d)?;
    let s = g.sum(t)?;
    g.scale(s, lambda)
}

/// Auxiliary loss on center logits `−||h − c_i||²`, per sample.
pub fn lvr_center_ce(
    g: &mut Graph,
    centers: &Tensor,
    h: Var,
    y: Var,
    weights: &ClassBalanceWeights,
) -> Result<Var> {
    let d = center_sq_distances(g, h, centers)?;
    let logits = g.scale(d, -1.0)?;
    let p = g.softmax_rows(logits)?;
    ce_soft(g, y, p, weights)
}

/// Worst-group objective. `group_losses[g]` is the batch mean loss of gender
/// `g` (absent when the batch has none). Returns the objective and the
/// selected group; `pooled` is used on exact ties so the gradient equals the
/// plain batch mean.
pub fn dro_objective(
    g: &mut Graph,
    group_losses: [Option<Var>; 2],
    pooled: Var,
    group_sizes: [f64; 2],
    lambda_gd: f64,
    adjusted: bool,
) -> Result<(Var, Option<Gender>)> {
    if lambda_gd < 0.0 {
        return Err(Error::Config(format!("lambda_GD {lambda_gd} must be >= 0")));
    }
    let adj = |i: usize| {
        if adjusted {
            lambda_gd / group_sizes[i].max(1.0).sqrt()
        } else {
            0.0
        }
    };
    let scores: Vec<Option<f64>> = (0..2)
        .map(|i| group_losses[i].map(|v| g.value(v).item() + adj(i)))
        .collect();
    let pick = match (scores[0], scores[1]) {
        (Some(a), Some(b)) if a == b => {
            let v = g.offset(pooled, adj(0))?;
            return Ok((v, None));
        }
        (Some(a), Some(b)) => {
            if a > b {
                0
            } else {
                1
            }
        }
        (Some(_), None) => {
            warn!(
                "DRO batch holds no {} samples; using the available group",
                Gender::M
            );
            0
        }
        (None, Some(_)) => {
            warn!(
                "DRO batch holds no {} samples; using the available group",
                Gender::F
            );
            1
        }
        (None, None) => return Err(Error::Internal("DRO batch is empty".into())),
    };
    let v = g.offset(group_losses[pick].expect("present"), adj(pick))?;
    Ok((v, Some(Gender::ALL[pick])))
}

/// BLIND losses. The main term is `(1 − p_eff)^γ · ce` where `p_eff` is the
/// detached detector confidence: for a gender detector the probability it
/// assigns to the true gender, for a success detector the predicted success
/// probability. The detector term is `λ_B · BCE(logit, target)`.
pub fn blind_weighted_ce(
    g: &mut Graph,
    ce: Var,
    detector_logits: Var,
    target: &Tensor,
    kind: DetectorTarget,
    gamma: f64,
    lambda_b: f64,
) -> Result<(Var, Var)> {
    if gamma < 0.0 {
        return Err(Error::Config(format!("BLIND gamma {gamma} must be >= 0")));
    }
    let t = g.constant(target.clone())?;
    let bce = g.bce_with_logits(detector_logits, t)?;
    let det = g.scale(bce, lambda_b)?;

    let z = g.detach(detector_logits)?;
    let p = g.sigmoid(z)?;
    let p_eff = match kind {
        DetectorTarget::HammingAcc => p,
        DetectorTarget::Gender => {
            // t·p + (1−t)(1−p) = 1 − t − p + 2tp
            let tp = g.mul(t, p)?;
            let tp2 = g.scale(tp, 2.0)?;
            let a = g.sub(tp2, t)?;
            let b = g.sub(a, p)?;
            g.offset(b, 1.0)?
        }
    };
    let neg = g.scale(p_eff, -1.0)?;
    let one_minus = g.offset(neg, 1.0)?;
    let one_minus = g.clamp(one_minus, 0.0, 1.0)?;
    let w = g.pow(one_minus, gamma)?;
    let main = g.mul(w, ce)?;
    Ok((main, det))
}

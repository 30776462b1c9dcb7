//! Hamming accuracy, macro-F1, equalized-odds gaps and demographic parity.
//!
//! Predictions and references are both binarized with the strict `p > 1/C`
//! rule. Gap metrics are RMS aggregates over classes of absolute
//! between-gender differences.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::dataset::Gender;
use crate::error::{Error, Result};

/// Entry `j` is set iff `probs[j] > 1/C`.
pub fn binarize(probs: &[f64]) -> Vec<bool> {
    let t = 1.0 / probs.len() as f64;
    probs.iter().map(|&p| p > t).collect()
}

fn check_shapes(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<usize> {
    if pred.is_empty() {
        return Err(Error::Validation(
            "metric over an empty set of samples".into(),
        ));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} references",
            pred.len(),
            truth.len()
        )));
    }
    let c = pred[0].len();
    if c == 0 || pred.iter().chain(truth).any(|r| r.len() != c) {
        return Err(Error::Shape("ragged or empty binary label rows".into()));
    }
    Ok(c)
}

/// Fraction of (sample, class) positions where the bits agree.
pub fn hamming_acc(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64> {
    let c = check_shapes(pred, truth)?;
    let agree: usize = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| p.iter().zip(t).filter(|(a, b)| a == b).count())
        .sum();
    Ok(agree as f64 / (pred.len() * c) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
    tn: usize,
}

impl Confusion {
    fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Zero when there are neither true nor predicted positives.
    fn f1(&self) -> f64 {
        self.f1_defined().unwrap_or(0.0)
    }

    fn f1_defined(&self) -> Option<f64> {
        let den = 2 * self.tp + self.fp + self.fn_;
        (den > 0).then(|| 2.0 * self.tp as f64 / den as f64)
    }

    fn tpr(&self) -> Option<f64> {
        let den = self.tp + self.fn_;
        (den > 0).then(|| self.tp as f64 / den as f64)
    }

    fn fpr(&self) -> Option<f64> {
        let den = self.fp + self.tn;
        (den > 0).then(|| self.fp as f64 / den as f64)
    }
}

fn confusions<'a>(
    pred: &'a [Vec<bool>],
    truth: &'a [Vec<bool>],
    c: usize,
    keep: impl Fn(usize) -> bool,
) -> Vec<Confusion> {
    let mut out = vec![Confusion::default(); c];
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if !keep(i) {
            continue;
        }
        for j in 0..c {
            out[j].add(p[j], t[j]);
        }
    }
    out
}

/// Per-class F1 with the zero-division convention (0).
pub fn per_class_f1(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<Vec<f64>> {
    let c = check_shapes(pred, truth)?;
    Ok(confusions(pred, truth, c, |_| true)
        .iter()
        .map(Confusion::f1)
        .collect())
}

pub fn macro_f1(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64> {
    let f1 = per_class_f1(pred, truth)?;
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

/// RMS of the defined entries; 0 when none is defined.
fn rms(gaps: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = gaps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return 0.0;
    }
    (defined.iter().map(|g| g * g).sum::<f64>() / defined.len() as f64).sqrt()
}

/// Equalized-odds gaps with their per-class breakdown. A per-class entry is
/// `None` when the rate is undefined for either gender.
#[derive(Clone, Debug, PartialEq)]
pub struct EoGaps {
    pub tpr_gap: f64,
    pub fpr_gap: f64,
    pub f1_gap: f64,
    pub per_class_tpr: Vec<Option<f64>>,
    pub per_class_fpr: Vec<Option<f64>>,
    pub per_class_f1: Vec<Option<f64>>,
}

fn check_genders(genders: &[Gender], n: usize) -> Result<()> {
    if genders.len() != n {
        return Err(Error::Shape(format!(
            "{} gender tags for {n} samples",
            genders.len()
        )));
    }
    for g in Gender::ALL {
        if !genders.contains(&g) {
            return Err(Error::Validation(format!(
                "gender {g} absent from the evaluation split"
            )));
        }
    }
    Ok(())
}

pub fn eo_gaps(pred: &[Vec<bool>], truth: &[Vec<bool>], genders: &[Gender]) -> Result<EoGaps> {
    let c = check_shapes(pred, truth)?;
    check_genders(genders, pred.len())?;
    let by_g = Gender::ALL.map(|g| confusions(pred, truth, c, |i| genders[i] == g));
    let gap = |rate: fn(&Confusion) -> Option<f64>| -> Vec<Option<f64>> {
        (0..c)
            .map(|j| match (rate(&by_g[0][j]), rate(&by_g[1][j])) {
                (Some(a), Some(b)) => Some((a - b).abs()),
                _ => None,
            })
            .collect()
    };
    let per_class_tpr = gap(Confusion::tpr);
    let per_class_fpr = gap(Confusion::fpr);
    let per_class_f1 = gap(Confusion::f1_defined);
    for (name, v) in [
        ("TPR", &per_class_tpr),
        ("FPR", &per_class_fpr),
        ("F1", &per_class_f1),
    ] {
        let skipped = v.iter().filter(|x| x.is_none()).count();
        if skipped > 0 {
            debug!("{name} gap: {skipped} of {c} classes undefined for a gender, excluded");
        }
    }
    Ok(EoGaps {
        tpr_gap: rms(&per_class_tpr),
        fpr_gap: rms(&per_class_fpr),
        f1_gap: rms(&per_class_f1),
        per_class_tpr,
        per_class_fpr,
        per_class_f1,
    })
}

/// Per class, `max_g |P(pred=1 | g) − P(pred=1)|`.
pub fn per_class_dp(pred: &[Vec<bool>], genders: &[Gender]) -> Result<Vec<f64>> {
    if pred.is_empty() {
        return Err(Error::Validation(
            "metric over an empty set of samples".into(),
        ));
    }
    check_genders(genders, pred.len())?;
    let c = pred[0].len();
    if pred.iter().any(|r| r.len() != c) {
        return Err(Error::Shape("ragged binary label rows".into()));
    }
    let n = pred.len() as f64;
    let n_g = Gender::ALL.map(|g| genders.iter().filter(|&&x| x == g).count() as f64);
    Ok((0..c)
        .map(|j| {
            let mut pos = [0usize; 2];
            for (p, g) in pred.iter().zip(genders) {
                if p[j] {
                    pos[g.index()] += 1;
                }
            }
            let overall = (pos[0] + pos[1]) as f64 / n;
            (0..2)
                .map(|g| (pos[g] as f64 / n_g[g] - overall).abs())
                .fold(0.0, f64::max)
        })
        .collect())
}

/// `sqrt(Σ_j max_g DP(g, j)²)`.
pub fn dp_gap(pred: &[Vec<bool>], genders: &[Gender]) -> Result<f64> {
    let dp = per_class_dp(pred, genders)?;
    Ok(dp.iter().map(|d| d * d).sum::<f64>().sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub f1: Vec<f64>,
    pub tpr_gap: Vec<Option<f64>>,
    pub fpr_gap: Vec<Option<f64>>,
    pub f1_gap: Vec<Option<f64>>,
    pub dp: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f1: f64,
    pub acc: f64,
    pub tpr_gap: f64,
    pub fpr_gap: f64,
    pub f1_gap: f64,
    pub dp_gap: f64,
    pub per_class: PerClass,
}

impl MetricReport {
    /// The six headline scalars in table order.
    pub fn scalars(&self) -> [f64; 6] {
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

/// Every metric for predicted distributions against reference labels.
pub fn evaluate(
    pred_probs: &[Vec<f64>],
    labels: &[&[f64]],
    genders: &[Gender],
) -> Result<MetricReport> {
    let pred: Vec<Vec<bool>> = pred_probs.iter().map(|p| binarize(p)).collect();
    let truth: Vec<Vec<bool>> = labels.iter().map(|y| binarize(y)).collect();
    let f1 = per_class_f1(&pred, &truth)?;
    let eo = eo_gaps(&pred, &truth, genders)?;
    let dp = per_class_dp(&pred, genders)?;
    Ok(MetricReport {
        f1: f1.iter().sum::<f64>() / f1.len() as f64,
        acc: hamming_acc(&pred, &truth)?,
        tpr_gap: eo.tpr_gap,
        fpr_gap: eo.fpr_gap,
        f1_gap: eo.f1_gap,
        dp_gap: dp.iter().map(|d| d * d).sum::<f64>().sqrt(),
        per_class: PerClass {
            f1,
            tpr_gap: eo.per_class_tpr,
            fpr_gap: eo.per_class_fpr,
            f1_gap: eo.per_class_f1,
            dp,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Gender::{F, M};

    fn bits(rows: &[&[u8]]) -> Vec<Vec<bool>> {
        rows.iter()
            .map(|r| r.iter().map(|&b| b == 1).collect())
            .collect()
    }

    #[test]
    fn binarize_is_strict() {
        let mut p = vec![0.125; 8];
        assert!(binarize(&p).iter().all(|b| !b));
        p[0] = 0.2;
        p[1] = 0.05;
        assert_eq!(binarize(&p)[..2], [true, false]);
        assert_eq!(binarize(&[0.7, 0.3]), vec![true, false]);
    }

    #[test]
    fn hamming_examples() {
        let t = bits(&[&[1, 0, 1, 0]]);
        assert_eq!(hamming_acc(&t, &t).unwrap(), 1.0);
        assert_eq!(hamming_acc(&bits(&[&[0, 1, 0, 1]]), &t).unwrap(), 0.0);
        assert_eq!(hamming_acc(&bits(&[&[1, 0, 1, 1]]), &t).unwrap(), 0.75);
        assert!(hamming_acc(&[], &[]).is_err());
    }

    #[test]
    fn macro_f1_examples() {
        let t = bits(&[&[1, 0], &[0, 1]]);
        assert_eq!(macro_f1(&t, &t).unwrap(), 1.0);
        // class 0 never true or predicted -> 0
        let t = bits(&[&[0, 1]]);
        assert_eq!(macro_f1(&t, &t).unwrap(), 0.5);
        // class 0 perfect, class 1: tp=1, fp=1, fn=1 -> 0.5
        let truth = bits(&[&[1, 1], &[0, 1], &[0, 0]]);
        let pred = bits(&[&[1, 1], &[0, 0], &[0, 1]]);
        assert!((macro_f1(&pred, &truth).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_class_tpr_gap() {
        // 5 F positives all hit; 5 M positives, 3 hit.
        let truth = vec![vec![true]; 10];
        let pred: Vec<Vec<bool>> = (0..10).map(|i| vec![i < 5 || i < 8]).collect();
        let genders: Vec<Gender> = (0..10).map(|i| if i < 5 { F } else { M }).collect();
        let eo = eo_gaps(&pred, &truth, &genders).unwrap();
        assert!((eo.tpr_gap - 0.4).abs() < 1e-12);
        // no negatives at all: FPR undefined and excluded
        assert_eq!(eo.per_class_fpr, vec![None]);
        assert_eq!(eo.fpr_gap, 0.0);
    }

    #[test]
    fn rms_example() {
        assert!((rms(&[Some(0.3), Some(0.4)]) - 0.125f64.sqrt()).abs() < 1e-15);
        assert!((rms(&[Some(0.3), None, Some(0.4)]) - 0.125f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dp_examples() {
        // 5 F with 4 positives, 5 M with 1 positive.
        let pred: Vec<Vec<bool>> = (0..10).map(|i| vec![i < 4 || i == 5]).collect();
        let genders: Vec<Gender> = (0..10).map(|i| if i < 5 { F } else { M }).collect();
        assert!((dp_gap(&pred, &genders).unwrap() - 0.3).abs() < 1e-12);

        // class 0: F 0.8 vs M 0.2 -> 0.3; class 1: F 0.9 vs M 0.1 -> 0.4
        let pred: Vec<Vec<bool>> = (0..20)
            .map(|i| {
                let (k, f) = (i % 10, i < 10);
                if f {
                    vec![k < 8, k < 9]
                } else {
                    vec![k < 2, k < 1]
                }
            })
            .collect();
        let genders: Vec<Gender> = (0..20).map(|i| if i < 10 { F } else { M }).collect();
        assert!((dp_gap(&pred, &genders).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_gender_is_an_error() {
        let t = bits(&[&[1, 0], &[0, 1]]);
        assert!(eo_gaps(&t, &t, &[F, F]).is_err());
        assert!(dp_gap(&t, &[M, M]).is_err());
    }
}

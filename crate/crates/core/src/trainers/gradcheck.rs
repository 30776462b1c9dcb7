//! Finite-difference checks of every loss and every method's composite step
//! loss on a fixed 8-sample batch.

use rand::Rng;

use super::{build_loss, MethodKind, MethodSpec, StepInputs};
use crate::compute::{grad_check, Graph, Tensor, Var};
use crate::dataset::Gender;
use crate::error::Result;
use crate::losses::{
    blind_weighted_ce, ce_soft, diff_loss, dro_objective, gce_multilabel, gr_penalty,
    lvr_center_ce, lvr_reg, sih_debiased_ce, ClassBalanceWeights,
};
use crate::metrics::binarize;
use crate::model::{DetectorTarget, ModelBundle, Widths};
use crate::seed::rng_from;

pub const CHECK_BATCH: usize = 8;
pub const CHECK_EPS: f64 = 1e-6;

const LAYERS: usize = 3;
const DIMS: usize = 4;
const CLASSES: usize = 4;
const WIDTHS: Widths = Widths {
    hidden: 6,
    adv_hidden: 5,
    dual_hidden: 3,
};
const GENDERS: [Gender; CHECK_BATCH] = [
    Gender::F,
    Gender::M,
    Gender::F,
    Gender::M,
    Gender::M,
    Gender::F,
    Gender::M,
    Gender::M,
];

/// Worst relative gradient error of one named objective.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub error: f64,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized above")
}

fn distributions(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let raw: Vec<f64> = (0..cols)
            .map(|_| rng.random_range(0.05..1.0_f64).powi(2))
            .collect();
        let s: f64 = raw.iter().sum();
        for (c, v) in raw.iter().enumerate() {
            t.set(r, c, v / s);
        }
    }
    t
}

fn class_weights() -> ClassBalanceWeights {
    ClassBalanceWeights::new(&[40.0, 12.0, 25.0, 7.0], 0.99).expect("valid counts")
}

/// The fixed batch shared by every composite check, with every optional
/// input filled in.
pub fn check_batch(seed: u64) -> StepInputs {
    let mut rng = rng_from(seed);
    let layers = (0..LAYERS)
        .map(|_| uniform(&mut rng, CHECK_BATCH, DIMS, 1.5))
        .collect();
    let labels = distributions(&mut rng, CHECK_BATCH, CLASSES);
    let mut inp = StepInputs::plain(layers, labels);
    inp.sample_weights = Tensor::column(
        &(0..CHECK_BATCH)
            .map(|_| rng.random_range(0.5..2.0))
            .collect::<Vec<_>>(),
    );
    inp.genders = Some(GENDERS.to_vec());
    inp.difficulty = Some(Tensor::column(
        &(0..CHECK_BATCH)
            .map(|_| rng.random_range(0.1..0.9))
            .collect::<Vec<_>>(),
    ));
    inp.perm = Some(vec![3, 0, 7, 1, 6, 2, 5, 4]);
    inp.centers = Some(uniform(&mut rng, CLASSES, WIDTHS.hidden, 0.5));
    inp.group_sizes = [300.0, 700.0];
    inp
}

/// Composite step loss of every method, differentiated with respect to
/// every trainable tensor of its model.
pub fn step_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let weights = class_weights();
    let mut out = Vec::new();
    for kind in MethodKind::ALL {
        let method = MethodSpec::new(kind);
        let layout = method.layout(LAYERS, DIMS, CLASSES, WIDTHS);
        let categories = (0..CLASSES).map(|c| format!("c{c}")).collect();
        let bundle = ModelBundle::new(layout, categories, seed ^ kind.order() as u64)?;
        let mut inp = check_batch(seed);
        inp.detector_target = Some(match kind {
            MethodKind::BlindMinusD => {
                Tensor::column(&[0.75, 0.5, 1.0, 0.25, 0.75, 0.5, 1.0, 0.75])
            }
            _ => Tensor::column(&GENDERS.iter().map(|g| g.target()).collect::<Vec<_>>()),
        });
        let params: Vec<Tensor> = bundle.tensors().into_iter().cloned().collect();
        let error = grad_check(&params, CHECK_EPS, |g, vars| {
            let bound = bundle.structure(vars)?;
            build_loss(g, &bound, &method, &weights, &inp)
        })?;
        out.push(GradCheck {
            name: kind.name().to_string(),
            error,
        });
    }
    Ok(out)
}

type LossFn<'a> = dyn Fn(&mut Graph, Var, Var, Var) -> Result<Var> + 'a;

/// Every standalone loss, differentiated with respect to two logit matrices
/// (debiased and biased branch) fed through a softmax.
pub fn loss_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = rng_from(seed);
    let y = distributions(&mut rng, CHECK_BATCH, CLASSES);
    let logits = uniform(&mut rng, CHECK_BATCH, CLASSES, 2.0);
    let logits_b = uniform(&mut rng, CHECK_BATCH, CLASSES, 2.0);
    let centers = uniform(&mut rng, CLASSES, CLASSES, 0.5);
    let gender_t = Tensor::column(&GENDERS.iter().map(|g| g.target()).collect::<Vec<_>>());
    let success_t = Tensor::column(&[0.75, 0.5, 1.0, 0.25, 0.75, 0.5, 1.0, 0.75]);
    let positives: Vec<Vec<bool>> = (0..CHECK_BATCH).map(|i| binarize(y.row_slice(i))).collect();
    let w = class_weights();

    let dro = |adjusted: bool| {
        move |g: &mut Graph, y: Var, p: Var, _pb: Var| -> Result<Var> {
            let ce = ce_soft(g, y, p, &ClassBalanceWeights::uniform(CLASSES))?;
            let mut groups = [None, None];
            for gd in Gender::ALL {
                let wts: Vec<f64> = GENDERS
                    .iter()
                    .map(|&x| if x == gd { 1.0 } else { 0.0 })
                    .collect();
                let n: f64 = wts.iter().sum();
                let m = g.constant(Tensor::column(
                    &wts.iter().map(|v| v / n).collect::<Vec<_>>(),
                ))?;
                let t = g.mul(ce, m)?;
                groups[gd.index()] = Some(g.sum(t)?);
            }
            let pooled = g.mean(ce)?;
            Ok(dro_objective(g, groups, pooled, [300.0, 700.0], 4.0, adjusted)?.0)
        }
    };
    let blind = |target: Tensor, kind: DetectorTarget| {
        move |g: &mut Graph, y: Var, p: Var, pb: Var| -> Result<Var> {
            let ce = ce_soft(g, y, p, &ClassBalanceWeights::uniform(CLASSES))?;
            let z = g.select_col(pb, 0)?;
            let (m, d) = blind_weighted_ce(g, ce, z, &target, kind, 0.7, 1.0)?;
            g.add(m, d)
        }
    };

    let cases: Vec<(&str, Box<LossFn<'_>>)> = vec![
        ("ce", Box::new(|g, y, p, _| ce_soft(g, y, p, &w))),
        ("gce", Box::new(|g, y, p, _| gce_multilabel(g, y, p, 0.7))),
        (
            "sih",
            Box::new(|g, y, p, pb| sih_debiased_ce(g, y, p, pb, 0.7, &w)),
        ),
        ("diff", Box::new(|g, _, p, pb| diff_loss(g, &[p, pb], 0.2))),
        (
            "gr",
            Box::new(|g, _, p, _| gr_penalty(g, p, &positives, &GENDERS, 0.5, 4.0)),
        ),
        (
            "lvr_reg",
            Box::new(|g, y, p, _| lvr_reg(g, &centers, p, y, 0.1)),
        ),
        (
            "lvr_center",
            Box::new(|g, y, p, _| lvr_center_ce(g, &centers, p, y, &w)),
        ),
        ("gdro", Box::new(dro(false))),
        ("gadro", Box::new(dro(true))),
        (
            "blind_gender",
            Box::new(blind(gender_t, DetectorTarget::Gender)),
        ),
        (
            "blind_success",
            Box::new(blind(success_t, DetectorTarget::HammingAcc)),
        ),
    ];
    let mut out = Vec::new();
    for (name, f) in cases {
        let error = grad_check(&[logits.clone(), logits_b.clone()], CHECK_EPS, |g, v| {
            let yv = g.constant(y.clone())?;
            let p = g.softmax_rows(v[0])?;
            let pb = g.softmax_rows(v[1])?;
            let l = f(g, yv, p, pb)?;
            g.sum(l)
        })?;
        out.push(GradCheck {
            name: name.to_string(),
            error,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_method() {
        let steps = step_checks(0).unwrap();
        assert_eq!(steps.len(), MethodKind::ALL.len());
        for c in steps.iter().chain(&loss_checks(0).unwrap()) {
            assert!(c.error < 1e-4, "{} {}", c.name, c.error);
        }
    }
}

//! Linear gender probe: logistic regression fitted on part of a
//! representation matrix and scored on the rest.

use rand::seq::SliceRandom;

use crate::compute::Tensor;
use crate::dataset::Gender;
use crate::error::{Error, Result};
use crate::seed::rng_from;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Full-batch gradient steps.
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            learning_rate: 0.5,
            l2: 1e-3,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Held-out accuracy of a logistic-regression gender classifier on the rows
/// of `x`. Features are standardized with the fitting rows' statistics.
pub fn gender_probe_accuracy(x: &Tensor, genders: &[Gender], cfg: &ProbeConfig) -> Result<f64> {
    let (n, d) = x.shape();
    if genders.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows, {} gender tags",
            genders.len()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(cfg.seed));
    let n_fit = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 || n_fit == 0 {
        return Err(Error::Validation(
            "gender probe needs at least 2 rows".into(),
        ));
    }
    let (fit, held) = order.split_at(n_fit);

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in fit {
        for (k, m) in mean.iter_mut().enumerate() {
            *m += x.get(i, k) / fit.len() as f64;
        }
    }
    for &i in fit {
        for (k, s) in sd.iter_mut().enumerate() {
            *s += (x.get(i, k) - mean[k]).powi(2) / fit.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let z = |i: usize, k: usize| (x.get(i, k) - mean[k]) / sd[k];

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for &i in fit {
            let s = b + (0..d).map(|k| w[k] * z(i, k)).sum::<f64>();
            let err = sigmoid(s) - genders[i].target();
            for (k, gk) in gw.iter_mut().enumerate() {
                *gk += err * z(i, k);
            }
            gb += err;
        }
        let m = fit.len() as f64;
        for k in 0..d {
            w[k] -= cfg.learning_rate * (gw[k] / m + cfg.l2 * w[k]);
        }
        b -= cfg.learning_rate * gb / m;
    }
    let correct = held
        .iter()
        .filter(|&&i| {
            let s = b + (0..d).map(|k| w[k] * z(i, k)).sum::<f64>();
            (s > 0.0) == (genders[i] == Gender::M)
        })
        .count();
    Ok(correct as f64 / held.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_features_are_probed_perfectly() {
        let genders: Vec<Gender> = (0..100)
            .map(|i| if i % 2 == 0 { Gender::F } else { Gender::M })
            .collect();
        let rows: Vec<Vec<f64>> = genders
            .iter()
            .enumerate()
            .map(|(i, g)| vec![g.target() * 2.0 - 1.0, (i % 7) as f64])
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let acc = gender_probe_accuracy(&x, &genders, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }
}

//! Synthetic stand-in for frozen SSL features.
//!
//! Each sample's layer `l` is
//!
//! ```text
//! x_l = A_e · Σ_j y_j · dir(j, g, l) + b · γ_l · A_g · s_g · u + noise_l
//! dir(j, g, l) = normalize(μ_j + b · γ_l · κ · s_g · ν_j)
//! ```
//!
//! with `s_g = ±1` the gender sign, `u` a gender direction, `ν_j` per-class
//! expression offsets, `b` the bias strength and `γ_l` falling linearly from
//! 1 at the first layer to 0 at the last. The last layer therefore carries
//! no gender information at all, and at `b = 0` no layer does. Noise is half
//! shared across layers, half layer-specific.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, EmotionLabel, FeatureBlock, Gender, RatioSpec, Sample, Split};
use crate::error::{Error, Result};
use crate::seed::rng_from;

const EMOTION_AMPLITUDE: f64 = 1.0;
const NOISE_SCALE: f64 = 1.0;
const SHARED_NOISE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub dims: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Gender ratio applied within every category of every split.
    pub ratio: RatioSpec,
    pub bias_strength: f64,
    #[serde(default)]
    pub label_noise: f64,
    /// Categories whose majority gender is `M` are drawn this many times as
    /// often as `F`-majority ones, so one gender dominates overall.
    #[serde(default = "default_skew")]
    pub category_skew: f64,
    /// Scale of the additive gender direction at full bias.
    #[serde(default = "default_gender_amplitude")]
    pub gender_amplitude: f64,
    /// Scale of the per-gender rotation of class directions at full bias.
    #[serde(default = "default_expression_shift")]
    pub expression_shift: f64,
    pub seed: u64,
}

fn default_layers() -> usize {
    4
}

fn default_skew() -> f64 {
    2.0
}

fn default_gender_amplitude() -> f64 {
    1.5
}

fn default_expression_shift() -> f64 {
    1.0
}

impl SynthConfig {
    /// Alternating majority direction, 4 layers, default skew.
    pub fn new(
        n: usize,
        classes: usize,
        dims: usize,
        ratio: u32,
        bias_strength: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            n,
            classes,
            dims,
            layers: default_layers(),
            ratio: RatioSpec::alternating(ratio, classes)?,
            bias_strength,
            label_noise: 0.0,
            category_skew: default_skew(),
            gender_amplitude: default_gender_amplitude(),
            expression_shift: default_expression_shift(),
            seed,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.n < 10 * self.classes {
            return Err(Error::Config(format!(
                "n = {} is below 10 x classes = {}",
                self.n,
                10 * self.classes
            )));
        }
        if self.dims < self.classes {
            return Err(Error::Config(format!(
                "dims = {} must be at least classes = {}",
                self.dims, self.classes
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::Config(format!(
                "bias_strength {} outside [0, 1]",
                self.bias_strength
            )));
        }
        if !(self.label_noise >= 0.0 && self.label_noise.is_finite()) {
            return Err(Error::Config(format!(
                "label_noise {} must be >= 0",
                self.label_noise
            )));
        }
        if !(self.category_skew > 0.0 && self.category_skew.is_finite()) {
            return Err(Error::Config("category_skew must be positive".into()));
        }
        for (name, v) in [
            ("gender_amplitude", self.gender_amplitude),
            ("expression_shift", self.expression_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        if self.ratio.ratio == 0 || self.ratio.direction.len() != self.classes {
            return Err(Error::Config(
                "ratio spec does not cover every class".into(),
            ));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `count` unit vectors, mutually orthogonal for as many as `d` allows.
fn directions(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut v = normal_vec(rng, d);
        if i < d {
            for b in &out[..i] {
                let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
            }
        }
        normalize(&mut v);
        out.push(v);
    }
    out
}

/// Splits `total` proportionally to `weights` by largest remainder.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

/// Generates a dataset with 70/10/20 splits. Deterministic given the config.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (c_n, d, l_n) = (cfg.classes, cfg.dims, cfg.layers);
    let mut rng = rng_from(cfg.seed);

    let dirs = directions(&mut rng, 2 * c_n + 1, d);
    let class_dirs = &dirs[..c_n];
    let gender_dir = &dirs[c_n];
    let expression = &dirs[c_n + 1..];

    let n_train = (cfg.n as f64 * 0.7).round() as usize;
    let n_dev = (cfg.n as f64 * 0.1).round() as usize;
    let n_test = cfg.n - n_train - n_dev;
    let weights: Vec<f64> = cfg
        .ratio
        .direction
        .iter()
        .map(|g| {
            if *g == Gender::M {
                cfg.category_skew
            } else {
                1.0
            }
        })
        .collect();
    let r = cfg.ratio.ratio as f64;

    let mut plan: Vec<(Split, usize, Gender)> = Vec::with_capacity(cfg.n);
    for (split, total) in [
        (Split::Train, n_train),
        (Split::Dev, n_dev),
        (Split::Test, n_test),
    ] {
        for (c, m) in apportion(total, &weights).into_iter().enumerate() {
            let major = cfg.ratio.direction[c];
            let maj = ((m as f64) * r / (r + 1.0)).round() as usize;
            plan.extend(std::iter::repeat_n((split, c, major), maj));
            plan.extend(std::iter::repeat_n((split, c, major.other()), m - maj));
        }
    }
    plan.shuffle(&mut rng);

    let gamma: Vec<f64> = (0..l_n)
        .map(|l| {
            if l_n == 1 {
                1.0
            } else {
                (l_n - 1 - l) as f64 / (l_n - 1) as f64
            }
        })
        .collect();
    let b = cfg.bias_strength;

    // Per (layer, gender) class directions with the expression shift applied.
    let mut shifted = vec![vec![vec![0.0; d]; c_n]; l_n * 2];
    for l in 0..l_n {
        for g in Gender::ALL {
            let s = if g == Gender::M { 1.0 } else { -1.0 };
            for j in 0..c_n {
                let v = &mut shifted[l * 2 + g.index()][j];
                for k in 0..d {
                    v[k] = class_dirs[j][k]
                        + b * gamma[l] * cfg.expression_shift * s * expression[j][k];
                }
                normalize(v);
            }
        }
    }

    let mut samples = Vec::with_capacity(cfg.n);
    for (i, &(split, c, gender)) in plan.iter().enumerate() {
        let dominant_mass = rng.random_range(0.6..0.9);
        let spread: Vec<f64> = (0..c_n).map(|_| Exp1.sample(&mut rng)).collect();
        let spread_sum: f64 = spread
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != c)
            .map(|(_, v)| v)
            .sum();
        let mut probs: Vec<f64> = (0..c_n)
            .map(|j| {
                if j == c {
                    dominant_mass
                } else {
                    (1.0 - dominant_mass) * spread[j] / spread_sum
                }
            })
            .collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);

        let mut mix = probs.clone();
        if cfg.label_noise > 0.0 {
            for m in mix.iter_mut() {
                *m += cfg.label_noise * rng.random::<f64>();
            }
            let s: f64 = mix.iter().sum();
            mix.iter_mut().for_each(|m| *m /= s);
        }

        let s = if gender == Gender::M { 1.0 } else { -1.0 };
        let shared = normal_vec(&mut rng, d);
        let mut values = Vec::with_capacity(l_n * d);
        for l in 0..l_n {
            let own = normal_vec(&mut rng, d);
            let dirs = &shifted[l * 2 + gender.index()];
            for k in 0..d {
                let emo: f64 = (0..c_n).map(|j| mix[j] * dirs[j][k]).sum();
                let noise = SHARED_NOISE.sqrt() * shared[k] + (1.0 - SHARED_NOISE).sqrt() * own[k];
                let x = EMOTION_AMPLITUDE * emo
                    + b * gamma[l] * cfg.gender_amplitude * s * gender_dir[k]
                    + NOISE_SCALE * noise;
                values.push(x as f32);
            }
        }
        samples.push(Sample {
            id: format!("syn{i:06}"),
            features: FeatureBlock::new(l_n, d, values)?,
            label: EmotionLabel::new(probs)?,
            gender,
            split,
        });
    }
    let categories = (0..c_n).map(|c| format!("emo{c}")).collect();
    Dataset::new(categories, l_n, d, samples)
}

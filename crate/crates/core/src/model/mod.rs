//! Aggregation + two-layer emotion head and the auxiliary heads used by the
//! debiasing strategies.
//!
//! Parameters live in plain [`Tensor`]s owned by a [`ModelBundle`]. To train
//! or evaluate, the bundle is bound into a [`Graph`]: every tensor becomes a
//! leaf in declaration order and the `Bound*` structs hold the matching
//! [`Var`]s.

mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::rng_from;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Hidden widths of the trainable heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Widths {
    pub hidden: usize,
    pub adv_hidden: usize,
    pub dual_hidden: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self {
            hidden: 256,
            adv_hidden: 256,
            dual_hidden: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorTarget {
    Gender,
    HammingAcc,
}

/// Which components a bundle carries and their sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub layers: usize,
    pub dims: usize,
    pub classes: usize,
    pub hidden: usize,
    /// Number of adversaries; 0 for none.
    pub adversaries: usize,
    pub adv_hidden: usize,
    /// Separate biased head trained alongside the main one.
    pub biased_branch: bool,
    pub detector: Option<DetectorTarget>,
    /// Width of each DisEnt encoder; `None` for no dual encoder.
    pub dual_hidden: Option<usize>,
}

impl ModelLayout {
    /// Aggregation + emotion head only.
    pub fn plain(layers: usize, dims: usize, classes: usize, widths: Widths) -> Self {
        Self {
            layers,
            dims,
            classes,
            hidden: widths.hidden,
            adversaries: 0,
            adv_hidden: widths.adv_hidden,
            biased_branch: false,
            detector: None,
            dual_hidden: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dims == 0 || self.hidden == 0 || self.classes < 2 {
            return Err(Error::Config(format!("degenerate model layout {self:?}")));
        }
        if self.adversaries > 0 && self.adv_hidden == 0 {
            return Err(Error::Config("adversary width must be positive".into()));
        }
        if self.dual_hidden == Some(0) {
            return Err(Error::Config("dual encoder width must be positive".into()));
        }
        Ok(())
    }
}

/// `x · w + b` with `w: in × out`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Uniform in `±1/sqrt(in)` for weights and bias.
    pub fn init(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let mut draw = |r, c| {
            let data = (0..r * c)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::from_vec(r, c, data).expect("sized")
        };
        let w = draw(inp, out);
        let b = draw(1, out);
        Self { w, b }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            w: Tensor::zeros(inp, out),
            b: Tensor::zeros(1, out),
        }
    }
}

/// Softmax-weighted layer aggregation followed by `relu(linear1)` and
/// `softmax(linear2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionHead {
    pub layer_weights: Tensor,
    pub linear1: Linear,
    pub linear2: Linear,
}

impl EmotionHead {
    pub fn init(
        rng: &mut ChaCha8Rng,
        layers: usize,
        dims: usize,
        hidden: usize,
        classes: usize,
    ) -> Self {
        Self {
            layer_weights: Tensor::zeros(1, layers),
            linear1: Linear::init(rng, dims, hidden),
            linear2: Linear::init(rng, hidden, classes),
        }
    }
}

/// `k` gender adversaries, each `affine+relu` then `affine → 1 logit`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryStack {
    pub encoders: Vec<Linear>,
    pub heads: Vec<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorHead {
    pub linear: Linear,
    pub target: DetectorTarget,
}

/// Intrinsic and bias encoders with one classifier per side, both reading
/// the concatenation `[z_i, z_b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    pub intrinsic: Linear,
    pub bias: Linear,
    pub debiased: Linear,
    pub biased: Linear,
}

/// Running class centers in embedding space. Statistics, not parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenters {
    pub centers: Tensor,
    pub omega: f64,
}

impl ClassCenters {
    pub fn zeros(classes: usize, dim: usize, omega: f64) -> Self {
        Self {
            centers: Tensor::zeros(classes, dim),
            omega,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub layout: ModelLayout,
    pub categories: Vec<String>,
    pub head: EmotionHead,
    pub biased: Option<EmotionHead>,
    pub adversary: Option<AdversaryStack>,
    pub detector: Option<DetectorHead>,
    pub dual: Option<DualEncoder>,
    pub centers: Option<ClassCenters>,
}

impl ModelBundle {
    /// Fresh parameters drawn from `seed`. With a dual encoder the head's own
    /// linear layers are unused; only its aggregation weights are shared.
    pub fn new(layout: ModelLayout, categories: Vec<String>, seed: u64) -> Result<Self> {
        layout.validate()?;
        if categories.len() != layout.classes {
            return Err(Error::Shape(format!(
                "{} category names for {} classes",
                categories.len(),
                layout.classes
            )));
        }
        let mut rng = rng_from(seed);
        let (l, d, h, c) = (layout.layers, layout.dims, layout.hidden, layout.classes);
        let head = EmotionHead::init(&mut rng, l, d, h, c);
        let biased = layout
            .biased_branch
            .then(|| EmotionHead::init(&mut rng, l, d, h, c));
        let adversary = (layout.adversaries > 0).then(|| {
            let ha = layout.adv_hidden;
            let encoders = (0..layout.adversaries)
                .map(|_| Linear::init(&mut rng, d, ha))
                .collect();
            let heads = (0..layout.adversaries)
                .map(|_| Linear::init(&mut rng, ha, 1))
                .collect();
            AdversaryStack { encoders, heads }
        });
        let detector = layout.detector.map(|target| DetectorHead {
            linear: Linear::init(&mut rng, d, 1),
            target,
        });
        let dual = layout.dual_hidden.map(|hd| DualEncoder {
            intrinsic: Linear::init(&mut rng, d, hd),
            bias: Linear::init(&mut rng, d, hd),
            debiased: Linear::init(&mut rng, 2 * hd, c),
            biased: Linear::init(&mut rng, 2 * hd, c),
        });
        Ok(Self {
            layout,
            categories,
            head,
            biased,
            adversary,
            detector,
            dual,
            centers: None,
        })
    }

    /// Every trainable tensor in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        fn head<'a>(out: &mut Vec<&'a Tensor>, h: &'a EmotionHead) {
            out.push(&h.layer_weights);
            linear(out, &h.linear1);
            linear(out, &h.linear2);
        }
        fn linear<'a>(out: &mut Vec<&'a Tensor>, l: &'a Linear) {
            out.push(&l.w);
            out.push(&l.b);
        }
        let mut out = Vec::new();
        head(&mut out, &self.head);
        if let Some(b) = &self.biased {
            head(&mut out, b);
        }
        if let Some(a) = &self.adversary {
            a.encoders.iter().for_each(|l| linear(&mut out, l));
            a.heads.iter().for_each(|l| linear(&mut out, l));
        }
        if let Some(d) = &self.detector {
            linear(&mut out, &d.linear);
        }
        if let Some(d) = &self.dual {
            for l in [&d.intrinsic, &d.bias, &d.debiased, &d.biased] {
                linear(&mut out, l);
            }
        }
        out
    }

    /// Mutable view of [`ModelBundle::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        fn head<'a>(out: &mut Vec<&'a mut Tensor>, h: &'a mut EmotionHead) {
            out.push(&mut h.layer_weights);
            linear(out, &mut h.linear1);
            linear(out, &mut h.linear2);
        }
        fn linear<'a>(out: &mut Vec<&'a mut Tensor>, l: &'a mut Linear) {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        let mut out = Vec::new();
        head(&mut out, &mut self.head);
        if let Some(b) = &mut self.biased {
            head(&mut out, b);
        }
        if let Some(a) = &mut self.adversary {
            a.encoders.iter_mut().for_each(|l| linear(&mut out, l));
            a.heads.iter_mut().for_each(|l| linear(&mut out, l));
        }
        if let Some(d) = &mut self.detector {
            linear(&mut out, &mut d.linear);
        }
        if let Some(d) = &mut self.dual {
            for l in [
                &mut d.intrinsic,
                &mut d.bias,
                &mut d.debiased,
                &mut d.biased,
            ] {
                linear(&mut out, l);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Adds every tensor to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<(BoundBundle, Vec<Var>)> {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| g.param(t))
            .collect::<Result<Vec<_>>>()?;
        Ok((self.structure(&vars)?, vars))
    }

    /// Maps an already-bound variable list (declaration order) onto the
    /// bundle's structure.
    pub fn structure(&self, vars: &[Var]) -> Result<BoundBundle> {
        let expected = self.tensors().len();
        if vars.len() != expected {
            return Err(Error::Shape(format!(
                "{} variables for {expected} parameter tensors",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = move || it.next().expect("counted above");
        fn linear(next: &mut dyn FnMut() -> Var) -> BoundLinear {
            BoundLinear {
                w: next(),
                b: next(),
            }
        }
        fn head(next: &mut dyn FnMut() -> Var) -> BoundHead {
            BoundHead {
                layer_weights: next(),
                linear1: linear(next),
                linear2: linear(next),
            }
        }
        let main = head(&mut next);
        let biased = self.biased.as_ref().map(|_| head(&mut next));
        let adversary = self.adversary.as_ref().map(|a| {
            let encoders = (0..a.encoders.len()).map(|_| linear(&mut next)).collect();
            let heads = (0..a.heads.len()).map(|_| linear(&mut next)).collect();
            BoundAdversary { encoders, heads }
        });
        let detector = self.detector.as_ref().map(|_| linear(&mut next));
        let dual = self.dual.as_ref().map(|_| BoundDual {
            intrinsic: linear(&mut next),
            bias: linear(&mut next),
            debiased: linear(&mut next),
            biased: linear(&mut next),
        });
        Ok(BoundBundle {
            head: main,
            biased,
            adversary,
            detector,
            dual,
        })
    }

    /// Emotion distributions for a batch given as one `B × D` tensor per
    /// layer. Uses the debiased side of the dual encoder when present.
    pub fn predict(&self, layers: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let (bound, _) = self.bind(&mut g)?;
        let xs = layers
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let probs = match &bound.dual {
            Some(dual) => {
                let agg = bound.head.aggregate(&mut g, &xs)?;
                dual.forward(&mut g, agg, None)?.debiased_probs
            }
            None => bound.head.forward(&mut g, &xs)?.probs,
        };
        Ok(g.value(probs).clone())
    }

    /// Main-head embeddings `h` for a batch.
    pub fn embed(&self, layers: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let (bound, _) = self.bind(&mut g)?;
        let xs = layers
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let h = match &bound.dual {
            Some(dual) => {
                let agg = bound.head.aggregate(&mut g, &xs)?;
                dual.forward(&mut g, agg, None)?.z_i
            }
            None => bound.head.forward(&mut g, &xs)?.hidden,
        };
        Ok(g.value(h).clone())
    }

    /// Aggregated features of the main head, `B × D`.
    pub fn aggregate(&self, layers: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let (bound, _) = self.bind(&mut g)?;
        let xs = layers
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let agg = bound.head.aggregate(&mut g, &xs)?;
        Ok(g.value(agg).clone())
    }

    /// Softmax of the main head's layer weights.
    pub fn aggregation_weights(&self) -> Vec<f64> {
        let w = self.head.layer_weights.data();
        let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = w.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.affine(x, self.w, self.b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    pub layer_weights: Var,
    pub linear1: BoundLinear,
    pub linear2: BoundLinear,
}

/// Intermediate values of one head forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub aggregated: Var,
    pub hidden: Var,
    pub logits: Var,
    pub probs: Var,
}

impl BoundHead {
    /// `Σ_l softmax(w)_l · x_l`.
    pub fn aggregate(&self, g: &mut Graph, layers: &[Var]) -> Result<Var> {
        let (_, l) = g.shape(self.layer_weights);
        if layers.len() != l {
            return Err(Error::Shape(format!(
                "{} feature layers for {l} aggregation weights",
                layers.len()
            )));
        }
        let a = g.softmax_rows(self.layer_weights)?;
        let mut acc: Option<Var> = None;
        for (i, &x) in layers.iter().enumerate() {
            let ai = g.select_col(a, i)?;
            let term = g.mul(x, ai)?;
            acc = Some(match acc {
                None => term,
                Some(s) => g.add(s, term)?,
            });
        }
        Ok(acc.expect("at least one layer"))
    }

    pub fn forward_aggregated(&self, g: &mut Graph, aggregated: Var) -> Result<HeadOutput> {
        let z1 = self.linear1.forward(g, aggregated)?;
        let hidden = g.relu(z1)?;
        let logits = self.linear2.forward(g, hidden)?;
        let probs = g.softmax_rows(logits)?;
        Ok(HeadOutput {
            aggregated,
            hidden,
            logits,
            probs,
        })
    }

    pub fn forward(&self, g: &mut Graph, layers: &[Var]) -> Result<HeadOutput> {
        let aggregated = self.aggregate(g, layers)?;
        self.forward_aggregated(g, aggregated)
    }
}

#[derive(Clone, Debug)]
pub struct BoundAdversary {
    pub encoders: Vec<BoundLinear>,
    pub heads: Vec<BoundLinear>,
}

impl BoundAdversary {
    /// Gender logits (`B × 1` each) and hidden representations `h_{A_i}`.
    /// `h_s` passes through one gradient-reversal node shared by all
    /// adversaries.
    pub fn forward(&self, g: &mut Graph, h_s: Var, lambda: f64) -> Result<(Vec<Var>, Vec<Var>)> {
        let reversed = g.reverse_grad(h_s, lambda)?;
        let mut logits = Vec::with_capacity(self.encoders.len());
        let mut hiddens = Vec::with_capacity(self.encoders.len());
        for (enc, head) in self.encoders.iter().zip(&self.heads) {
            let z = enc.forward(g, reversed)?;
            let h = g.relu(z)?;
            logits.push(head.forward(g, h)?);
            hiddens.push(h);
        }
        Ok((logits, hiddens))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDual {
    pub intrinsic: BoundLinear,
    pub bias: BoundLinear,
    pub debiased: BoundLinear,
    pub biased: BoundLinear,
}

#[derive(Clone, Copy, Debug)]
pub struct DualOutput {
    pub z_i: Var,
    pub z_b: Var,
    pub debiased_probs: Var,
    pub biased_probs: Var,
    /// Predictions on `[z_i, z_b[perm]]` when a permutation was given.
    pub swapped: Option<(Var, Var)>,
}

impl BoundDual {
    /// The debiased classifier sees `[z_i, detach(z_b)]` and the biased one
    /// `[detach(z_i), z_b]`, so each side trains only its own encoder.
    pub fn forward(
        &self,
        g: &mut Graph,
        aggregated: Var,
        perm: Option<&[usize]>,
    ) -> Result<DualOutput> {
        let zi = self.intrinsic.forward(g, aggregated)?;
        let z_i = g.relu(zi)?;
        let zb = self.bias.forward(g, aggregated)?;
        let z_b = g.relu(zb)?;
        let (debiased_probs, biased_probs) = self.heads(g, z_i, z_b)?;
        let swapped = match perm {
            Some(p) => {
                let z_b_sw = g.gather_rows(z_b, p)?;
                Some(self.heads(g, z_i, z_b_sw)?)
            }
            None => None,
        };
        Ok(DualOutput {
            z_i,
            z_b,
            debiased_probs,
            biased_probs,
            swapped,
        })
    }

    fn heads(&self, g: &mut Graph, z_i: Var, z_b: Var) -> Result<(Var, Var)> {
        let zb_d = g.detach(z_b)?;
        let di = g.concat_cols(z_i, zb_d)?;
        let dl = self.debiased.forward(g, di)?;
        let dp = g.softmax_rows(dl)?;
        let zi_d = g.detach(z_i)?;
        let bi = g.concat_cols(zi_d, z_b)?;
        let bl = self.biased.forward(g, bi)?;
        let bp = g.softmax_rows(bl)?;
        Ok((dp, bp))
    }
}

#[derive(Clone, Debug)]
pub struct BoundBundle {
    pub head: BoundHead,
    pub biased: Option<BoundHead>,
    pub adversary: Option<BoundAdversary>,
    pub detector: Option<BoundLinear>,
    pub dual: Option<BoundDual>,
}

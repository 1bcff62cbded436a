//! A miniature decoder-only language model with exact reverse-mode
//! gradients, in 64-bit floats throughout.
//!
//! Architecture (fixed, desk scale): token embeddings plus learned
//! absolute position embeddings, `n_layers` pre-norm blocks (RMSNorm →
//! causal multi-head attention → residual, RMSNorm → SiLU MLP with hidden
//! width `4·d_model` → residual), and a linear output head that is either
//! tied to the embedding table or a separate projection. There is no
//! final normalization, so a zero-layer model is an affine map from
//! embeddings to logits.
//!
//! The embedding lookup is deliberately separated from
//! [`forward_from_embeddings`]: callers may perturb the embedded batch
//! between the two, and gradients treat the perturbation as a constant
//! offset. Forward and backward never touch any RNG.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use forward::{forward_from_embeddings, masked_nll, nll_and_grads, Backprop};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Initialization standard deviation for all weights and embeddings.
pub const INIT_STD: f64 = 0.02;

/// RMSNorm stabilizer.
pub const RMS_EPS: f64 = 1e-6;

/// MLP hidden width as a multiple of `d_model`.
pub const MLP_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    /// Share the output projection with the embedding table.
    #[serde(default = "default_tie")]
    pub tie_output: bool,
}

fn default_tie() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::VocabTooSmall(self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.context_len == 0 {
            return Err(Error::InvalidConfig(
                "d_model, n_heads, and context_len must be >= 1".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::HeadMismatch {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        MLP_MULT * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln1_g: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_g: Array1<f64>,
}

/// Every learnable array, in the declared flattening order used by
/// checkpoints and gradient containers: embedding table, position table,
/// per layer `[wq, wk, wv, wo, ln1_g, w1, b1, w2, b2, ln2_g]`, then the
/// output projection when untied.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub embed: Array2<f64>,
    pub pos: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub out_proj: Option<Array2<f64>>,
}

impl ParamSet {
    fn zeros_like(&self) -> ParamSet {
        let mut z = self.clone();
        z.for_each_mut(|x| *x = 0.0);
        z
    }

    /// Visit every parameter in declared order.
    pub fn for_each(&self, mut f: impl FnMut(f64)) {
        for a in self.arrays() {
            for &x in a {
                f(x);
            }
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for a in self.arrays_mut() {
            for x in a {
                f(x);
            }
        }
    }

    /// Apply `f(target, other)` pairwise over two identically shaped sets.
    pub fn zip_mut(&mut self, other: &ParamSet, mut f: impl FnMut(&mut f64, f64)) {
        let mine = self.arrays_mut();
        let theirs = other.arrays();
        assert_eq!(mine.len(), theirs.len(), "param set shape mismatch");
        for (a, b) in mine.into_iter().zip(theirs) {
            assert_eq!(a.len(), b.len(), "param array shape mismatch");
            for (x, &y) in a.iter_mut().zip(b) {
                f(x, y);
            }
        }
    }

    /// Three-way pairwise visit, used by Adam (params, m, v).
    pub fn zip3_mut(
        &mut self,
        b: &mut ParamSet,
        c: &mut ParamSet,
        mut f: impl FnMut(&mut f64, &mut f64, &mut f64),
    ) {
        let xs = self.arrays_mut();
        let ys = b.arrays_mut();
        let zs = c.arrays_mut();
        for ((x, y), z) in xs.into_iter().zip(ys).zip(zs) {
            for ((xe, ye), ze) in x.iter_mut().zip(y.iter_mut()).zip(z.iter_mut()) {
                f(xe, ye, ze);
            }
        }
    }

    pub fn flat_len(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        self.for_each(|x| out.push(x));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::ShapeMismatch(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut it = flat.iter();
        self.for_each_mut(|x| *x = *it.next().unwrap());
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|x| ok &= x.is_finite());
        ok
    }

    fn arrays(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        v.push(self.embed.as_slice().unwrap());
        v.push(self.pos.as_slice().unwrap());
        for l in &self.layers {
            v.push(l.wq.as_slice().unwrap());
            v.push(l.wk.as_slice().unwrap());
            v.push(l.wv.as_slice().unwrap());
            v.push(l.wo.as_slice().unwrap());
            v.push(l.ln1_g.as_slice().unwrap());
            v.push(l.w1.as_slice().unwrap());
            v.push(l.b1.as_slice().unwrap());
            v.push(l.w2.as_slice().unwrap());
            v.push(l.b2.as_slice().unwrap());
            v.push(l.ln2_g.as_slice().unwrap());
        }
        if let Some(w) = &self.out_proj {
            v.push(w.as_slice().unwrap());
        }
        v
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.push(self.embed.as_slice_mut().unwrap());
        v.push(self.pos.as_slice_mut().unwrap());
        for l in &mut self.layers {
            v.push(l.wq.as_slice_mut().unwrap());
            v.push(l.wk.as_slice_mut().unwrap());
            v.push(l.wv.as_slice_mut().unwrap());
            v.push(l.wo.as_slice_mut().unwrap());
            v.push(l.ln1_g.as_slice_mut().unwrap());
            v.push(l.w1.as_slice_mut().unwrap());
            v.push(l.b1.as_slice_mut().unwrap());
            v.push(l.w2.as_slice_mut().unwrap());
            v.push(l.b2.as_slice_mut().unwrap());
            v.push(l.ln2_g.as_slice_mut().unwrap());
        }
        if let Some(w) = &mut self.out_proj {
            v.push(w.as_slice_mut().unwrap());
        }
        v
    }
}

/// Adam first/second moments plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

/// Parameters and optimizer state of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub moments: Option<AdamMoments>,
}

/// Gradients for every parameter, plus the gradient with respect to the
/// embedded input values (useful for probes; the table gradient already
/// contains its scatter contribution).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ParamSet,
    pub d_embedded: Array3<f64>,
}

/// A batch of embedded sequences. `values` is `B×L×d` with zeroed padding
/// rows, `mask[i, t]` is true exactly for `t < lengths[i]`, and `tokens`
/// keeps the source ids so embedding-table gradients can be scattered
/// without re-passing them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedBatch {
    pub values: Array3<f64>,
    pub lengths: Vec<usize>,
    pub mask: Array2<bool>,
    pub tokens: Array2<usize>,
}

impl EmbeddedBatch {
    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn padded_len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// Stack two batches along the batch axis (used for the symmetric ±
    /// training step). Lengths, masks, and tokens are concatenated.
    pub fn concat_batch(a: &EmbeddedBatch, b: &EmbeddedBatch) -> Result<EmbeddedBatch> {
        if a.padded_len() != b.padded_len() || a.dim() != b.dim() {
            return Err(Error::ShapeMismatch(
                "cannot concatenate embedded batches of different shapes".into(),
            ));
        }
        let values = ndarray::concatenate(ndarray::Axis(0), &[a.values.view(), b.values.view()])
            .expect("checked shapes");
        let mask = ndarray::concatenate(ndarray::Axis(0), &[a.mask.view(), b.mask.view()])
            .expect("checked shapes");
        let tokens = ndarray::concatenate(ndarray::Axis(0), &[a.tokens.view(), b.tokens.view()])
            .expect("checked shapes");
        let mut lengths = a.lengths.clone();
        lengths.extend_from_slice(&b.lengths);
        Ok(EmbeddedBatch {
            values,
            lengths,
            mask,
            tokens,
        })
    }
}

/// Optimizer selection for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptConfig {
    pub kind: OptKind,
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Sgd,
    Adam,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

/// Deterministic random initialization: every weight matrix and embedding
/// entry is drawn i.i.d. `N(0, INIT_STD²)` in declared parameter order
/// from the given stream; biases start at zero and norm gains at one.
pub fn init_model(config: &ModelConfig, rng: RngStream) -> Result<ModelState> {
    config.validate()?;
    let mut r = rng.rng();
    let d = config.d_model;
    let h = config.mlp_hidden();
    let mut gauss = |rows: usize, cols: usize| -> Array2<f64> {
        let v: Vec<f64> = (0..rows * cols)
            .map(|_| {
                let z: f64 = r.sample(StandardNormal);
                INIT_STD * z
            })
            .collect();
        Array2::from_shape_vec((rows, cols), v).expect("shape matches length")
    };

    let embed = gauss(config.vocab_size, d);
    let pos = gauss(config.context_len, d);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            wq: gauss(d, d),
            wk: gauss(d, d),
            wv: gauss(d, d),
            wo: gauss(d, d),
            ln1_g: Array1::ones(d),
            w1: gauss(d, h),
            b1: Array1::zeros(h),
            w2: gauss(h, d),
            b2: Array1::zeros(d),
            ln2_g: Array1::ones(d),
        });
    }
    let out_proj = if config.tie_output {
        None
    } else {
        Some(gauss(d, config.vocab_size))
    };

    Ok(ModelState {
        config: config.clone(),
        params: ParamSet {
            embed,
            pos,
            layers,
            out_proj,
        },
        moments: None,
    })
}

/// Look up token embeddings. Padding positions (at or beyond each
/// sequence's length) become zero vectors.
pub fn embed(state: &ModelState, tokens: &Array2<usize>, lengths: &[usize]) -> Result<EmbeddedBatch> {
    let (b, l) = tokens.dim();
    if lengths.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} lengths for batch of {}",
            lengths.len(),
            b
        )));
    }
    for (i, &len) in lengths.iter().enumerate() {
        if len == 0 || len > l {
            return Err(Error::ShapeMismatch(format!(
                "length {} of sequence {} outside 1..={}",
                len, i, l
            )));
        }
    }
    let d = state.config.d_model;
    let mut values = Array3::zeros((b, l, d));
    let mut mask = Array2::from_elem((b, l), false);
    for i in 0..b {
        for t in 0..lengths[i] {
            let id = tokens[[i, t]];
            if id >= state.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: state.config.vocab_size,
                    batch: i,
                    position: t,
                });
            }
            values
                .slice_mut(ndarray::s![i, t, ..])
                .assign(&state.params.embed.row(id));
            mask[[i, t]] = true;
        }
    }
    Ok(EmbeddedBatch {
        values,
        lengths: lengths.to_vec(),
        mask,
        tokens: tokens.clone(),
    })
}

/// One optimizer update in place. SGD is the bare update rule; Adam keeps
/// bias-corrected moments inside the state. Non-finite gradients are
/// rejected so a diverging run can stop with a report instead of
/// poisoning the parameters.
pub fn optimizer_step(state: &mut ModelState, grads: &Gradients, opt: &OptConfig) -> Result<()> {
    if !grads.params.all_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    match opt.kind {
        OptKind::Sgd => {
            state
                .params
                .zip_mut(&grads.params, |p, g| *p -= opt.lr * g);
        }
        OptKind::Adam => {
            if state.moments.is_none() {
                state.moments = Some(AdamMoments {
                    m: state.params.zeros_like(),
                    v: state.params.zeros_like(),
                    step: 0,
                });
            }
            let ModelState {
                params, moments, ..
            } = state;
            let moments = moments.as_mut().unwrap();
            moments.step += 1;
            let (b1, b2) = opt.betas;
            let bc1 = 1.0 - b1.powi(moments.step as i32);
            let bc2 = 1.0 - b2.powi(moments.step as i32);
            let (lr, eps) = (opt.lr, opt.eps);
            moments
                .m
                .zip_mut(&grads.params, |m, g| *m = b1 * *m + (1.0 - b1) * g);
            moments
                .v
                .zip_mut(&grads.params, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
            params.zip3_mut(&mut moments.m, &mut moments.v, |p, m, v| {
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
    if !state.params.all_finite() {
        return Err(Error::NonFinite("parameters".into()));
    }
    Ok(())
}

/// Greedy decoding: repeatedly append the argmax token (lowest id on
/// ties), stopping after `max_new` tokens, at `eos`, or when the context
/// window is full. Returns prompt plus generated tokens. Inference never
/// touches any noise path.
pub fn generate_greedy(
    state: &ModelState,
    prompt: &[usize],
    max_new: usize,
    eos: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::ShapeMismatch("prompt must be nonempty".into()));
    }
    if prompt.len() > state.config.context_len {
        return Err(Error::ContextOverflow {
            len: prompt.len(),
            context_len: state.config.context_len,
        });
    }
    let mut tokens: Vec<usize> = prompt.to_vec();
    for _ in 0..max_new {
        if tokens.len() >= state.config.context_len {
            break;
        }
        let t = Array2::from_shape_vec((1, tokens.len()), tokens.clone()).unwrap();
        let embedded = embed(state, &t, &[tokens.len()])?;
        let logits = forward_from_embeddings(state, &embedded)?;
        let last = logits.index_axis(ndarray::Axis(0), 0);
        let row = last.index_axis(ndarray::Axis(0), tokens.len() - 1);
        let mut best = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for (id, &v) in row.iter().enumerate() {
            if v > best_val {
                best_val = v;
                best = id;
            }
        }
        tokens.push(best);
        if Some(best) == eos {
            break;
        }
    }
    Ok(tokens)
}

//! Embedding-noise sampling and application.
//!
//! Three raw distributions are supported: uniform on [-1, 1], standard
//! normal, and the symmetric sign distribution (±1 with probability ½
//! each). A perturbation scales the raw draw by `α/√(Lᵢ·d)` per sequence
//! — `Lᵢ` the true (unpadded) length — optionally divided by √3 so that
//! normal and sign noise match the expected L2 norm of uniform noise at
//! the same `α`. The symmetric variant applies one sign draw with both
//! polarities, producing a `plus`/`minus` pair around the base embedding.

use crate::error::{Error, Result};
use crate::numerics::l2_norm;
use crate::rng::RngStream;
use crate::tinylm::EmbeddedBatch;
use ndarray::{Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const SQRT_3: f64 = 1.732050807568877293527446341505872367_f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    Uniform,
    Gaussian,
    Bernoulli,
    Symnoise,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Uniform => "uniform",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Bernoulli => "bernoulli",
            NoiseKind::Symnoise => "symnoise",
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "uniform" => Ok(NoiseKind::Uniform),
            "gaussian" => Ok(NoiseKind::Gaussian),
            "bernoulli" => Ok(NoiseKind::Bernoulli),
            "symnoise" => Ok(NoiseKind::Symnoise),
            other => Err(Error::InvalidConfig(format!("unknown noise kind `{other}`"))),
        }
    }
}

/// Which distribution, base scale α, and scaling rule govern embedding
/// perturbation. `symnoise` always carries the √3 correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub alpha: f64,
    /// Divide the Gaussian scale by √3 (matches uniform norms).
    #[serde(default = "default_true")]
    pub gaussian_sqrt3: bool,
    /// Divide the sign-noise scale by √3. Plain `bernoulli` defaults to
    /// no correction; `symnoise` forces it on.
    #[serde(default)]
    pub bernoulli_sqrt3: bool,
}

fn default_true() -> bool {
    true
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, alpha: f64) -> Result<Self> {
        let spec = NoiseSpec {
            kind,
            alpha,
            gaussian_sqrt3: true,
            bernoulli_sqrt3: kind == NoiseKind::Symnoise,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none() -> Self {
        NoiseSpec {
            kind: NoiseKind::None,
            alpha: 0.0,
            gaussian_sqrt3: true,
            bernoulli_sqrt3: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.kind == NoiseKind::Symnoise && !self.bernoulli_sqrt3 {
            return Err(Error::InvalidConfig(
                "symnoise requires bernoulli_sqrt3 = true".into(),
            ));
        }
        Ok(())
    }

    /// Normalize user input: symnoise implies the √3 correction.
    pub fn normalized(mut self) -> Self {
        if self.kind == NoiseKind::Symnoise {
            self.bernoulli_sqrt3 = true;
        }
        self
    }
}

/// A perturbed embedding batch. `minus` is present exactly for symmetric
/// noise and mirrors `plus` through the base values; `applied_scale[i]`
/// is the per-sequence scale factor that multiplied the raw draw.
#[derive(Debug, Clone)]
pub struct PerturbedBatch {
    pub plus: EmbeddedBatch,
    pub minus: Option<EmbeddedBatch>,
    pub applied_scale: Vec<f64>,
}

/// Sample a raw `B×L×d` noise tensor. Entries are filled in row-major
/// order from the stream, so a given `(kind, shape, stream)` triple is
/// bit-reproducible.
pub fn sample_raw(kind: NoiseKind, shape: (usize, usize, usize), rng: RngStream) -> Result<Array3<f64>> {
    let (b, l, d) = shape;
    if b == 0 || l == 0 || d == 0 {
        return Err(Error::EmptyShape(shape));
    }
    let n = b * l * d;
    let mut r = rng.rng();
    let v: Vec<f64> = match kind {
        NoiseKind::Uniform => (0..n).map(|_| 2.0 * r.gen::<f64>() - 1.0).collect(),
        NoiseKind::Gaussian => (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect(),
        NoiseKind::Bernoulli => (0..n)
            .map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 })
            .collect(),
        NoiseKind::None | NoiseKind::Symnoise => {
            return Err(Error::InvalidConfig(format!(
                "sample_raw takes a raw distribution, not `{kind}`"
            )))
        }
    };
    Ok(Array3::from_shape_vec(shape, v).expect("shape matches length"))
}

/// The sequence-level scale factor: `α/√(Lᵢ·d)`, divided by √3 when the
/// spec's correction applies to its distribution.
pub fn per_sequence_scale(alpha: f64, len_i: usize, d: usize, spec: &NoiseSpec) -> f64 {
    debug_assert!(len_i >= 1 && d >= 1);
    let base = alpha / ((len_i * d) as f64).sqrt();
    let corrected = match spec.kind {
        NoiseKind::Gaussian if spec.gaussian_sqrt3 => base / SQRT_3,
        NoiseKind::Bernoulli | NoiseKind::Symnoise if spec.bernoulli_sqrt3 => base / SQRT_3,
        _ => base,
    };
    corrected
}

/// Closed-form `√(E[‖P‖²])` of a raw d-dimensional draw: `√(d/3)` for
/// uniform, `√d` for normal and sign noise. (For small d this differs
/// from `E[‖P‖]` — the Jensen gap — which `normlab` measures.)
pub fn expected_norm(kind: NoiseKind, d: usize) -> Result<f64> {
    debug_assert!(d >= 1);
    match kind {
        NoiseKind::Uniform => Ok((d as f64 / 3.0).sqrt()),
        NoiseKind::Gaussian | NoiseKind::Bernoulli => Ok((d as f64).sqrt()),
        NoiseKind::None | NoiseKind::Symnoise => Err(Error::NoClosedForm(kind.as_str().into())),
    }
}

/// Find a double `x` whose floating-point difference from `base` is
/// exactly `target`, walking ulp by ulp from the obvious seed. Returns
/// `None` when `target` is unreachable: if `x` lives in a binade coarser
/// than `target`'s, the realized difference moves in steps of several
/// target-ulps and can jump over it.
fn find_with_exact_diff(base: f64, target: f64) -> Option<f64> {
    let mut x = base + target;
    for _ in 0..128 {
        let realized = x - base;
        if realized == target {
            return Some(x);
        }
        let next = if realized > target {
            next_toward_neg_inf(x)
        } else {
            next_toward_pos_inf(x)
        };
        let next_realized = next - base;
        // jumped over the target without landing on it: parity-blocked
        if (realized > target) != (next_realized > target) && next_realized != target {
            return None;
        }
        x = next;
    }
    None
}

/// `plus[e] - base[e]` and `minus[e] - base[e]` must be exact negations
/// of each other *as computed in floating point*, because the symmetric
/// training step relies on the two halves seeing the same draw. Adding
/// `+n` and `-n` independently rounds asymmetrically, so the pair is
/// constructed to cancel bitwise: starting from the realized difference
/// `d = fl(fl(base + noise) - base)`, search nearby candidates for a `d`
/// where both `+d` and `-d` are realizable differences from `base`. A
/// candidate can be blocked by rounding parity when one side's result
/// binade is coarser than `d`'s, so candidates step by the coarsest ulp
/// involved, escalating if needed. In the common case — base and noise in
/// nearby binades, away from ties — the first candidate succeeds with no
/// extra work; fallbacks move the applied noise by a few ulps at most.
fn mirror_pair(base: f64, noise: f64) -> (f64, f64) {
    let seed = (base + noise) - base;
    if seed == 0.0 {
        // sub-ulp noise (or none) cannot move this entry at all
        return (base, base);
    }
    // candidate steps from the difference's own ulp up to a couple of
    // ulps at the base's magnitude, doubling each escalation
    let mut delta = crate::numerics::ulp_of(seed);
    let ceiling = 8.0 * crate::numerics::ulp_of(seed.abs().max(base.abs()));
    loop {
        for k in 0..11i64 {
            // candidate order: seed, +1, -1, +2, -2, ... steps of delta
            let steps = (k + 1) / 2;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            let d = seed + sign * steps as f64 * delta;
            if d == 0.0 || (k > 0 && d == seed) {
                continue;
            }
            if let (Some(plus), Some(minus)) = (
                find_with_exact_diff(base, d),
                find_with_exact_diff(base, -d),
            ) {
                return (plus, minus);
            }
        }
        assert!(
            delta <= ceiling,
            "no exactly-cancelling perturbation pair near {base} ± {noise}"
        );
        delta *= 2.0;
    }
}

fn next_toward_pos_inf(x: f64) -> f64 {
    if x == 0.0 {
        f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}

fn next_toward_neg_inf(x: f64) -> f64 {
    if x == 0.0 {
        -f64::from_bits(1)
    } else if x < 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        f64::from_bits(x.to_bits() - 1)
    }
}

/// Apply scaled noise to an embedded batch. Noise covers real token
/// positions only (padding stays untouched); each sequence gets its own
/// scale from [`per_sequence_scale`]. For `symnoise` the same sign draw
/// is applied with both polarities and `minus` is populated.
pub fn perturb(base: &EmbeddedBatch, spec: &NoiseSpec, rng: RngStream) -> Result<PerturbedBatch> {
    spec.validate()?;
    let (b, l, d) = base.values.dim();
    if spec.kind == NoiseKind::None {
        return Ok(PerturbedBatch {
            plus: base.clone(),
            minus: None,
            applied_scale: vec![0.0; b],
        });
    }
    let raw_kind = match spec.kind {
        NoiseKind::Uniform => NoiseKind::Uniform,
        NoiseKind::Gaussian => NoiseKind::Gaussian,
        NoiseKind::Bernoulli | NoiseKind::Symnoise => NoiseKind::Bernoulli,
        NoiseKind::None => unreachable!(),
    };
    let raw = sample_raw(raw_kind, (b, l, d), rng)?;
    let symmetric = spec.kind == NoiseKind::Symnoise;

    let mut plus = base.clone();
    let mut minus = if symmetric { Some(base.clone()) } else { None };
    let mut applied_scale = Vec::with_capacity(b);
    for i in 0..b {
        let scale = per_sequence_scale(spec.alpha, base.lengths[i], d, spec);
        applied_scale.push(scale);
        for t in 0..base.lengths[i] {
            for j in 0..d {
                let bv = base.values[[i, t, j]];
                let n = scale * raw[[i, t, j]];
                if let Some(m) = minus.as_mut() {
                    let (p, mv) = mirror_pair(bv, n);
                    plus.values[[i, t, j]] = p;
                    m.values[[i, t, j]] = mv;
                } else {
                    plus.values[[i, t, j]] = bv + n;
                }
            }
        }
    }
    Ok(PerturbedBatch {
        plus,
        minus,
        applied_scale,
    })
}

/// L2 norm of the realized per-sequence perturbation, `‖plus_i − base_i‖`
/// over real token positions. Used by training diagnostics.
pub fn applied_noise_norms(base: &EmbeddedBatch, perturbed: &PerturbedBatch) -> Vec<f64> {
    let (b, _, d) = base.values.dim();
    (0..b)
        .map(|i| {
            let len = base.lengths[i];
            let p = perturbed.plus.values.index_axis(Axis(0), i);
            let o = base.values.index_axis(Axis(0), i);
            l2_norm(
                (0..len).flat_map(|t| (0..d).map(move |j| p[[t, j]] - o[[t, j]])),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ulp_distance, ulp_of};
    use crate::tinylm::{embed, init_model, ModelConfig};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn stream(seed: u64) -> RngStream {
        RngStream::from_seed(seed)
    }

    fn toy_batch(b: usize, l: usize, d: usize, lengths: &[usize], seed: u64) -> EmbeddedBatch {
        let config = ModelConfig {
            vocab_size: 16,
            d_model: d,
            n_layers: 0,
            n_heads: 1,
            context_len: l,
            tie_output: true,
        };
        let state = init_model(&config, stream(seed)).unwrap();
        let tokens = Array2::from_shape_fn((b, l), |(i, t)| (i * 3 + t) % 16);
        embed(&state, &tokens, lengths).unwrap()
    }

    #[test]
    fn bernoulli_support() {
        let t = sample_raw(NoiseKind::Bernoulli, (1, 2, 2), stream(7)).unwrap();
        assert!(t.iter().all(|&x| x == 1.0 || x == -1.0));
    }

    #[test]
    fn uniform_support() {
        let t = sample_raw(NoiseKind::Uniform, (1, 1, 4), stream(7)).unwrap();
        assert!(t.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn sampling_is_deterministic() {
        for kind in [NoiseKind::Uniform, NoiseKind::Gaussian, NoiseKind::Bernoulli] {
            let a = sample_raw(kind, (2, 3, 4), stream(11)).unwrap();
            let b = sample_raw(kind, (2, 3, 4), stream(11)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_shape_rejected() {
        let err = sample_raw(NoiseKind::Uniform, (1, 0, 4), stream(1)).unwrap_err();
        assert!(err.to_string().contains("empty shape"));
    }

    #[test]
    fn sign_entries_square_to_one() {
        let t = sample_raw(NoiseKind::Bernoulli, (4, 8, 16), stream(3)).unwrap();
        assert!(t.iter().all(|&x| x * x == 1.0));
    }

    #[test]
    fn sign_mean_is_centered() {
        // 10^6 draws; the mean must sit within the 4-sigma band 0.004.
        let t = sample_raw(NoiseKind::Bernoulli, (100, 100, 100), stream(5)).unwrap();
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        assert!(
            mean.abs() <= 0.004,
            "sign-noise mean {mean} outside [-0.004, 0.004]"
        );
    }

    #[test]
    fn scale_matches_direct_evaluation() {
        let uniform = NoiseSpec::new(NoiseKind::Uniform, 5.0).unwrap();
        assert_eq!(per_sequence_scale(5.0, 100, 4096, &uniform), 0.0078125);

        let sym = NoiseSpec::new(NoiseKind::Symnoise, 5.0).unwrap();
        let got = per_sequence_scale(5.0, 100, 4096, &sym);
        assert_eq!(got, 0.0078125 / SQRT_3);
        assert!((got - 0.0045105).abs() < 1e-7);

        let any = NoiseSpec::new(NoiseKind::Gaussian, 0.0).unwrap();
        assert_eq!(per_sequence_scale(0.0, 17, 33, &any), 0.0);
    }

    #[test]
    fn expected_norm_closed_forms() {
        assert_eq!(expected_norm(NoiseKind::Uniform, 3).unwrap(), 1.0);
        assert_eq!(expected_norm(NoiseKind::Gaussian, 4).unwrap(), 2.0);
        assert_eq!(expected_norm(NoiseKind::Bernoulli, 9).unwrap(), 3.0);
        assert!(expected_norm(NoiseKind::None, 3).is_err());
        assert!(expected_norm(NoiseKind::Symnoise, 3).is_err());
    }

    #[test]
    fn none_is_identity() {
        let base = toy_batch(2, 5, 4, &[3, 5], 1);
        let p = perturb(&base, &NoiseSpec::none(), stream(2)).unwrap();
        assert_eq!(p.plus.values, base.values);
        assert!(p.minus.is_none());
        assert_eq!(p.applied_scale, vec![0.0, 0.0]);
    }

    #[test]
    fn perturb_is_deterministic() {
        let base = toy_batch(2, 6, 8, &[6, 4], 1);
        let spec = NoiseSpec::new(NoiseKind::Symnoise, 5.0).unwrap();
        let a = perturb(&base, &spec, stream(9)).unwrap();
        let b = perturb(&base, &spec, stream(9)).unwrap();
        assert_eq!(a.plus.values, b.plus.values);
        assert_eq!(
            a.minus.as_ref().unwrap().values,
            b.minus.as_ref().unwrap().values
        );
    }

    #[test]
    fn noise_zero_at_padding() {
        let base = toy_batch(3, 7, 4, &[2, 7, 5], 4);
        for kind in [NoiseKind::Uniform, NoiseKind::Gaussian, NoiseKind::Symnoise] {
            let spec = NoiseSpec::new(kind, 5.0).unwrap();
            let p = perturb(&base, &spec, stream(8)).unwrap();
            for i in 0..3 {
                for t in base.lengths[i]..7 {
                    for j in 0..4 {
                        assert_eq!(p.plus.values[[i, t, j]], base.values[[i, t, j]]);
                        if let Some(m) = &p.minus {
                            assert_eq!(m.values[[i, t, j]], base.values[[i, t, j]]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_pair_cancels_exactly() {
        let base = toy_batch(4, 9, 16, &[9, 3, 7, 1], 6);
        let spec = NoiseSpec::new(NoiseKind::Symnoise, 5.0).unwrap();
        let p = perturb(&base, &spec, stream(10)).unwrap();
        let minus = p.minus.as_ref().unwrap();
        for ((i, t, j), &b) in base.values.indexed_iter() {
            let up = p.plus.values[[i, t, j]] - b;
            let down = minus.values[[i, t, j]] - b;
            assert_eq!(up + down, 0.0, "residual at ({i},{t},{j})");
            assert_eq!(up, -down);
        }
    }

    #[test]
    fn symnoise_norm_is_alpha_over_sqrt3() {
        let alpha = 5.0;
        let base = toy_batch(3, 12, 16, &[12, 5, 9], 2);
        let spec = NoiseSpec::new(NoiseKind::Symnoise, alpha).unwrap();
        let p = perturb(&base, &spec, stream(3)).unwrap();
        let norms = applied_noise_norms(&base, &p);
        let want = alpha / SQRT_3;
        for (i, n) in norms.iter().enumerate() {
            assert!(
                ulp_distance(*n, want) <= 8.0,
                "norm {} of sequence {} is {} ulp from {}",
                n,
                i,
                ulp_distance(*n, want),
                want
            );
        }
    }

    #[test]
    fn symnoise_spec_requires_sqrt3() {
        let bad = NoiseSpec {
            kind: NoiseKind::Symnoise,
            alpha: 1.0,
            gaussian_sqrt3: true,
            bernoulli_sqrt3: false,
        };
        assert!(bad.validate().is_err());
        assert!(bad.normalized().validate().is_ok());
    }

    #[test]
    fn mirror_stress_mixed_scales() {
        // adversarial magnitude ratios, including binade boundaries and ties
        let mut r = stream(123).rng();
        for _ in 0..5_000_000 {
            let b_exp: i32 = r.gen_range(-20..8);
            let n_exp: i32 = r.gen_range(-20..8);
            let b = (r.gen::<f64>() - 0.5) * 2f64.powi(b_exp);
            let n = (r.gen::<f64>() - 0.5) * 2f64.powi(n_exp);
            let (plus, minus) = mirror_pair(b, n);
            assert_eq!((plus - b) + (minus - b), 0.0, "b={b:e} n={n:e}");
        }
    }

    proptest! {
        /// The mirror construction must cancel exactly for any base/noise
        /// magnitudes that can actually meet in an embedding tensor.
        #[test]
        fn mirror_cancels(base in -1e6f64..1e6, noise in prop::sample::select(vec![1e-9f64, 1e-6, 1e-3, 0.03, 1.0, 17.0]), sign in any::<bool>()) {
            let n = if sign { noise } else { -noise };
            let (plus, minus) = mirror_pair(base, n);
            let up = plus - base;
            let down = minus - base;
            prop_assert_eq!(up + down, 0.0);
            // both sides stay within a few ulp of the ideal base ± n
            let scale = base.abs().max(n.abs());
            prop_assert!((plus - (base + n)).abs() <= 4.0 * ulp_of(scale));
            prop_assert!((minus - (base - n)).abs() <= 4.0 * ulp_of(scale));
        }
    }
}

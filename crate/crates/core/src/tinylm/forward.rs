//! Forward pass and exact reverse-mode backward pass.
//!
//! Sequences are processed one at a time with dense `L×L` attention;
//! reductions happen in a fixed order, so results are identical across
//! runs and thread counts. The backward pass is hand-derived per
//! operation and is validated against central finite differences in the
//! test suite.

use super::{EmbeddedBatch, Error, Gradients, ModelState, ParamSet, Result, RMS_EPS};
use ndarray::{s, Array1, Array2, Array3, Axis};

/// Loss and gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub loss: f64,
    pub grads: Gradients,
}

struct LayerCache {
    /// Block input (residual stream before attention).
    x: Array2<f64>,
    /// RMSNorm 1 output and inverse rms per row.
    a: Array2<f64>,
    rinv1: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per-head attention probabilities (masked entries are zero).
    probs: Vec<Array2<f64>>,
    /// Concatenated per-head context vectors, before the output projection.
    ctx: Array2<f64>,
    /// Residual stream after attention.
    x2: Array2<f64>,
    /// RMSNorm 2 output and inverse rms per row.
    b: Array2<f64>,
    rinv2: Array1<f64>,
    /// MLP pre-activation.
    m1: Array2<f64>,
    /// MLP activation output.
    s: Array2<f64>,
}

struct SeqCache {
    layers: Vec<LayerCache>,
    /// Final hidden states feeding the output head.
    h: Array2<f64>,
}

fn rmsnorm(x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let (l, d) = x.dim();
    let mut out = Array2::zeros((l, d));
    let mut rinv = Array1::zeros(l);
    for t in 0..l {
        let row = x.row(t);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        rinv[t] = r;
        for j in 0..d {
            out[[t, j]] = gain[j] * row[j] * r;
        }
    }
    (out, rinv)
}

/// dL/dx and gain-gradient accumulation for `y = gain ⊙ x · rinv`.
fn rmsnorm_backward(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    rinv: &Array1<f64>,
    dy: &Array2<f64>,
    dgain: &mut Array1<f64>,
) -> Array2<f64> {
    let (l, d) = x.dim();
    let mut dx = Array2::zeros((l, d));
    for t in 0..l {
        let r = rinv[t];
        let mut inner = 0.0;
        for j in 0..d {
            let gdy = gain[j] * dy[[t, j]];
            inner += gdy * x[[t, j]];
            dgain[j] += dy[[t, j]] * x[[t, j]] * r;
        }
        let scale = inner * r.powi(3) / d as f64;
        for j in 0..d {
            dx[[t, j]] = gain[j] * dy[[t, j]] * r - x[[t, j]] * scale;
        }
    }
    dx
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Run one sequence through all blocks, recording every intermediate
/// needed by the backward pass.
fn forward_seq(state: &ModelState, h0: &Array2<f64>, len: usize) -> SeqCache {
    let cfg = &state.config;
    let (l, d) = h0.dim();
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = h0.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &state.params.layers {
        let (a, rinv1) = rmsnorm(&x, &lp.ln1_g);
        let q = a.dot(&lp.wq);
        let k = a.dot(&lp.wk);
        let v = a.dot(&lp.wv);

        let mut probs = Vec::with_capacity(n_heads);
        let mut ctx = Array2::zeros((l, d));
        for h in 0..n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut p = Array2::zeros((l, l));
            for t in 0..l {
                // causal + padding mask: keys strictly after the query or
                // at padding positions are excluded
                let limit = (t + 1).min(len.max(1));
                let mut maxv = f64::NEG_INFINITY;
                let mut scores = vec![0.0; limit];
                for (u, sc) in scores.iter_mut().enumerate() {
                    *sc = qh.row(t).dot(&kh.row(u)) * scale;
                    if *sc > maxv {
                        maxv = *sc;
                    }
                }
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - maxv).exp();
                    z += *sc;
                }
                for (u, sc) in scores.iter().enumerate() {
                    p[[t, u]] = sc / z;
                }
            }
            let ctx_h = p.dot(&vh);
            ctx.slice_mut(cols).assign(&ctx_h);
            probs.push(p);
        }
        let o = ctx.dot(&lp.wo);
        let x2 = &x + &o;

        let (b, rinv2) = rmsnorm(&x2, &lp.ln2_g);
        let m1 = b.dot(&lp.w1) + &lp.b1;
        let s_act = m1.mapv(silu);
        let m2 = s_act.dot(&lp.w2) + &lp.b2;
        let x3 = &x2 + &m2;

        layers.push(LayerCache {
            x,
            a,
            rinv1,
            q,
            k,
            v,
            probs,
            ctx,
            x2,
            b,
            rinv2,
            m1,
            s: s_act,
        });
        x = x3;
    }
    SeqCache { layers, h: x }
}

fn seq_logits(state: &ModelState, h: &Array2<f64>) -> Array2<f64> {
    match &state.params.out_proj {
        Some(w) => h.dot(w),
        None => h.dot(&state.params.embed.t()),
    }
}

/// Causal forward pass from already-embedded inputs to logits
/// (`B×L×vocab`). Position embeddings are added here, as the first step
/// after the lookup, so embedding perturbations see the raw table values.
pub fn forward_from_embeddings(state: &ModelState, emb: &EmbeddedBatch) -> Result<Array3<f64>> {
    let (bsz, l, d) = emb.values.dim();
    if d != state.config.d_model {
        return Err(Error::ShapeMismatch(format!(
            "embedded dim {} != d_model {}",
            d, state.config.d_model
        )));
    }
    if l > state.config.context_len {
        return Err(Error::ContextOverflow {
            len: l,
            context_len: state.config.context_len,
        });
    }
    let mut logits = Array3::zeros((bsz, l, state.config.vocab_size));
    for i in 0..bsz {
        let h0 = &emb.values.index_axis(Axis(0), i).to_owned()
            + &state.params.pos.slice(s![0..l, ..]);
        let cache = forward_seq(state, &h0, emb.lengths[i]);
        logits
            .index_axis_mut(Axis(0), i)
            .assign(&seq_logits(state, &cache.h));
    }
    Ok(logits)
}

fn check_masks(emb: &EmbeddedBatch, loss_mask: &Array2<bool>) -> Result<usize> {
    let (bsz, l) = loss_mask.dim();
    if (bsz, l) != emb.mask.dim() {
        return Err(Error::ShapeMismatch("loss mask shape".into()));
    }
    let mut count = 0;
    for i in 0..bsz {
        for t in 0..l {
            if loss_mask[[i, t]] {
                if !emb.mask[[i, t]] {
                    return Err(Error::LossMaskOutsidePad {
                        batch: i,
                        position: t,
                    });
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyLossMask);
    }
    Ok(count)
}

/// Mean negative log-likelihood over masked-in positions, no gradients.
pub fn masked_nll(
    state: &ModelState,
    emb: &EmbeddedBatch,
    targets: &Array2<usize>,
    loss_mask: &Array2<bool>,
) -> Result<f64> {
    let count = check_masks(emb, loss_mask)?;
    let logits = forward_from_embeddings(state, emb)?;
    let (bsz, l) = loss_mask.dim();
    let mut total = 0.0;
    for i in 0..bsz {
        for t in 0..l {
            if loss_mask[[i, t]] {
                let row = logits.slice(s![i, t, ..]);
                total += nll_row(&row.to_owned(), targets[[i, t]]);
            }
        }
    }
    Ok(total / count as f64)
}

fn nll_row(row: &Array1<f64>, target: usize) -> f64 {
    let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - maxv).exp()).sum();
    -(row[target] - maxv - z.ln())
}

/// Mean masked NLL plus exact gradients for every parameter and for the
/// embedded input values. The embedding-table gradient includes both the
/// lookup scatter (through `emb.tokens`) and, for tied output heads, the
/// projection term. Any additive perturbation of `emb.values` is treated
/// as a constant.
pub fn nll_and_grads(
    state: &ModelState,
    emb: &EmbeddedBatch,
    targets: &Array2<usize>,
    loss_mask: &Array2<bool>,
) -> Result<Backprop> {
    let count = check_masks(emb, loss_mask)?;
    let (bsz, l, d) = emb.values.dim();
    if d != state.config.d_model {
        return Err(Error::ShapeMismatch(format!(
            "embedded dim {} != d_model {}",
            d, state.config.d_model
        )));
    }
    if l > state.config.context_len {
        return Err(Error::ContextOverflow {
            len: l,
            context_len: state.config.context_len,
        });
    }

    let cfg = &state.config;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();
    let inv_count = 1.0 / count as f64;

    let mut g = ParamSet {
        embed: Array2::zeros(state.params.embed.dim()),
        pos: Array2::zeros(state.params.pos.dim()),
        layers: state
            .params
            .layers
            .iter()
            .map(|lp| super::LayerParams {
                wq: Array2::zeros(lp.wq.dim()),
                wk: Array2::zeros(lp.wk.dim()),
                wv: Array2::zeros(lp.wv.dim()),
                wo: Array2::zeros(lp.wo.dim()),
                ln1_g: Array1::zeros(lp.ln1_g.dim()),
                w1: Array2::zeros(lp.w1.dim()),
                b1: Array1::zeros(lp.b1.dim()),
                w2: Array2::zeros(lp.w2.dim()),
                b2: Array1::zeros(lp.b2.dim()),
                ln2_g: Array1::zeros(lp.ln2_g.dim()),
            })
            .collect(),
        out_proj: state
            .params
            .out_proj
            .as_ref()
            .map(|w| Array2::zeros(w.dim())),
    };
    let mut d_embedded = Array3::zeros((bsz, l, d));
    let mut total_loss = 0.0;

    for i in 0..bsz {
        let h0 = &emb.values.index_axis(Axis(0), i).to_owned()
            + &state.params.pos.slice(s![0..l, ..]);
        let cache = forward_seq(state, &h0, emb.lengths[i]);
        let logits = seq_logits(state, &cache.h);

        // Softmax cross-entropy gradient at masked positions.
        let mut dlogits = Array2::zeros(logits.dim());
        for t in 0..l {
            if loss_mask[[i, t]] {
                let row = logits.row(t).to_owned();
                let target = targets[[i, t]];
                total_loss += nll_row(&row, target);
                let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Array1<f64> = row.mapv(|v| (v - maxv).exp());
                let z = exps.sum();
                for (j, e) in exps.iter().enumerate() {
                    let p = e / z;
                    dlogits[[t, j]] = (p - if j == target { 1.0 } else { 0.0 }) * inv_count;
                }
            }
        }

        // Output head.
        let mut dh_stream: Array2<f64> = match &state.params.out_proj {
            Some(w) => {
                g.out_proj
                    .as_mut()
                    .unwrap()
                    .scaled_add(1.0, &cache.h.t().dot(&dlogits));
                dlogits.dot(&w.t())
            }
            None => {
                g.embed.scaled_add(1.0, &dlogits.t().dot(&cache.h));
                dlogits.dot(&state.params.embed)
            }
        };

        // Blocks in reverse.
        for (li, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &state.params.layers[li];
            let gl = &mut g.layers[li];

            // x3 = x2 + mlp(b)
            let dm2 = dh_stream.clone();
            gl.b2.scaled_add(1.0, &dm2.sum_axis(Axis(0)));
            gl.w2.scaled_add(1.0, &lc.s.t().dot(&dm2));
            let ds = dm2.dot(&lp.w2.t());
            let dm1 = &ds * &lc.m1.mapv(silu_grad);
            gl.b1.scaled_add(1.0, &dm1.sum_axis(Axis(0)));
            gl.w1.scaled_add(1.0, &lc.b.t().dot(&dm1));
            let db = dm1.dot(&lp.w1.t());
            let dx2_from_norm = rmsnorm_backward(&lc.x2, &lp.ln2_g, &lc.rinv2, &db, &mut gl.ln2_g);
            let dx2 = &dh_stream + &dx2_from_norm;

            // x2 = x + attn(a)
            let do_ = dx2.clone();
            gl.wo.scaled_add(1.0, &lc.ctx.t().dot(&do_));
            let dctx = do_.dot(&lp.wo.t());

            let mut dq = Array2::zeros((l, d));
            let mut dk = Array2::zeros((l, d));
            let mut dv = Array2::zeros((l, d));
            for h in 0..n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let p = &lc.probs[h];
                let vh = lc.v.slice(cols).to_owned();
                let dctx_h = dctx.slice(cols).to_owned();
                // ctx_h = p · v_h
                let dp = dctx_h.dot(&vh.t());
                dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
                // masked softmax backward, row by row
                let mut dscore = Array2::zeros((l, l));
                for t in 0..l {
                    let limit = (t + 1).min(emb.lengths[i].max(1));
                    let mut inner = 0.0;
                    for u in 0..limit {
                        inner += dp[[t, u]] * p[[t, u]];
                    }
                    for u in 0..limit {
                        dscore[[t, u]] = p[[t, u]] * (dp[[t, u]] - inner) * att_scale;
                    }
                }
                let qh = lc.q.slice(cols).to_owned();
                let kh = lc.k.slice(cols).to_owned();
                dq.slice_mut(cols).assign(&dscore.dot(&kh));
                dk.slice_mut(cols).assign(&dscore.t().dot(&qh));
            }
            gl.wq.scaled_add(1.0, &lc.a.t().dot(&dq));
            gl.wk.scaled_add(1.0, &lc.a.t().dot(&dk));
            gl.wv.scaled_add(1.0, &lc.a.t().dot(&dv));
            let da = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
            let dx_from_norm = rmsnorm_backward(&lc.x, &lp.ln1_g, &lc.rinv1, &da, &mut gl.ln1_g);
            dh_stream = &dx2 + &dx_from_norm;
        }

        // h0 = emb + pos: the stream gradient lands on both tables.
        g.pos
            .slice_mut(s![0..l, ..])
            .scaled_add(1.0, &dh_stream);
        for t in 0..emb.lengths[i] {
            let id = emb.tokens[[i, t]];
            let mut row = g.embed.row_mut(id);
            row.scaled_add(1.0, &dh_stream.row(t));
        }
        d_embedded
            .index_axis_mut(Axis(0), i)
            .assign(&dh_stream);
    }

    Ok(Backprop {
        loss: total_loss * inv_count,
        grads: Gradients {
            params: g,
            d_embedded,
        },
    })
}

//! The forward engine: one implementation of the transformer pass shared by
//! plain inference, activation patching, and steering.
//!
//! Interventions are expressed as *overrides*: after a component's output is
//! computed, selected rows (positions) of it are replaced before the result
//! is added to the residual stream. Patching "copy in a corrupted
//! activation" and restoring "put every other component back to its clean
//! value" are both just overrides, which keeps the intervention surface to a
//! single code path.
//!
//! Also hosts the exact reverse-mode gradient of the next-token NLL with
//! respect to the input embedding rows, used by the gradient attribution
//! baseline (and cross-checked against finite differences in tests).

use std::collections::BTreeMap;

use crate::numerics::{argmax, softmax, Matrix};

use super::{CaptureSpec, HeadTrace, LayerTrace, ModelError, ModelWeights, RunTrace, Slot};

/// Replacement activations keyed by (layer, slot, position). The vector
/// replaces that component's output row at that position.
pub type OverrideMap = BTreeMap<(usize, Slot, usize), Vec<f64>>;

/// Multiplies the maximum pre-softmax score inside `window` (columns of the
/// final query row) by `beta`, for every head of every layer in `layers`.
#[derive(Debug, Clone)]
pub struct Upweight {
    pub layers: Vec<usize>,
    pub beta: f64,
    /// Half-open column window the peak is searched in (the context span).
    pub window: (usize, usize),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub overrides: OverrideMap,
    pub upweight: Option<Upweight>,
    /// Replaces the embedded input (token + positional rows) wholesale;
    /// shape T x d_model. Used for gradient checks.
    pub input_override: Option<Matrix>,
}

fn embed(weights: &ModelWeights, tokens: &[u32]) -> Result<Matrix, ModelError> {
    let c = &weights.config;
    let t_len = tokens.len();
    let mut x = Matrix::zeros(t_len, c.d_model);
    for (t, &tok) in tokens.iter().enumerate() {
        if (tok as usize) >= c.vocab_size {
            return Err(ModelError::InvalidSequence(format!(
                "token id {tok} out of vocab range {}",
                c.vocab_size
            )));
        }
        let emb_row = weights.token_embedding.row(tok as usize);
        let pos_row = weights.pos_embedding.row(t);
        let out = x.row_mut(t);
        for c_ in 0..out.len() {
            out[c_] = emb_row[c_] + pos_row[c_];
        }
    }
    Ok(x)
}

fn scaled_rows(x: &Matrix, gain: &[f64]) -> Matrix {
    let mut out = x.clone();
    for t in 0..out.rows() {
        let row = out.row_mut(t);
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= g;
        }
    }
    out
}

fn apply_override(out: &mut Matrix, options: &RunOptions, layer: usize, slot: Slot) {
    for t in 0..out.rows() {
        if let Some(v) = options.overrides.get(&(layer, slot, t)) {
            out.row_mut(t).copy_from_slice(v);
        }
    }
}

fn add_assign(acc: &mut Matrix, x: &Matrix) {
    for t in 0..acc.rows() {
        let dst = acc.row_mut(t);
        let src = x.row(t);
        for c in 0..dst.len() {
            dst[c] += src[c];
        }
    }
}

/// Runs the model over raw token ids. See module docs for override
/// semantics. Attention is causal: query t sees keys 0..=t only.
pub fn run(
    weights: &ModelWeights,
    tokens: &[u32],
    capture: &CaptureSpec,
    options: &RunOptions,
) -> Result<RunTrace, ModelError> {
    let c = &weights.config;
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(ModelError::InvalidSequence("empty token sequence".into()));
    }
    if t_len > c.max_seq {
        return Err(ModelError::SequenceTooLong { len: t_len, max: c.max_seq, generated: vec![] });
    }
    super::note_forward_pass();

    let mut x = match &options.input_override {
        Some(m) => {
            if m.shape() != (t_len, c.d_model) {
                return Err(ModelError::InvalidSequence(format!(
                    "input override shape {:?} does not match {} x {}",
                    m.shape(),
                    t_len,
                    c.d_model
                )));
            }
            m.clone()
        }
        None => embed(weights, tokens)?,
    };

    let inv_sqrt_dh = 1.0 / (c.d_head as f64).sqrt();
    let mut layer_traces = Vec::with_capacity(c.n_layers);
    let mut negative_peaks = 0usize;

    for (li, layer) in weights.layers.iter().enumerate() {
        let resid_pre = capture.residuals.then(|| x.clone());
        let xg = scaled_rows(&x, &layer.attn_norm_gain);
        let mut attn_out = Matrix::zeros(t_len, c.d_model);
        let mut head_traces: Vec<Option<HeadTrace>> = Vec::with_capacity(c.n_heads);

        let upweight_here = options
            .upweight
            .as_ref()
            .filter(|u| u.layers.contains(&li));

        for (hi, head) in layer.heads.iter().enumerate() {
            // Projections: rows of q/k/v are per-position d_head vectors.
            let mut q = Matrix::zeros(t_len, c.d_head);
            let mut k = Matrix::zeros(t_len, c.d_head);
            let mut v = Matrix::zeros(t_len, c.d_head);
            for t in 0..t_len {
                let xr = xg.row(t);
                q.row_mut(t).copy_from_slice(&head.w_q.matvec(xr)?);
                k.row_mut(t).copy_from_slice(&head.w_k.matvec(xr)?);
                v.row_mut(t).copy_from_slice(&head.w_v.matvec(xr)?);
            }

            let mut scores = Matrix::zeros(t_len, t_len);
            for t in 0..t_len {
                for u in 0..=t {
                    let mut dot = 0.0;
                    let qr = q.row(t);
                    let kr = k.row(u);
                    for d in 0..c.d_head {
                        dot += qr[d] * kr[d];
                    }
                    scores.set(t, u, dot * inv_sqrt_dh);
                }
            }

            if let Some(u) = upweight_here {
                let (w0, w1) = u.window;
                let hi_col = w1.min(t_len);
                if w0 < hi_col {
                    let row = scores.row(t_len - 1);
                    let peak = w0 + argmax(&row[w0..hi_col]);
                    let s = scores.get(t_len - 1, peak);
                    if s < 0.0 {
                        negative_peaks += 1;
                    }
                    scores.set(t_len - 1, peak, s * u.beta);
                }
            }

            let mut attn = Matrix::zeros(t_len, t_len);
            for t in 0..t_len {
                let p = softmax(&scores.row(t)[..=t])?;
                attn.row_mut(t)[..=t].copy_from_slice(p.as_slice());
            }

            // contrib[t] = w_o * (sum_u attn[t,u] * v[u])
            let mut contrib = Matrix::zeros(t_len, c.d_model);
            for t in 0..t_len {
                let mut ctx = vec![0.0; c.d_head];
                for u in 0..=t {
                    let a = attn.get(t, u);
                    if a == 0.0 {
                        continue;
                    }
                    let vr = v.row(u);
                    for d in 0..c.d_head {
                        ctx[d] += a * vr[d];
                    }
                }
                contrib.row_mut(t).copy_from_slice(&head.w_o.matvec(&ctx)?);
            }

            apply_override(&mut contrib, options, li, Slot::Head(hi));
            add_assign(&mut attn_out, &contrib);
            head_traces.push(capture.heads.then_some(HeadTrace { scores, attn, contrib }));
        }

        apply_override(&mut attn_out, options, li, Slot::AttnLayer);
        add_assign(&mut x, &attn_out);
        let resid_mid = capture.residuals.then(|| x.clone());

        // MLP with square activation: out = ((gain ⊙ x) W_in^T)^2 W_out^T.
        // The square keeps the map smooth everywhere, which the
        // finite-difference gradient checks rely on.
        let mg = scaled_rows(&x, &layer.mlp_norm_gain);
        let mut mlp_out = Matrix::zeros(t_len, c.d_model);
        for t in 0..t_len {
            let mut z = layer.mlp_in.matvec(mg.row(t))?;
            for zj in z.iter_mut() {
                *zj *= *zj;
            }
            mlp_out.row_mut(t).copy_from_slice(&layer.mlp_out.matvec(&z)?);
        }
        apply_override(&mut mlp_out, options, li, Slot::Mlp);
        add_assign(&mut x, &mlp_out);

        layer_traces.push(LayerTrace {
            resid_pre,
            heads: head_traces,
            attn_out: capture.attn_layers.then_some(attn_out),
            resid_mid,
            mlp: capture.mlps.then_some(mlp_out),
        });
    }

    let logits = weights.unembedding.matvec(x.row(t_len - 1))?;
    let next_token = argmax(&logits) as u32;
    Ok(RunTrace { seq_len: t_len, layers: layer_traces, logits, next_token, negative_peaks })
}

// ---------------------------------------------------------------------------
// Exact gradient
// ---------------------------------------------------------------------------

/// NLL of `target` at the last position plus its exact gradient with respect
/// to the embedded input rows (T x d_model). Plain reverse-mode through the
/// un-intervened forward pass.
pub fn nll_grad(
    weights: &ModelWeights,
    tokens: &[u32],
    target: u32,
) -> Result<(f64, Matrix), ModelError> {
    let c = &weights.config;
    let t_len = tokens.len();
    if t_len == 0 || t_len > c.max_seq {
        return Err(ModelError::SequenceTooLong { len: t_len, max: c.max_seq, generated: vec![] });
    }
    if (target as usize) >= c.vocab_size {
        return Err(ModelError::InvalidSequence(format!("target {target} out of vocab")));
    }
    super::note_forward_pass();
    let inv_sqrt_dh = 1.0 / (c.d_head as f64).sqrt();

    // Forward, saving what the backward needs.
    struct LayerSave {
        heads: Vec<(Matrix, Matrix, Matrix, Matrix)>, // (q, k, v, attn)
        z: Matrix,                                    // pre-square MLP activations
    }
    let mut x = embed(weights, tokens)?;
    let mut saves: Vec<LayerSave> = Vec::with_capacity(c.n_layers);

    for layer in &weights.layers {
        let xg = scaled_rows(&x, &layer.attn_norm_gain);
        let mut attn_out = Matrix::zeros(t_len, c.d_model);
        let mut head_saves = Vec::with_capacity(c.n_heads);
        for head in &layer.heads {
            let mut q = Matrix::zeros(t_len, c.d_head);
            let mut k = Matrix::zeros(t_len, c.d_head);
            let mut v = Matrix::zeros(t_len, c.d_head);
            for t in 0..t_len {
                let xr = xg.row(t);
                q.row_mut(t).copy_from_slice(&head.w_q.matvec(xr)?);
                k.row_mut(t).copy_from_slice(&head.w_k.matvec(xr)?);
                v.row_mut(t).copy_from_slice(&head.w_v.matvec(xr)?);
            }
            let mut attn = Matrix::zeros(t_len, t_len);
            for t in 0..t_len {
                let mut row = vec![0.0; t + 1];
                for (u, rv) in row.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for d in 0..c.d_head {
                        dot += q.get(t, d) * k.get(u, d);
                    }
                    *rv = dot * inv_sqrt_dh;
                }
                let p = softmax(&row)?;
                attn.row_mut(t)[..=t].copy_from_slice(p.as_slice());
            }
            let mut contrib = Matrix::zeros(t_len, c.d_model);
            for t in 0..t_len {
                let mut ctx = vec![0.0; c.d_head];
                for u in 0..=t {
                    let a = attn.get(t, u);
                    for d in 0..c.d_head {
                        ctx[d] += a * v.get(u, d);
                    }
                }
                contrib.row_mut(t).copy_from_slice(&head.w_o.matvec(&ctx)?);
            }
            add_assign(&mut attn_out, &contrib);
            head_saves.push((q, k, v, attn));
        }
        add_assign(&mut x, &attn_out);

        let mg = scaled_rows(&x, &layer.mlp_norm_gain);
        let mut z = Matrix::zeros(t_len, c.d_mlp);
        let mut mlp_out = Matrix::zeros(t_len, c.d_model);
        for t in 0..t_len {
            let zt = layer.mlp_in.matvec(mg.row(t))?;
            let sq: Vec<f64> = zt.iter().map(|v| v * v).collect();
            mlp_out.row_mut(t).copy_from_slice(&layer.mlp_out.matvec(&sq)?);
            z.row_mut(t).copy_from_slice(&zt);
        }
        add_assign(&mut x, &mlp_out);
        saves.push(LayerSave { heads: head_saves, z });
    }

    let logits = weights.unembedding.matvec(x.row(t_len - 1))?;
    let p = softmax(&logits)?;
    let nll = -p.get(target as usize).max(f64::MIN_POSITIVE).ln();

    // Backward. dlogits = p - onehot(target); dX[last] = U^T dlogits.
    let mut dlog = p.as_slice().to_vec();
    dlog[target as usize] -= 1.0;
    let mut dx = Matrix::zeros(t_len, c.d_model);
    dx.row_mut(t_len - 1).copy_from_slice(&weights.unembedding.matvec_t(&dlog)?);

    for (li, layer) in weights.layers.iter().enumerate().rev() {
        let save = &saves[li];

        // MLP: x2 = x1 + W_out (W_in (g ⊙ x1))^2
        let mut dx1 = dx.clone();
        for t in 0..t_len {
            // dz_j = 2 z_j * (W_out^T dx2)_j
            let mut dz = layer.mlp_out.matvec_t(dx.row(t))?;
            for (j, dzj) in dz.iter_mut().enumerate() {
                *dzj *= 2.0 * save.z.get(t, j);
            }
            let dmg = layer.mlp_in.matvec_t(&dz)?;
            let row = dx1.row_mut(t);
            for (cc, dv) in dmg.iter().enumerate() {
                row[cc] += dv * layer.mlp_norm_gain[cc];
            }
        }

        // Attention: x1 = x0 + sum_h W_o (attn_h · (W_v (g ⊙ x0)))
        let mut dx0 = dx1.clone();
        for (head, (q, k, v, attn)) in layer.heads.iter().zip(&save.heads) {
            let mut dq = Matrix::zeros(t_len, c.d_head);
            let mut dk = Matrix::zeros(t_len, c.d_head);
            let mut dv = Matrix::zeros(t_len, c.d_head);
            for t in 0..t_len {
                let dctx = head.w_o.matvec_t(dx1.row(t))?;
                // datt[u] = dctx · v[u]; softmax row Jacobian.
                let mut datt = vec![0.0; t + 1];
                let mut inner = 0.0;
                for (u, dau) in datt.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for d in 0..c.d_head {
                        dot += dctx[d] * v.get(u, d);
                    }
                    *dau = dot;
                    inner += attn.get(t, u) * dot;
                }
                for (u, &dau) in datt.iter().enumerate() {
                    let a = attn.get(t, u);
                    if a == 0.0 {
                        continue;
                    }
                    let ds = a * (dau - inner) * inv_sqrt_dh;
                    for d in 0..c.d_head {
                        dq.set(t, d, dq.get(t, d) + ds * k.get(u, d));
                        dk.set(u, d, dk.get(u, d) + ds * q.get(t, d));
                    }
                    for d in 0..c.d_head {
                        dv.set(u, d, dv.get(u, d) + a * dctx[d]);
                    }
                }
            }
            for t in 0..t_len {
                let gq = head.w_q.matvec_t(dq.row(t))?;
                let gk = head.w_k.matvec_t(dk.row(t))?;
                let gv = head.w_v.matvec_t(dv.row(t))?;
                let row = dx0.row_mut(t);
                for cc in 0..c.d_model {
                    row[cc] += (gq[cc] + gk[cc] + gv[cc]) * layer.attn_norm_gain[cc];
                }
            }
        }
        dx = dx0;
    }

    Ok((nll, dx))
}

use serde::Serialize;

use super::{LayerParams, ModelState, NeuronRef, TokenId};
use crate::error::Result;
use crate::numerics::kernels::{dot, layer_norm_row, linear};
use crate::numerics::{argmax_f64, gelu, softmax_f64, Vector};

/// Adds `delta` to one hidden activation at the last input position.
/// Used for finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub neuron: NeuronRef,
    pub delta: f64,
}

/// FFN hidden activations, pre-head latent and logits at the last position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationTrace {
    /// One vector of length `d_ff` per layer.
    pub hidden: Vec<Vector>,
    pub latent: Vector,
    pub logits: Vector,
}

/// Everything the backward pass needs for one sequence.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub ln1_xhat: Vec<f64>,
    pub ln1_inv: Vec<f64>,
    pub ln1_out: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `len × n_heads × len`, zero above the diagonal.
    pub probs: Vec<f64>,
    pub attn: Vec<f64>,
    pub resid_mid: Vec<f64>,
    pub ln2_xhat: Vec<f64>,
    pub ln2_inv: Vec<f64>,
    pub ln2_out: Vec<f64>,
    pub pre: Vec<f64>,
    /// Post-GELU, post-scale hidden activations, `len × d_ff`.
    pub act: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub tokens: Vec<TokenId>,
    pub layers: Vec<LayerCache>,
    pub lnf_xhat: Vec<f64>,
    pub lnf_inv: Vec<f64>,
    pub lnf_out: Vec<f64>,
    /// `len × vocab`
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn last_logits(&self) -> &[f64] {
        let v = self.logits.len() / self.len();
        &self.logits[(self.len() - 1) * v..]
    }
}

pub(crate) fn embed(state: &ModelState, tokens: &[TokenId], n_seq: usize) -> Vec<f64> {
    let d = state.config().d_model;
    let len = tokens.len() / n_seq;
    let mut x = vec![0.0; tokens.len() * d];
    for (r, &t) in tokens.iter().enumerate() {
        let te = state.tok_emb.row(t);
        let pe = state.pos_emb.row(r % len);
        for (i, xi) in x[r * d..(r + 1) * d].iter_mut().enumerate() {
            *xi = f64::from(te[i]) + f64::from(pe[i]);
        }
    }
    x
}

/// One pre-norm block applied in place to `x` (`n_seq·len × d_model`).
///
/// With `last_only` the attention queries and the FFN are evaluated only at
/// the last position of each sequence; the other rows of `x` are left stale.
/// Every row is computed by the same sequence of operations regardless of
/// `n_seq` or `last_only`, so results are bitwise independent of batching.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_layer(
    p: &LayerParams,
    scales: &[f32],
    n_heads: usize,
    x: &mut [f64],
    n_seq: usize,
    len: usize,
    last_only: bool,
    inject: Option<(usize, f64)>,
    cache: Option<&mut LayerCache>,
) {
    let d = p.wq.rows();
    let ff = p.w1.cols();
    let hd = d / n_heads;
    let rows = n_seq * len;

    let mut ln1_xhat = vec![0.0; rows * d];
    let mut ln1_out = vec![0.0; rows * d];
    let mut ln1_inv = vec![0.0; rows];
    for r in 0..rows {
        ln1_inv[r] = layer_norm_row(
            &x[r * d..(r + 1) * d],
            p.ln1_gain.as_slice(),
            p.ln1_bias.as_slice(),
            &mut ln1_xhat[r * d..(r + 1) * d],
            &mut ln1_out[r * d..(r + 1) * d],
        );
    }
    let mut k = vec![0.0; rows * d];
    let mut v = vec![0.0; rows * d];
    linear(&ln1_out, d, p.wk.as_slice(), None, d, &mut k);
    linear(&ln1_out, d, p.wv.as_slice(), None, d, &mut v);

    let qrows: Vec<usize> = if last_only {
        (0..n_seq).map(|s| s * len + len - 1).collect()
    } else {
        (0..rows).collect()
    };
    let nq = qrows.len();
    let mut q_in = vec![0.0; nq * d];
    for (qi, &r) in qrows.iter().enumerate() {
        q_in[qi * d..(qi + 1) * d].copy_from_slice(&ln1_out[r * d..(r + 1) * d]);
    }
    let mut q = vec![0.0; nq * d];
    linear(&q_in, d, p.wq.as_slice(), None, d, &mut q);

    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; nq * n_heads * len];
    let mut attn = vec![0.0; nq * d];
    let mut scores = vec![0.0; len];
    for (qi, &r) in qrows.iter().enumerate() {
        let s = r / len;
        let i = r % len;
        for h in 0..n_heads {
            let off = h * hd;
            let qh = &q[qi * d + off..qi * d + off + hd];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kr = (s * len + j) * d + off;
                scores[j] = dot(qh, &k[kr..kr + hd]) * scale;
                max = max.max(scores[j]);
            }
            let mut sum = 0.0;
            for sj in scores.iter_mut().take(i + 1) {
                *sj = (*sj - max).exp();
                sum += *sj;
            }
            let prow = &mut probs[(qi * n_heads + h) * len..(qi * n_heads + h + 1) * len];
            let out = &mut attn[qi * d + off..qi * d + off + hd];
            for j in 0..=i {
                let pj = scores[j] / sum;
                prow[j] = pj;
                let vr = (s * len + j) * d + off;
                for (o, &vv) in out.iter_mut().zip(&v[vr..vr + hd]) {
                    *o += pj * vv;
                }
            }
        }
    }
    let mut proj = vec![0.0; nq * d];
    linear(&attn, d, p.wo.as_slice(), None, d, &mut proj);
    for (qi, &r) in qrows.iter().enumerate() {
        for (xi, &pi) in x[r * d..(r + 1) * d].iter_mut().zip(&proj[qi * d..(qi + 1) * d]) {
            *xi += pi;
        }
    }

    let mut resid_mid = vec![0.0; nq * d];
    for (qi, &r) in qrows.iter().enumerate() {
        resid_mid[qi * d..(qi + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
    }
    let mut ln2_xhat = vec![0.0; nq * d];
    let mut ln2_out = vec![0.0; nq * d];
    let mut ln2_inv = vec![0.0; nq];
    for qi in 0..nq {
        ln2_inv[qi] = layer_norm_row(
            &resid_mid[qi * d..(qi + 1) * d],
            p.ln2_gain.as_slice(),
            p.ln2_bias.as_slice(),
            &mut ln2_xhat[qi * d..(qi + 1) * d],
            &mut ln2_out[qi * d..(qi + 1) * d],
        );
    }
    let mut pre = vec![0.0; nq * ff];
    linear(&ln2_out, d, p.w1.as_slice(), Some(p.b1.as_slice()), ff, &mut pre);
    let mut act: Vec<f64> = pre
        .iter()
        .enumerate()
        .map(|(i, &z)| gelu(z) * f64::from(scales[i % ff]))
        .collect();
    if let Some((unit, delta)) = inject {
        for (qi, &r) in qrows.iter().enumerate() {
            if r % len == len - 1 {
                act[qi * ff + unit] += delta;
            }
        }
    }
    let mut out = vec![0.0; nq * d];
    linear(&act, ff, p.w2.as_slice(), Some(p.b2.as_slice()), d, &mut out);
    for (qi, &r) in qrows.iter().enumerate() {
        for (xi, &oi) in x[r * d..(r + 1) * d].iter_mut().zip(&out[qi * d..(qi + 1) * d]) {
            *xi += oi;
        }
    }

    if let Some(c) = cache {
        *c = LayerCache {
            ln1_xhat,
            ln1_inv,
            ln1_out,
            q,
            k,
            v,
            probs,
            attn,
            resid_mid,
            ln2_xhat,
            ln2_inv,
            ln2_out,
            pre,
            act,
        };
    }
}

/// Final norm and LM head on the given rows of `x`.
pub(crate) fn head_rows(
    state: &ModelState,
    x: &[f64],
    rows: &[usize],
    mut lnf: Option<(&mut Vec<f64>, &mut Vec<f64>, &mut Vec<f64>)>,
) -> Vec<f64> {
    let d = state.config().d_model;
    let vocab = state.config().vocab_size;
    let mut xhat = vec![0.0; rows.len() * d];
    let mut normed = vec![0.0; rows.len() * d];
    let mut inv = vec![0.0; rows.len()];
    for (i, &r) in rows.iter().enumerate() {
        inv[i] = layer_norm_row(
            &x[r * d..(r + 1) * d],
            state.lnf_gain.as_slice(),
            state.lnf_bias.as_slice(),
            &mut xhat[i * d..(i + 1) * d],
            &mut normed[i * d..(i + 1) * d],
        );
    }
    let mut logits = vec![0.0; rows.len() * vocab];
    linear(&normed, d, state.lm_head.as_slice(), None, vocab, &mut logits);
    if let Some((xh, iv, out)) = lnf.take() {
        *xh = xhat;
        *iv = inv;
        *out = normed;
    }
    logits
}

fn empty_layer_cache() -> LayerCache {
    LayerCache {
        ln1_xhat: Vec::new(),
        ln1_inv: Vec::new(),
        ln1_out: Vec::new(),
        q: Vec::new(),
        k: Vec::new(),
        v: Vec::new(),
        probs: Vec::new(),
        attn: Vec::new(),
        resid_mid: Vec::new(),
        ln2_xhat: Vec::new(),
        ln2_inv: Vec::new(),
        ln2_out: Vec::new(),
        pre: Vec::new(),
        act: Vec::new(),
    }
}

/// Full forward over every position, keeping all intermediates.
pub(crate) fn forward_cache(state: &ModelState, tokens: &[TokenId]) -> Result<ForwardCache> {
    forward_cache_hooked(state, tokens, None)
}

pub(crate) fn forward_cache_hooked(
    state: &ModelState,
    tokens: &[TokenId],
    injection: Option<Injection>,
) -> Result<ForwardCache> {
    state.check_tokens(tokens)?;
    if let Some(inj) = injection {
        state.check_neuron(inj.neuron)?;
    }
    let cfg = *state.config();
    let len = tokens.len();
    let mut x = embed(state, tokens, 1);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, p) in state.layers.iter().enumerate() {
        let mut cache = empty_layer_cache();
        let inject = injection
            .filter(|inj| inj.neuron.layer == l)
            .map(|inj| (inj.neuron.unit, inj.delta));
        run_layer(
            p,
            state.activation_scales.row(l),
            cfg.n_heads,
            &mut x,
            1,
            len,
            false,
            inject,
            Some(&mut cache),
        );
        layers.push(cache);
    }
    let rows: Vec<usize> = (0..len).collect();
    let (mut lnf_xhat, mut lnf_inv, mut lnf_out) = (Vec::new(), Vec::new(), Vec::new());
    let logits = head_rows(
        state,
        &x,
        &rows,
        Some((&mut lnf_xhat, &mut lnf_inv, &mut lnf_out)),
    );
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        layers,
        lnf_xhat,
        lnf_inv,
        lnf_out,
        logits,
    })
}

struct LastPosition {
    logits: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    latent: Vec<f64>,
}

/// Forward that evaluates the final block and head at the last position only.
fn forward_last(
    state: &ModelState,
    tokens: &[TokenId],
    injection: Option<Injection>,
    want_trace: bool,
) -> Result<LastPosition> {
    state.check_tokens(tokens)?;
    if let Some(inj) = injection {
        state.check_neuron(inj.neuron)?;
    }
    let cfg = *state.config();
    let len = tokens.len();
    let mut x = embed(state, tokens, 1);
    let mut hidden = Vec::new();
    for (l, p) in state.layers.iter().enumerate() {
        let inject = injection
            .filter(|inj| inj.neuron.layer == l)
            .map(|inj| (inj.neuron.unit, inj.delta));
        let last = l + 1 == cfg.n_layers;
        if want_trace {
            let mut cache = empty_layer_cache();
            run_layer(p, state.activation_scales.row(l), cfg.n_heads, &mut x, 1, len, last, inject, Some(&mut cache));
            let nq = cache.act.len() / cfg.d_ff;
            hidden.push(cache.act[(nq - 1) * cfg.d_ff..].to_vec());
        } else {
            run_layer(p, state.activation_scales.row(l), cfg.n_heads, &mut x, 1, len, last, inject, None);
        }
    }
    let (mut xh, mut inv, mut latent) = (Vec::new(), Vec::new(), Vec::new());
    let logits = head_rows(state, &x, &[len - 1], Some((&mut xh, &mut inv, &mut latent)));
    Ok(LastPosition {
        logits,
        hidden,
        latent,
    })
}

/// Next-token logits after the last position, plus the activation trace.
pub fn forward(state: &ModelState, tokens: &[TokenId]) -> Result<(Vector, ActivationTrace)> {
    let out = forward_last(state, tokens, None, true)?;
    let logits = Vector::from_f64(&out.logits)?;
    let trace = ActivationTrace {
        hidden: out
            .hidden
            .iter()
            .map(|h| Vector::from_f64(h))
            .collect::<Result<_>>()?,
        latent: Vector::from_f64(&out.latent)?,
        logits: logits.clone(),
    };
    Ok((logits, trace))
}

/// 64-bit next-token logits with an optional activation injection.
pub fn forward_hooked(
    state: &ModelState,
    tokens: &[TokenId],
    injection: Option<Injection>,
) -> Result<Vec<f64>> {
    Ok(forward_last(state, tokens, injection, false)?.logits)
}

/// Argmax token and 64-bit next-token distribution.
pub fn predict_next_f64(state: &ModelState, tokens: &[TokenId]) -> Result<(TokenId, Vec<f64>)> {
    let logits = forward_hooked(state, tokens, None)?;
    let probs = softmax_f64(&logits);
    Ok((argmax_f64(&logits)?, probs))
}

pub fn predict_next(state: &ModelState, tokens: &[TokenId]) -> Result<(TokenId, Vector)> {
    let (tok, probs) = predict_next_f64(state, tokens)?;
    Ok((tok, Vector::from_f64(&probs)?))
}

/// Argmax prediction after every prefix `tokens[..=i]`, in one pass.
pub fn teacher_forced_argmax(state: &ModelState, tokens: &[TokenId]) -> Result<Vec<TokenId>> {
    let cache = forward_cache(state, tokens)?;
    let vocab = state.config().vocab_size;
    cache
        .logits
        .chunks(vocab)
        .map(argmax_f64)
        .collect()
}

/// Greedy decoding. Stops after emitting `eos` (which is included), after
/// `max_new` tokens, or when the context is full.
pub fn greedy_generate(
    state: &ModelState,
    prompt: &[TokenId],
    max_new: usize,
    eos: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    state.check_tokens(prompt)?;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < state.config().max_seq {
        let (next, _) = predict_next_f64(state, &seq)?;
        seq.push(next);
        out.push(next);
        if Some(next) == eos {
            break;
        }
    }
    Ok(out)
}

//! Reverse-mode differentiation through the whole model.

use super::forward::{forward_cache, ForwardCache};
use super::{ModelState, NeuronRef, TokenId, TENSORS_PER_LAYER};
use crate::error::{Error, Result};
use crate::numerics::gelu_grad;
use crate::numerics::kernels::{
    axpy, dot, layer_norm_row_backward, linear_backward_input, linear_backward_weight,
};

/// Parameter gradients in the order of [`ModelState::trainable`].
#[derive(Debug, Clone)]
pub(crate) struct Grads {
    pub bufs: Vec<Vec<f64>>,
    n_layers: usize,
}

// Offsets inside one layer's block of tensors.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W1: usize = 8;
const B1: usize = 9;
const W2: usize = 10;
const B2: usize = 11;

impl Grads {
    pub fn zeros(state: &ModelState) -> Self {
        Self {
            bufs: state
                .trainable()
                .iter()
                .map(|m| vec![0.0; m.rows() * m.cols()])
                .collect(),
            n_layers: state.config().n_layers,
        }
    }

    pub fn clear(&mut self) {
        self.bufs.iter_mut().for_each(|b| b.fill(0.0));
    }

    fn layer(&self, l: usize, off: usize) -> usize {
        2 + l * TENSORS_PER_LAYER + off
    }

    fn final_base(&self) -> usize {
        2 + self.n_layers * TENSORS_PER_LAYER
    }

    fn get(&mut self, idx: usize) -> &mut [f64] {
        &mut self.bufs[idx]
    }

    fn pair(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(a < b);
        let (head, tail) = self.bufs.split_at_mut(b);
        (&mut head[a], &mut tail[0])
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

fn add_row_sums(dy: &[f64], cols: usize, g: &mut [f64]) {
    for row in dy.chunks(cols) {
        axpy(1.0, row, g);
    }
}

/// Backpropagate `dlogits` (`len × vocab`). Accumulates parameter gradients
/// into `grads` when given. Returns the gradient with respect to each FFN
/// hidden activation at the last position, layer-major (`n_layers · d_ff`).
pub(crate) fn backward(
    state: &ModelState,
    cache: &ForwardCache,
    dlogits: &[f64],
    mut grads: Option<&mut Grads>,
) -> Vec<f64> {
    let cfg = *state.config();
    let (d, ff, vocab, n_heads) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
    let hd = d / n_heads;
    let len = cache.len();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dact_last = vec![0.0; cfg.n_layers * ff];

    // Head and final norm.
    let mut dnormed = vec![0.0; len * d];
    linear_backward_input(dlogits, vocab, state.lm_head.as_slice(), d, &mut dnormed);
    if let Some(g) = grads.as_deref_mut() {
        let fb = g.final_base();
        linear_backward_weight(&cache.lnf_out, d, dlogits, vocab, g.get(fb + 2));
    }
    let mut dx = vec![0.0; len * d];
    for r in 0..len {
        let rg = grads.as_deref_mut().map(|g| {
            let fb = g.final_base();
            g.pair(fb, fb + 1)
        });
        layer_norm_row_backward(
            &dnormed[r * d..(r + 1) * d],
            &cache.lnf_xhat[r * d..(r + 1) * d],
            cache.lnf_inv[r],
            state.lnf_gain.as_slice(),
            &mut dx[r * d..(r + 1) * d],
            rg,
        );
    }

    for l in (0..cfg.n_layers).rev() {
        let p = &state.layers[l];
        let c = &cache.layers[l];
        let scales = state.activation_scales.row(l);

        // FFN sublayer: x_out = resid_mid + act·W2 + b2.
        let mut dact = vec![0.0; len * ff];
        linear_backward_input(&dx, d, p.w2.as_slice(), ff, &mut dact);
        dact_last[l * ff..(l + 1) * ff].copy_from_slice(&dact[(len - 1) * ff..]);
        if let Some(g) = grads.as_deref_mut() {
            add_row_sums(&dx, d, g.get(g.layer(l, B2)));
            linear_backward_weight(&c.act, ff, &dx, d, g.get(g.layer(l, W2)));
        }
        let dpre: Vec<f64> = dact
            .iter()
            .zip(&c.pre)
            .enumerate()
            .map(|(i, (&da, &z))| da * gelu_grad(z) * f64::from(scales[i % ff]))
            .collect();
        if let Some(g) = grads.as_deref_mut() {
            add_row_sums(&dpre, ff, g.get(g.layer(l, B1)));
            linear_backward_weight(&c.ln2_out, d, &dpre, ff, g.get(g.layer(l, W1)));
        }
        let mut dln2 = vec![0.0; len * d];
        linear_backward_input(&dpre, ff, p.w1.as_slice(), d, &mut dln2);
        for r in 0..len {
            let rg = grads
                .as_deref_mut()
                .map(|g| g.pair(g.layer(l, LN2_G), g.layer(l, LN2_B)));
            layer_norm_row_backward(
                &dln2[r * d..(r + 1) * d],
                &c.ln2_xhat[r * d..(r + 1) * d],
                c.ln2_inv[r],
                p.ln2_gain.as_slice(),
                &mut dx[r * d..(r + 1) * d],
                rg,
            );
        }

        // Attention sublayer: resid_mid = x_in + attn·Wo.
        let mut dattn = vec![0.0; len * d];
        linear_backward_input(&dx, d, p.wo.as_slice(), d, &mut dattn);
        if let Some(g) = grads.as_deref_mut() {
            linear_backward_weight(&c.attn, d, &dx, d, g.get(g.layer(l, WO)));
        }
        let mut dq = vec![0.0; len * d];
        let mut dk = vec![0.0; len * d];
        let mut dv = vec![0.0; len * d];
        let mut dp = vec![0.0; len];
        for i in 0..len {
            for h in 0..n_heads {
                let off = h * hd;
                let dout = &dattn[i * d + off..i * d + off + hd];
                let prow = &c.probs[(i * n_heads + h) * len..(i * n_heads + h + 1) * len];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let vr = j * d + off;
                    dp[j] = dot(dout, &c.v[vr..vr + hd]);
                    weighted += prow[j] * dp[j];
                    axpy(prow[j], dout, &mut dv[vr..vr + hd]);
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kr = j * d + off;
                    let qr = i * d + off;
                    axpy(ds, &c.k[kr..kr + hd], &mut dq[qr..qr + hd]);
                    axpy(ds, &c.q[qr..qr + hd], &mut dk[kr..kr + hd]);
                }
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            linear_backward_weight(&c.ln1_out, d, &dq, d, g.get(g.layer(l, WQ)));
            linear_backward_weight(&c.ln1_out, d, &dk, d, g.get(g.layer(l, WK)));
            linear_backward_weight(&c.ln1_out, d, &dv, d, g.get(g.layer(l, WV)));
        }
        let mut dln1 = vec![0.0; len * d];
        let mut tmp = vec![0.0; len * d];
        for (dy, w) in [(&dq, &p.wq), (&dk, &p.wk), (&dv, &p.wv)] {
            linear_backward_input(dy, d, w.as_slice(), d, &mut tmp);
            axpy(1.0, &tmp, &mut dln1);
        }
        for r in 0..len {
            let rg = grads
                .as_deref_mut()
                .map(|g| g.pair(g.layer(l, LN1_G), g.layer(l, LN1_B)));
            layer_norm_row_backward(
                &dln1[r * d..(r + 1) * d],
                &c.ln1_xhat[r * d..(r + 1) * d],
                c.ln1_inv[r],
                p.ln1_gain.as_slice(),
                &mut dx[r * d..(r + 1) * d],
                rg,
            );
        }
    }

    if let Some(g) = grads {
        for (r, &t) in cache.tokens.iter().enumerate() {
            axpy(1.0, &dx[r * d..(r + 1) * d], &mut g.get(0)[t * d..(t + 1) * d]);
            axpy(1.0, &dx[r * d..(r + 1) * d], &mut g.get(1)[r * d..(r + 1) * d]);
        }
    }
    dact_last
}

/// Gradient of one token's logit at the last position with respect to each
/// FFN hidden activation there, from an existing forward cache.
pub(crate) fn logit_grads(state: &ModelState, cache: &ForwardCache, wrt: TokenId) -> Result<Vec<f64>> {
    let vocab = state.config().vocab_size;
    if wrt >= vocab {
        return Err(Error::TokenOutOfRange { token: wrt, vocab });
    }
    let mut dlogits = vec![0.0; cache.len() * vocab];
    dlogits[(cache.len() - 1) * vocab + wrt] = 1.0;
    Ok(backward(state, cache, &dlogits, None))
}

/// `∂ logit[wrt] / ∂ activation(neuron)` at the last position, for every
/// FFN neuron, in layer-major order.
pub fn backward_logit(
    state: &ModelState,
    tokens: &[TokenId],
    wrt: TokenId,
) -> Result<Vec<(NeuronRef, f64)>> {
    let cache = forward_cache(state, tokens)?;
    let grads = logit_grads(state, &cache, wrt)?;
    let ff = state.config().d_ff;
    Ok(grads
        .into_iter()
        .enumerate()
        .map(|(i, g)| (NeuronRef::from_flat(i, ff), g))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::forward_cache_hooked;
    use crate::model::{forward_hooked, Injection, ModelConfig};
    use crate::numerics::softmax_f64;

    fn tiny(seed: u64) -> ModelState {
        ModelState::init(ModelConfig {
            vocab_size: 9,
            d_model: 8,
            d_ff: 12,
            n_layers: 2,
            n_heads: 2,
            max_seq: 8,
            seed,
        })
        .unwrap()
    }

    fn loss(state: &ModelState, tokens: &[usize]) -> f64 {
        let cache = forward_cache(state, tokens).unwrap();
        let v = state.config().vocab_size;
        let mut total = 0.0;
        for i in 0..tokens.len() - 1 {
            let probs = softmax_f64(&cache.logits[i * v..(i + 1) * v]);
            total -= probs[tokens[i + 1]].ln();
        }
        total
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut state = tiny(1);
        // Move away from the symmetric init so every path is exercised.
        for (i, m) in state.trainable_mut().into_iter().enumerate() {
            for (j, x) in m.as_mut_slice().iter_mut().enumerate() {
                *x += 0.05 * (((i * 31 + j * 17) % 13) as f32 / 13.0 - 0.5);
            }
        }
        let tokens = [1, 4, 2, 7, 3];
        let cache = forward_cache(&state, &tokens).unwrap();
        let v = state.config().vocab_size;
        let mut dlogits = vec![0.0; tokens.len() * v];
        for i in 0..tokens.len() - 1 {
            let probs = softmax_f64(&cache.logits[i * v..(i + 1) * v]);
            for t in 0..v {
                dlogits[i * v + t] = probs[t] - if t == tokens[i + 1] { 1.0 } else { 0.0 };
            }
        }
        let mut grads = Grads::zeros(&state);
        backward(&state, &cache, &dlogits, Some(&mut grads));

        let n_tensors = state.trainable().len();
        for ti in 0..n_tensors {
            let size = grads.bufs[ti].len();
            for j in 0..size {
                let orig = state.trainable()[ti].as_slice()[j];
                let h = 1e-3f32;
                state.trainable_mut()[ti].as_mut_slice()[j] = orig + h;
                let up = loss(&state, &tokens);
                state.trainable_mut()[ti].as_mut_slice()[j] = orig - h;
                let down = loss(&state, &tokens);
                state.trainable_mut()[ti].as_mut_slice()[j] = orig;
                let step = f64::from(orig + h) - f64::from(orig - h);
                let fd = (up - down) / step;
                let an = grads.bufs[ti][j];
                assert!(
                    (fd - an).abs() < 1e-4 + 1e-2 * an.abs(),
                    "tensor {ti} entry {j}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let state = tiny(2);
        let tokens = [3, 1, 8, 2];
        let wrt = 5;
        let grads = backward_logit(&state, &tokens, wrt).unwrap();
        let h = 1e-3;
        for &(n, g) in grads.iter().step_by(5) {
            let up = forward_hooked(&state, &tokens, Some(Injection { neuron: n, delta: h })).unwrap();
            let dn = forward_hooked(&state, &tokens, Some(Injection { neuron: n, delta: -h })).unwrap();
            let fd = (up[wrt] - dn[wrt]) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6 || (fd - g).abs() < 1e-3 * g.abs(), "{n}: {fd} vs {g}");
        }
    }

    #[test]
    fn injection_matches_between_paths() {
        let state = tiny(3);
        let inj = Injection {
            neuron: NeuronRef::new(0, 4),
            delta: 0.3,
        };
        let cache = forward_cache_hooked(&state, &[1, 2, 3], Some(inj)).unwrap();
        let fast = forward_hooked(&state, &[1, 2, 3], Some(inj)).unwrap();
        assert_eq!(cache.last_logits(), &fast[..]);
    }

    #[test]
    fn dead_head_gives_zero_gradients() {
        let mut state = tiny(4);
        state.lm_head.as_mut_slice().fill(0.0);
        let grads = backward_logit(&state, &[1, 2], 3).unwrap();
        assert!(grads.iter().all(|&(_, g)| g == 0.0));
    }
}

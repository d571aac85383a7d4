use std::cell::Cell;

use super::forward::{forward_cache, head_rows, run_layer, ForwardCache};
use super::{ModelState, NeuronRef, TokenId};
use crate::error::{Error, Result};
use crate::numerics::kernels::linear;
use crate::numerics::softmax_f64;

/// Evaluates "what if this neuron's output row were replaced" without
/// touching the model.
///
/// The forward pass up to the patched block is cached once; each candidate
/// row recomputes that block's FFN output and everything after it. Results
/// are bitwise identical to writing the row into the model and calling
/// [`predict_next_f64`](super::predict_next_f64).
pub struct PatchSimulator<'a> {
    state: &'a ModelState,
    cache: ForwardCache,
    evaluations: Cell<usize>,
}

impl<'a> PatchSimulator<'a> {
    pub fn new(state: &'a ModelState, tokens: &[TokenId]) -> Result<Self> {
        Ok(Self {
            state,
            cache: forward_cache(state, tokens)?,
            evaluations: Cell::new(0),
        })
    }

    /// Unpatched next-token distribution.
    pub fn base_probs(&self) -> Vec<f64> {
        softmax_f64(self.cache.last_logits())
    }

    pub fn base_logits(&self) -> &[f64] {
        self.cache.last_logits()
    }

    /// Hidden activations at the last position, layer-major.
    pub fn last_activations(&self) -> Vec<f64> {
        let ff = self.state.config().d_ff;
        let len = self.cache.len();
        self.cache
            .layers
            .iter()
            .flat_map(|c| c.act[(len - 1) * ff..len * ff].iter().copied())
            .collect()
    }

    pub(crate) fn cache(&self) -> &ForwardCache {
        &self.cache
    }

    /// Number of simulated forward passes so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.get()
    }

    /// Next-token logits with `neuron`'s output row replaced by each of
    /// `rows` in turn.
    pub fn logits_with_rows(&self, neuron: NeuronRef, rows: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        self.state.check_neuron(neuron)?;
        let cfg = *self.state.config();
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Shape {
                op: "simulate patch",
                left: (1, d),
                right: (1, bad.len()),
            });
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let len = self.cache.len();
        let n = rows.len();
        let layer = &self.state.layers[neuron.layer];
        let lc = &self.cache.layers[neuron.layer];

        let mut x = vec![0.0; n * len * d];
        let mut w2 = layer.w2.as_slice().to_vec();
        let mut out = vec![0.0; len * d];
        for (c, row) in rows.iter().enumerate() {
            w2[neuron.unit * d..(neuron.unit + 1) * d].copy_from_slice(row);
            linear(&lc.act, ff, &w2, Some(layer.b2.as_slice()), d, &mut out);
            let xc = &mut x[c * len * d..(c + 1) * len * d];
            xc.copy_from_slice(&lc.resid_mid);
            for (xi, &oi) in xc.iter_mut().zip(&out) {
                *xi += oi;
            }
        }
        for l in neuron.layer + 1..cfg.n_layers {
            run_layer(
                &self.state.layers[l],
                self.state.activation_scales.row(l),
                cfg.n_heads,
                &mut x,
                n,
                len,
                l + 1 == cfg.n_layers,
                None,
                None,
            );
        }
        let last_rows: Vec<usize> = (0..n).map(|c| c * len + len - 1).collect();
        let logits = head_rows(self.state, &x, &last_rows, None);
        self.evaluations.set(self.evaluations.get() + n);
        Ok(logits.chunks(cfg.vocab_size).map(<[f64]>::to_vec).collect())
    }

    pub fn probs_with_rows(&self, neuron: NeuronRef, rows: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .logits_with_rows(neuron, rows)?
            .iter()
            .map(|l| softmax_f64(l))
            .collect())
    }
}

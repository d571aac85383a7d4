//! A small decoder-only transformer written from scratch.
//!
//! Layout: token + learned positional embeddings, `n_layers` pre-norm blocks
//! (causal multi-head self-attention, then a GELU feed-forward sublayer),
//! a final layer norm and an untied LM head. Parameters are stored as `f32`;
//! the forward and backward passes run in `f64`.

mod backward;
mod checkpoint;
mod forward;
mod simulate;
mod train;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use backward::backward_logit;
pub(crate) use backward::logit_grads;
pub use checkpoint::{load, read_checkpoint, save, write_checkpoint, MAGIC, VERSION};
pub use forward::{
    forward, forward_hooked, greedy_generate, predict_next, predict_next_f64, teacher_forced_argmax,
    ActivationTrace, Injection,
};
pub(crate) use forward::{forward_cache, ForwardCache};
pub use simulate::PatchSimulator;
pub use train::{token_accuracy, train, TrainConfig, TrainReport};

pub type TokenId = usize;

pub const INIT_STD: f32 = 0.02;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// vocab 101, d_model 64, d_ff 256, 4 layers, 4 heads, max_seq 64.
    pub fn reference(seed: u64) -> Self {
        Self {
            vocab_size: 101,
            d_model: 64,
            d_ff: 256,
            n_layers: 4,
            n_heads: 4,
            max_seq: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff < self.d_model {
            return Err(Error::Config(format!(
                "d_ff {} smaller than d_model {}",
                self.d_ff, self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn neuron_count(&self) -> usize {
        self.n_layers * self.d_ff
    }
}

// ---------------------------------------------------------------------------
// NeuronRef
// ---------------------------------------------------------------------------

/// One FFN hidden unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: usize,
    pub unit: usize,
}

impl NeuronRef {
    pub fn new(layer: usize, unit: usize) -> Self {
        Self { layer, unit }
    }

    /// Position in layer-major order.
    pub fn flat_index(self, d_ff: usize) -> usize {
        self.layer * d_ff + self.unit
    }

    pub fn from_flat(index: usize, d_ff: usize) -> Self {
        Self {
            layer: index / d_ff,
            unit: index % d_ff,
        }
    }
}

impl fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.U{}", self.layer, self.unit)
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    /// FFN up-projection, `d_model × d_ff`.
    pub w1: Matrix,
    pub b1: Matrix,
    /// FFN down-projection, `d_ff × d_model`. Row `u` holds the output
    /// weights of hidden unit `u`.
    pub w2: Matrix,
    pub b2: Matrix,
}

pub(crate) const TENSORS_PER_LAYER: usize = 12;

impl LayerParams {
    fn tensors(&self) -> [&Matrix; TENSORS_PER_LAYER] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; TENSORS_PER_LAYER] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    const NAMES: [&'static str; TENSORS_PER_LAYER] = [
        "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain",
        "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
    ];
}

/// All parameters of the toy LM plus per-neuron activation overrides.
///
/// The embedding and the LM head are independent matrices; input-side and
/// output-side token semantics are therefore distinct objects.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    /// `vocab × d_model`
    pub tok_emb: Matrix,
    /// `max_seq × d_model`
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Matrix,
    pub lnf_bias: Matrix,
    /// `d_model × vocab`
    pub lm_head: Matrix,
    /// `n_layers × d_ff` multiplicative overrides on FFN hidden activations.
    /// All ones unless an activation-level patch is installed.
    pub activation_scales: Matrix,
}

impl ModelState {
    /// Scaled-normal initialization (std 0.02), zero biases, unit norm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let mut gaussian = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix::new(rows, cols, data).expect("finite init")
        };
        let d = config.d_model;
        let tok_emb = gaussian(config.vocab_size, d);
        let pos_emb = gaussian(config.max_seq, d);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Matrix::filled(1, d, 1.0),
                ln1_bias: Matrix::zeros(1, d),
                wq: gaussian(d, d),
                wk: gaussian(d, d),
                wv: gaussian(d, d),
                wo: gaussian(d, d),
                ln2_gain: Matrix::filled(1, d, 1.0),
                ln2_bias: Matrix::zeros(1, d),
                w1: gaussian(d, config.d_ff),
                b1: Matrix::zeros(1, config.d_ff),
                w2: gaussian(config.d_ff, d),
                b2: Matrix::zeros(1, d),
            })
            .collect();
        let lm_head = gaussian(d, config.vocab_size);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: Matrix::filled(1, d, 1.0),
            lnf_bias: Matrix::zeros(1, d),
            lm_head,
            activation_scales: Matrix::filled(config.n_layers, config.d_ff, 1.0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn check_neuron(&self, neuron: NeuronRef) -> Result<()> {
        if neuron.layer >= self.config.n_layers || neuron.unit >= self.config.d_ff {
            return Err(Error::NeuronOutOfRange(neuron));
        }
        Ok(())
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// The output weights of one FFN neuron (its row of the down-projection).
    pub fn neuron_params(&self, neuron: NeuronRef) -> Result<&[f32]> {
        self.check_neuron(neuron)?;
        Ok(self.layers[neuron.layer].w2.row(neuron.unit))
    }

    pub fn set_neuron_params(&mut self, neuron: NeuronRef, values: &[f32]) -> Result<()> {
        self.check_neuron(neuron)?;
        if values.len() != self.config.d_model {
            return Err(Error::Shape {
                op: "set_neuron_params",
                left: (1, self.config.d_model),
                right: (1, values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("set_neuron_params"));
        }
        self.layers[neuron.layer]
            .w2
            .row_mut(neuron.unit)
            .copy_from_slice(values);
        Ok(())
    }

    pub fn activation_scale(&self, neuron: NeuronRef) -> Result<f32> {
        self.check_neuron(neuron)?;
        Ok(self.activation_scales.get(neuron.layer, neuron.unit))
    }

    pub fn set_activation_scale(&mut self, neuron: NeuronRef, scale: f32) -> Result<()> {
        self.check_neuron(neuron)?;
        if !scale.is_finite() {
            return Err(Error::NonFinite("set_activation_scale"));
        }
        self.activation_scales.set(neuron.layer, neuron.unit, scale);
        Ok(())
    }

    pub fn reset_activation_scales(&mut self) {
        self.activation_scales = Matrix::filled(self.config.n_layers, self.config.d_ff, 1.0);
    }

    pub fn scales_are_identity(&self) -> bool {
        self.activation_scales.as_slice().iter().all(|&s| s == 1.0)
    }

    /// Trainable tensors in canonical order.
    pub fn trainable(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.lm_head]);
        out
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.lm_head]);
        out
    }

    /// Every tensor with its checkpoint name, trainable ones first and the
    /// activation overrides last.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("ln_f.gain".to_string(), &self.lnf_gain));
        out.push(("ln_f.bias".to_string(), &self.lnf_bias));
        out.push(("lm_head".to_string(), &self.lm_head));
        out.push(("activation_scales".to_string(), &self.activation_scales));
        out
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in LayerParams::NAMES.iter().zip(layer.tensors_mut()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("ln_f.gain".to_string(), &mut self.lnf_gain));
        out.push(("ln_f.bias".to_string(), &mut self.lnf_bias));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out.push(("activation_scales".to_string(), &mut self.activation_scales));
        out
    }

    /// SHA-256 over every tensor (names, shapes and payloads), including the
    /// activation overrides.
    pub fn digest(&self) -> String {
        checkpoint::digest_tensors(self.named_tensors().into_iter())
    }

    /// Like [`digest`](Self::digest) but over weight tensors only.
    pub fn weights_digest(&self) -> String {
        checkpoint::digest_tensors(
            self.named_tensors()
                .into_iter()
                .filter(|(name, _)| name != "activation_scales"),
        )
    }

    pub fn scales_digest(&self) -> String {
        checkpoint::digest_tensors(std::iter::once((
            "activation_scales".to_string(),
            &self.activation_scales,
        )))
    }
}

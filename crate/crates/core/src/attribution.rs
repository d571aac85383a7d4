//! Per-neuron contribution scores at the last input position.

use std::fmt;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_cache, logit_grads, ForwardCache, ModelState, NeuronRef, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    /// `|∂logit/∂a · a|`
    Ixg,
    /// `|a|`
    Actv,
    /// i.i.d. uniform `[0, 1)`
    Rand,
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ixg => "ixg",
            Self::Actv => "actv",
            Self::Rand => "rand",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionScores {
    pub method: AttributionMethod,
    pub wrt: Option<TokenId>,
    pub rng_seed: Option<u64>,
    pub d_ff: usize,
    /// Layer-major, one entry per FFN neuron.
    pub scores: Vec<f64>,
}

impl AttributionScores {
    pub fn get(&self, neuron: NeuronRef) -> f64 {
        self.scores[neuron.flat_index(self.d_ff)]
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronRef, f64)> + '_ {
        self.scores
            .iter()
            .enumerate()
            .map(|(i, &s)| (NeuronRef::from_flat(i, self.d_ff), s))
    }
}

fn last_activations(state: &ModelState, cache: &ForwardCache) -> Vec<f64> {
    let ff = state.config().d_ff;
    let len = cache.len();
    cache
        .layers
        .iter()
        .flat_map(|c| c.act[(len - 1) * ff..len * ff].iter().copied())
        .collect()
}

/// Input×Gradient scores from an existing forward cache.
pub(crate) fn ixg_from_cache(state: &ModelState, cache: &ForwardCache, wrt: TokenId) -> Result<AttributionScores> {
    let grads = logit_grads(state, cache, wrt)?;
    let acts = last_activations(state, cache);
    let scores: Vec<f64> = grads.iter().zip(&acts).map(|(g, a)| (g * a).abs()).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("attribute_ixg"));
    }
    Ok(AttributionScores {
        method: AttributionMethod::Ixg,
        wrt: Some(wrt),
        rng_seed: None,
        d_ff: state.config().d_ff,
        scores,
    })
}

pub fn attribute_ixg(state: &ModelState, tokens: &[TokenId], wrt: TokenId) -> Result<AttributionScores> {
    ixg_from_cache(state, &forward_cache(state, tokens)?, wrt)
}

pub(crate) fn actv_from_cache(state: &ModelState, cache: &ForwardCache) -> AttributionScores {
    AttributionScores {
        method: AttributionMethod::Actv,
        wrt: None,
        rng_seed: None,
        d_ff: state.config().d_ff,
        scores: last_activations(state, cache).iter().map(|a| a.abs()).collect(),
    }
}

pub fn attribute_actv(state: &ModelState, tokens: &[TokenId]) -> Result<AttributionScores> {
    Ok(actv_from_cache(state, &forward_cache(state, tokens)?))
}

pub fn attribute_rand(state: &ModelState, seed: u64) -> AttributionScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AttributionScores {
        method: AttributionMethod::Rand,
        wrt: None,
        rng_seed: Some(seed),
        d_ff: state.config().d_ff,
        scores: (0..state.config().neuron_count())
            .map(|_| rng.random::<f64>())
            .collect(),
    }
}

/// All neurons by descending score; ties go to the lower (layer, unit).
pub fn ranking(scores: &AttributionScores) -> Vec<NeuronRef> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]).then(a.cmp(&b)));
    idx.into_iter()
        .map(|i| NeuronRef::from_flat(i, scores.d_ff))
        .collect()
}

pub fn top_candidates(scores: &AttributionScores, n: usize) -> Vec<NeuronRef> {
    let mut r = ranking(scores);
    r.truncate(n);
    r
}

/// CSV: `layer,unit,method,score,rank` in rank order.
pub fn attribution_csv(scores: &AttributionScores) -> String {
    let mut out = String::from("layer,unit,method,score,rank\n");
    for (rank, n) in ranking(scores).into_iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{}",
            n.layer,
            n.unit,
            scores.method,
            scores.get(n),
            rank + 1
        )
        .expect("write to string");
    }
    out
}

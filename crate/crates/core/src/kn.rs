//! Knowledge-neuron baseline: locate neurons by attribution averaged over
//! parallel prompts, then scale their activations. Weights are never touched.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::{ixg_from_cache, AttributionScores};
use crate::error::{Error, Result};
use crate::model::{forward_cache, forward_hooked, ModelState, NeuronRef, TokenId};
use crate::numerics::{argmax_f64, softmax_f64};
use crate::patcher::PatchKind;
use crate::repair::{AppliedPatch, FailureCase, PatchRecord, RepairConfig, RepairOutcome, RepairStatus};

pub const AMPLIFY_SCALE: f32 = 2.0;
pub const SUPPRESS_SCALE: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnRole {
    Amplify,
    Suppress,
}

impl KnRole {
    pub fn scale(self) -> f32 {
        match self {
            Self::Amplify => AMPLIFY_SCALE,
            Self::Suppress => SUPPRESS_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnPatch {
    pub neuron: NeuronRef,
    pub scale: f32,
    pub role: KnRole,
    /// Override in place before this patch.
    pub previous_scale: f32,
    /// Averaged attribution that selected the neuron.
    pub score: f64,
}

pub fn install(state: &mut ModelState, neuron: NeuronRef, role: KnRole, score: f64) -> Result<KnPatch> {
    let previous_scale = state.activation_scale(neuron)?;
    state.set_activation_scale(neuron, previous_scale * role.scale())?;
    Ok(KnPatch {
        neuron,
        scale: role.scale(),
        role,
        previous_scale,
        score,
    })
}

pub fn remove(state: &mut ModelState, patch: &KnPatch) -> Result<()> {
    if state.activation_scale(patch.neuron)? != patch.previous_scale * patch.scale {
        return Err(Error::RevertMismatch(patch.neuron));
    }
    state.set_activation_scale(patch.neuron, patch.previous_scale)
}

/// Corpus prompts keyed by the token that follows them.
#[derive(Debug, Clone)]
pub struct ParallelIndex {
    sequences: Vec<Vec<TokenId>>,
    /// (sequence, position of the next token), in corpus order.
    by_next: HashMap<TokenId, Vec<(usize, usize)>>,
}

impl ParallelIndex {
    pub fn new(sequences: Vec<Vec<TokenId>>) -> Self {
        let mut by_next: HashMap<TokenId, Vec<(usize, usize)>> = HashMap::new();
        for (si, seq) in sequences.iter().enumerate() {
            for (pos, &t) in seq.iter().enumerate().skip(1) {
                by_next.entry(t).or_default().push((si, pos));
            }
        }
        Self { sequences, by_next }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelData {
    pub prompts: Vec<Vec<TokenId>>,
    /// How many fewer than requested were found.
    pub shortfall: usize,
}

/// The first `k` distinct corpus prompts whose next token is the case's
/// target, excluding the case's own prompt.
pub fn collect_parallel(index: &ParallelIndex, case: &FailureCase, k: usize) -> ParallelData {
    let mut seen: HashSet<&[TokenId]> = HashSet::new();
    let mut prompts = Vec::new();
    if let Some(hits) = index.by_next.get(&case.target) {
        for &(si, pos) in hits {
            if prompts.len() == k {
                break;
            }
            let prompt = &index.sequences[si][..pos];
            if prompt == case.prompt.as_slice() || !seen.insert(prompt) {
                continue;
            }
            prompts.push(prompt.to_vec());
        }
    }
    ParallelData {
        shortfall: k - prompts.len(),
        prompts,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnLocation {
    pub amplify: Vec<(NeuronRef, f64)>,
    pub suppress: Vec<(NeuronRef, f64)>,
}

fn mean_scores(all: &[AttributionScores]) -> Vec<f64> {
    let n = all.len() as f64;
    let mut out = vec![0.0; all[0].len()];
    for s in all {
        for (o, &x) in out.iter_mut().zip(&s.scores) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

fn ranked(scores: &[f64], d_ff: usize) -> impl Iterator<Item = (NeuronRef, f64)> + '_ {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().map(move |i| (NeuronRef::from_flat(i, d_ff), scores[i]))
}

/// Input×Gradient averaged over the parallel prompts, toward the target
/// (amplify) and toward the wrong argmax (suppress). A neuron in both top
/// sets is amplified only and the suppress set takes the next in line.
pub fn kn_locate(
    state: &ModelState,
    prompts: &[Vec<TokenId>],
    target: TokenId,
    argmax: TokenId,
    top_k: usize,
) -> Result<KnLocation> {
    kn_locate_excluding(state, prompts, target, argmax, top_k, &[])
}

/// [`kn_locate`] over the neurons not in `exclude`.
pub fn kn_locate_excluding(
    state: &ModelState,
    prompts: &[Vec<TokenId>],
    target: TokenId,
    argmax: TokenId,
    top_k: usize,
    exclude: &[NeuronRef],
) -> Result<KnLocation> {
    if prompts.is_empty() {
        return Err(Error::Empty("kn_locate"));
    }
    let mut toward_target = Vec::with_capacity(prompts.len());
    let mut toward_argmax = Vec::with_capacity(prompts.len());
    for p in prompts {
        let cache = forward_cache(state, p)?;
        toward_target.push(ixg_from_cache(state, &cache, target)?);
        toward_argmax.push(ixg_from_cache(state, &cache, argmax)?);
    }
    let d_ff = state.config().d_ff;
    let amplify: Vec<_> = ranked(&mean_scores(&toward_target), d_ff)
        .filter(|(n, _)| !exclude.contains(n))
        .take(top_k)
        .collect();
    let suppress = ranked(&mean_scores(&toward_argmax), d_ff)
        .filter(|(n, _)| !exclude.contains(n) && !amplify.iter().any(|(a, _)| a == n))
        .take(top_k)
        .collect();
    Ok(KnLocation { amplify, suppress })
}

pub fn kn_repair(
    state: &mut ModelState,
    case: &FailureCase,
    cfg: &RepairConfig,
    parallel: Option<&ParallelIndex>,
) -> Result<RepairOutcome> {
    let start = Instant::now();
    let target = case.target;
    let mut out = RepairOutcome::new(case, cfg);
    let probs_now = |state: &ModelState| -> Result<(TokenId, Vec<f64>)> {
        let logits = forward_hooked(state, &case.prompt, None)?;
        Ok((argmax_f64(&logits)?, softmax_f64(&logits)))
    };
    let (mut argmax, mut probs) = probs_now(state)?;
    out.forward_passes += 1;
    if argmax == target {
        return Err(Error::NotAFailure { target });
    }
    out.p_target_trajectory.push(probs[target]);

    let data = match parallel {
        Some(index) => collect_parallel(index, case, cfg.parallel_k),
        None => ParallelData {
            prompts: Vec::new(),
            shortfall: cfg.parallel_k,
        },
    };
    if data.prompts.is_empty() {
        out.note = Some("no parallel data".into());
        out.elapsed_seconds = start.elapsed().as_secs_f64();
        return Ok(out);
    }
    if data.shortfall > 0 {
        out.note = Some(format!("parallel data shortfall {}", data.shortfall));
    }

    let mut installed: Vec<KnPatch> = Vec::new();
    while installed.len() < cfg.quota {
        let done: Vec<NeuronRef> = installed.iter().map(|p| p.neuron).collect();
        let loc = kn_locate_excluding(state, &data.prompts, target, argmax, cfg.kn_top_k, &done)?;
        out.forward_passes += 3 * data.prompts.len();
        let mut pool: Vec<(NeuronRef, f64, KnRole)> = loc
            .amplify
            .iter()
            .map(|&(n, s)| (n, s, KnRole::Amplify))
            .chain(loc.suppress.iter().map(|&(n, s)| (n, s, KnRole::Suppress)))
            .collect();
        pool.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let Some(&(neuron, score, role)) = pool.first() else {
            out.note = Some("no new neurons located".into());
            break;
        };
        let before = probs[target];
        installed.push(install(state, neuron, role, score)?);
        (argmax, probs) = probs_now(state)?;
        out.forward_passes += 1;
        out.p_target_trajectory.push(probs[target]);
        out.records.push(PatchRecord {
            case_id: case.case_id.clone(),
            layer: neuron.layer,
            unit: neuron.unit,
            alpha: None,
            kind: PatchKind::KnActivation,
            p_target_before: before,
            p_target_after: probs[target],
            gain: score,
            retained: true,
        });
        if argmax == target {
            out.status = RepairStatus::Solved;
            break;
        }
    }

    out.patches = installed.into_iter().map(AppliedPatch::Activation).collect();
    if !out.is_solved() {
        crate::repair::revert_outcome(state, &mut out)?;
    }
    out.neurons_patched = if out.is_solved() { out.patches.len() } else { 0 };
    out.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

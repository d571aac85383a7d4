//! Neuron patches: coefficient search, application, gain estimation, revert.
//!
//! A MINT patch moves a neuron's output row `r` toward the steer `s`:
//! `r' = (r + α·s) / (1 + α)`. The plain variant adds the steer outright.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionScores;
use crate::error::{Error, Result};
use crate::model::{ModelState, NeuronRef, PatchSimulator, TokenId};
use crate::numerics::{argmax_f64, Vector};
use crate::semantics::SemanticSteer;

pub const ALPHA_GRID: [f64; 10] = [0.0625, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

/// Two target probabilities closer than this count as equal; the smaller
/// coefficient then wins.
pub const ALPHA_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    Mint,
    EstPlain,
    EstBasis,
    KnActivation,
}

impl PatchKind {
    /// Whether the patch uses a searched coefficient.
    pub fn uses_alpha(self) -> bool {
        matches!(self, Self::Mint | Self::EstBasis)
    }
}

impl fmt::Display for PatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mint => "mint",
            Self::EstPlain => "est_plain",
            Self::EstBasis => "est_basis",
            Self::KnActivation => "kn_activation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub neuron: NeuronRef,
    pub old_params: Vector,
    pub new_params: Vector,
    /// `None` for the plain variant, which has no coefficient.
    pub alpha: Option<f64>,
    pub steer: SemanticSteer,
    pub kind: PatchKind,
    #[serde(skip)]
    reverted: bool,
}

impl Patch {
    pub fn is_reverted(&self) -> bool {
        self.reverted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEstimate {
    pub neuron: NeuronRef,
    pub gain: f64,
    /// Best coefficient, when one was searched during estimation.
    pub alpha: Option<f64>,
    pub p_target_after: Option<f64>,
    pub p_argmax_after: Option<f64>,
}

/// The replacement row for `old` under a patch with coefficient `alpha`
/// (`None`: plain addition of the steer).
pub fn patched_row(old: &[f32], steer: &[f32], alpha: Option<f64>) -> Vec<f32> {
    old.iter()
        .zip(steer)
        .map(|(&r, &s)| {
            let (r, s) = (f64::from(r), f64::from(s));
            match alpha {
                Some(a) => ((r + a * s) / (1.0 + a)) as f32,
                None => (r + s) as f32,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaChoice {
    pub alpha: f64,
    pub p_target: f64,
    /// Next-token distribution with the chosen patch in place.
    pub probs: Vec<f64>,
}

/// Smallest grid coefficient whose patch maximizes the target probability.
pub fn search_alpha_sim(
    sim: &PatchSimulator<'_>,
    state: &ModelState,
    neuron: NeuronRef,
    steer: &SemanticSteer,
    target: TokenId,
) -> Result<AlphaChoice> {
    let old = state.neuron_params(neuron)?;
    let rows: Vec<Vec<f32>> = ALPHA_GRID
        .iter()
        .map(|&a| patched_row(old, steer.direction.as_slice(), Some(a)))
        .collect();
    let all = sim.probs_with_rows(neuron, &rows)?;
    let mut best = 0;
    for (i, probs) in all.iter().enumerate().skip(1) {
        if probs[target] > all[best][target] + ALPHA_TIE_TOLERANCE {
            best = i;
        }
    }
    let probs = all.into_iter().nth(best).expect("grid is nonempty");
    Ok(AlphaChoice {
        alpha: ALPHA_GRID[best],
        p_target: probs[target],
        probs,
    })
}

pub fn search_alpha(
    state: &ModelState,
    tokens: &[TokenId],
    neuron: NeuronRef,
    steer: &SemanticSteer,
    target: TokenId,
) -> Result<(f64, f64)> {
    let sim = PatchSimulator::new(state, tokens)?;
    let choice = search_alpha_sim(&sim, state, neuron, steer, target)?;
    Ok((choice.alpha, choice.p_target))
}

pub fn apply_patch(
    state: &mut ModelState,
    neuron: NeuronRef,
    steer: &SemanticSteer,
    alpha: Option<f64>,
    kind: PatchKind,
) -> Result<Patch> {
    match (kind, alpha) {
        (PatchKind::KnActivation, _) => {
            return Err(Error::Data("activation overrides are installed by the KN baseline".into()))
        }
        (PatchKind::EstPlain, Some(_)) => {
            return Err(Error::Data("plain patches take no coefficient".into()))
        }
        (PatchKind::Mint | PatchKind::EstBasis, None) => {
            return Err(Error::Data(format!("{kind} patches need a coefficient")))
        }
        (_, Some(a)) if !(a >= 0.0) || !a.is_finite() => {
            return Err(Error::Data(format!("coefficient {a} must be finite and >= 0")))
        }
        _ => {}
    }
    let old = state.neuron_params(neuron)?.to_vec();
    if steer.direction.dim() != old.len() {
        return Err(Error::Shape {
            op: "apply_patch",
            left: (1, old.len()),
            right: (1, steer.direction.dim()),
        });
    }
    let new = patched_row(&old, steer.direction.as_slice(), alpha);
    state.set_neuron_params(neuron, &new)?;
    Ok(Patch {
        neuron,
        old_params: Vector::new(old)?,
        new_params: Vector::new(new)?,
        alpha,
        steer: steer.clone(),
        kind,
        reverted: false,
    })
}

pub fn revert(state: &mut ModelState, patch: &mut Patch) -> Result<()> {
    if patch.reverted {
        return Err(Error::AlreadyReverted(patch.neuron));
    }
    if state.neuron_params(patch.neuron)? != patch.new_params.as_slice() {
        return Err(Error::RevertMismatch(patch.neuron));
    }
    state.set_neuron_params(patch.neuron, patch.old_params.as_slice())?;
    patch.reverted = true;
    Ok(())
}

/// Undo a list of patches, last first.
pub fn revert_all(state: &mut ModelState, patches: &mut [Patch]) -> Result<()> {
    for p in patches.iter_mut().rev() {
        revert(state, p)?;
    }
    Ok(())
}

/// Gap reduction `(p_a − p_t)_before − (p_a − p_t)_after` of the best
/// simulated patch for `neuron`.
pub fn patching_gain_sim(
    sim: &PatchSimulator<'_>,
    state: &ModelState,
    neuron: NeuronRef,
    steer: &SemanticSteer,
    kind: PatchKind,
    target: TokenId,
    argmax: TokenId,
) -> Result<GainEstimate> {
    let before = sim.base_probs();
    let gap_before = before[argmax] - before[target];
    let (alpha, after) = if kind.uses_alpha() {
        let choice = search_alpha_sim(sim, state, neuron, steer, target)?;
        (Some(choice.alpha), choice.probs)
    } else {
        let row = patched_row(state.neuron_params(neuron)?, steer.direction.as_slice(), None);
        let probs = sim
            .probs_with_rows(neuron, &[row])?
            .pop()
            .expect("one row in, one distribution out");
        (None, probs)
    };
    let gap_after = after[argmax] - after[target];
    Ok(GainEstimate {
        neuron,
        gain: gap_before - gap_after,
        alpha,
        p_target_after: Some(after[target]),
        p_argmax_after: Some(after[argmax]),
    })
}

pub fn patching_gain(
    state: &ModelState,
    tokens: &[TokenId],
    neuron: NeuronRef,
    steer: &SemanticSteer,
    target: TokenId,
    argmax: TokenId,
) -> Result<GainEstimate> {
    let sim = PatchSimulator::new(state, tokens)?;
    patching_gain_sim(&sim, state, neuron, steer, PatchKind::Mint, target, argmax)
}

/// The attribution score stands in for the gain; the coefficient is
/// searched only when the neuron is actually patched.
pub fn gain_from_score(scores: &AttributionScores, neuron: NeuronRef) -> GainEstimate {
    GainEstimate {
        neuron,
        gain: scores.get(neuron),
        alpha: None,
        p_target_after: None,
        p_argmax_after: None,
    }
}

/// Highest gain; ties go to the lower (layer, unit).
pub fn best_gain(estimates: &[GainEstimate]) -> Option<&GainEstimate> {
    estimates.iter().reduce(|best, e| {
        if e.gain > best.gain || (e.gain == best.gain && e.neuron < best.neuron) {
            e
        } else {
            best
        }
    })
}

/// Whether the model's argmax at `tokens` is currently `target`.
pub fn predicts(state: &ModelState, tokens: &[TokenId], target: TokenId) -> Result<bool> {
    let logits = crate::model::forward_hooked(state, tokens, None)?;
    Ok(argmax_f64(&logits)? == target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_next_f64, ModelConfig};

    fn steer(v: &[f32]) -> SemanticSteer {
        SemanticSteer {
            direction: Vector::new(v.to_vec()).unwrap(),
            target: 1,
            argmax: Some(0),
        }
    }

    fn tiny() -> ModelState {
        ModelState::init(ModelConfig {
            vocab_size: 2,
            d_model: 2,
            d_ff: 2,
            n_layers: 1,
            n_heads: 1,
            max_seq: 4,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn hand_evaluated_patch() {
        let mut s = tiny();
        let n = NeuronRef::new(0, 0);
        s.set_neuron_params(n, &[1.0, 0.0]).unwrap();
        let p = apply_patch(&mut s, n, &steer(&[0.0, 1.0]), Some(1.0), PatchKind::Mint).unwrap();
        assert_eq!(p.new_params.as_slice(), &[0.5, 0.5]);
        assert_eq!(s.neuron_params(n).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn coefficient_limits() {
        let old = [0.3f32, -0.7];
        let dir = [0.6f32, 0.8];
        assert_eq!(patched_row(&old, &dir, Some(0.0)), old.to_vec());
        let far = patched_row(&old, &dir, Some(1e6));
        assert!((far[0] - 0.6).abs() < 1e-3 && (far[1] - 0.8).abs() < 1e-3);
        assert_eq!(patched_row(&old, &dir, None), vec![0.3 + 0.6, -0.7 + 0.8]);
    }

    #[test]
    fn revert_restores_and_refuses_twice() {
        let mut s = tiny();
        let before = s.clone();
        let n = NeuronRef::new(0, 1);
        let mut p = apply_patch(&mut s, n, &steer(&[0.6, 0.8]), Some(2.0), PatchKind::Mint).unwrap();
        assert_ne!(s, before);
        revert(&mut s, &mut p).unwrap();
        assert_eq!(s, before);
        assert!(matches!(revert(&mut s, &mut p), Err(Error::AlreadyReverted(_))));
    }

    #[test]
    fn revert_detects_foreign_writes() {
        let mut s = tiny();
        let n = NeuronRef::new(0, 1);
        let mut p = apply_patch(&mut s, n, &steer(&[0.6, 0.8]), Some(2.0), PatchKind::Mint).unwrap();
        s.set_neuron_params(n, &[9.0, 9.0]).unwrap();
        assert!(matches!(revert(&mut s, &mut p), Err(Error::RevertMismatch(_))));
    }

    #[test]
    fn kind_and_coefficient_must_agree() {
        let mut s = tiny();
        let n = NeuronRef::new(0, 0);
        let st = steer(&[1.0, 0.0]);
        assert!(apply_patch(&mut s, n, &st, Some(1.0), PatchKind::EstPlain).is_err());
        assert!(apply_patch(&mut s, n, &st, None, PatchKind::Mint).is_err());
        assert!(apply_patch(&mut s, n, &st, Some(-1.0), PatchKind::Mint).is_err());
        let p = apply_patch(&mut s, n, &st, None, PatchKind::EstPlain).unwrap();
        assert_eq!(p.alpha, None);
    }

    #[test]
    fn zero_effect_direction_picks_smallest_alpha() {
        // With a dead head nothing the neuron does reaches the logits.
        let mut s = tiny();
        s.lm_head.as_mut_slice().fill(0.0);
        let (alpha, p) = search_alpha(&s, &[0, 1], NeuronRef::new(0, 0), &steer(&[0.6, 0.8]), 1).unwrap();
        assert_eq!(alpha, ALPHA_GRID[0]);
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unchanged_model_has_zero_gain() {
        let mut s = tiny();
        s.lm_head.as_mut_slice().fill(0.0);
        let g = patching_gain(&s, &[0, 1], NeuronRef::new(0, 0), &steer(&[0.6, 0.8]), 1, 0).unwrap();
        assert_eq!(g.gain, 0.0);
    }

    #[test]
    fn gain_matches_brute_force() {
        let mut s = ModelState::init(ModelConfig {
            vocab_size: 7,
            d_model: 8,
            d_ff: 16,
            n_layers: 2,
            n_heads: 2,
            max_seq: 6,
            seed: 8,
        })
        .unwrap();
        let tokens = [1, 2, 3];
        let (argmax, _) = predict_next_f64(&s, &tokens).unwrap();
        let target = (argmax + 1) % 7;
        let dir: Vec<f32> = (0..8).map(|i| if i == 2 { 1.0 } else { 0.0 }).collect();
        let st = steer(&dir);
        let n = NeuronRef::new(0, 5);
        let hash = s.digest();
        let g = patching_gain(&s, &tokens, n, &st, target, argmax).unwrap();
        assert_eq!(s.digest(), hash);

        let (_, before) = predict_next_f64(&s, &tokens).unwrap();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for &a in &ALPHA_GRID {
            let mut p = apply_patch(&mut s, n, &st, Some(a), PatchKind::Mint).unwrap();
            let (_, probs) = predict_next_f64(&s, &tokens).unwrap();
            revert(&mut s, &mut p).unwrap();
            if best.as_ref().is_none_or(|(_, b)| probs[target] > b[target] + ALPHA_TIE_TOLERANCE) {
                best = Some((a, probs));
            }
        }
        let (a, after) = best.unwrap();
        let want = (before[argmax] - before[target]) - (after[argmax] - after[target]);
        assert_eq!(g.alpha, Some(a));
        assert!((g.gain - want).abs() < 1e-12);
    }

    #[test]
    fn best_gain_tie_rule() {
        let e = |layer, unit, gain| GainEstimate {
            neuron: NeuronRef::new(layer, unit),
            gain,
            alpha: None,
            p_target_after: None,
            p_argmax_after: None,
        };
        let v = vec![e(1, 0, 0.5), e(0, 3, 0.5), e(0, 1, 0.2)];
        assert_eq!(best_gain(&v).unwrap().neuron, NeuronRef::new(0, 3));
        assert!(best_gain(&[]).is_none());
    }
}

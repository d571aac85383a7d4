//! The quota-bounded locate-then-patch loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{actv_from_cache, attribute_rand, ixg_from_cache, ranking};
use crate::error::{Error, Result};
use crate::kn::{self, KnPatch, ParallelIndex};
use crate::model::{greedy_generate, predict_next_f64, ModelState, NeuronRef, PatchSimulator, TokenId};
use crate::numerics::argmax_f64;
use crate::patcher::{
    apply_patch, best_gain, gain_from_score, patching_gain_sim, revert, search_alpha_sim, GainEstimate, Patch,
    PatchKind,
};
use crate::seeds::{self, Component};
use crate::semantics::{semantic_steer, semantic_steer_basis_only, BasesCache};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureCase {
    pub case_id: String,
    pub prompt: Vec<TokenId>,
    pub target: TokenId,
    pub argmax_before: TokenId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairStatus {
    Solved,
    Skipped,
    Degenerate,
    /// Accumulated patches from earlier cases had already fixed this one.
    AlreadyCorrect,
}

impl fmt::Display for RepairStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Solved => "solved",
            Self::Skipped => "skipped",
            Self::Degenerate => "degenerate",
            Self::AlreadyCorrect => "already_correct",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mint,
    Kn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    None,
    AttrActv,
    AttrRand,
    EstBasis,
    EstPlain,
    GainScore,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::None,
        Variant::AttrActv,
        Variant::AttrRand,
        Variant::EstBasis,
        Variant::EstPlain,
        Variant::GainScore,
    ];

    fn patch_kind(self) -> PatchKind {
        match self {
            Self::EstBasis => PatchKind::EstBasis,
            Self::EstPlain => PatchKind::EstPlain,
            _ => PatchKind::Mint,
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mint" => Ok(Self::Mint),
            "kn" => Ok(Self::Kn),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mint => "mint",
            Self::Kn => "kn",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::AttrActv => "attr-actv",
            Self::AttrRand => "attr-rand",
            Self::EstBasis => "est-basis",
            Self::EstPlain => "est-plain",
            Self::GainScore => "gain-score",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepairConfig {
    pub method: Method,
    pub variant: Variant,
    pub quota: usize,
    pub candidates: usize,
    /// Parallel prompts gathered per case (KN).
    pub parallel_k: usize,
    /// Neurons located per role (KN).
    pub kn_top_k: usize,
    /// Root seed; random attribution draws from it.
    pub seed: u64,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            method: Method::Mint,
            variant: Variant::None,
            quota: 5,
            candidates: 10,
            parallel_k: 10,
            kn_top_k: 2,
            seed: 0,
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Kn && self.variant != Variant::None {
            return Err(Error::Config("variants apply to mint only".into()));
        }
        if self.candidates == 0 && self.method == Method::Mint {
            return Err(Error::Config("candidates must be >= 1".into()));
        }
        Ok(())
    }

    /// `mint`, `kn`, or `mint[variant]`.
    pub fn label(&self) -> String {
        match (self.method, self.variant) {
            (Method::Mint, Variant::None) => "mint".into(),
            (Method::Mint, v) => format!("mint[{v}]"),
            (Method::Kn, _) => "kn".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AppliedPatch {
    Weight(Patch),
    Activation(KnPatch),
}

impl AppliedPatch {
    pub fn neuron(&self) -> NeuronRef {
        match self {
            Self::Weight(p) => p.neuron,
            Self::Activation(p) => p.neuron,
        }
    }
}

/// One line of the patch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub case_id: String,
    pub layer: usize,
    pub unit: usize,
    pub alpha: Option<f64>,
    pub kind: PatchKind,
    pub p_target_before: f64,
    pub p_target_after: f64,
    pub gain: f64,
    /// False when the patch was rolled back because the case was skipped.
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub case_id: String,
    pub method: String,
    pub status: RepairStatus,
    pub patches: Vec<AppliedPatch>,
    pub neurons_patched: usize,
    /// Target probability at the start of each iteration and at the end.
    pub p_target_trajectory: Vec<f64>,
    pub records: Vec<PatchRecord>,
    /// Forward passes spent, including simulated ones.
    pub forward_passes: usize,
    pub note: Option<String>,
    /// Wall-clock time; kept out of serialized logs so they stay reproducible.
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

impl RepairOutcome {
    pub fn new(case: &FailureCase, cfg: &RepairConfig) -> Self {
        Self {
            case_id: case.case_id.clone(),
            method: cfg.label(),
            status: RepairStatus::Skipped,
            patches: Vec::new(),
            neurons_patched: 0,
            p_target_trajectory: Vec::new(),
            records: Vec::new(),
            forward_passes: 0,
            note: None,
            elapsed_seconds: 0.0,
        }
    }

    pub fn is_solved(&self) -> bool {
        self.status == RepairStatus::Solved
    }
}

/// Shared, read-mostly inputs of a repair session.
pub struct RepairContext<'a> {
    pub bases: BasesCache,
    /// Corpus used by KN to gather parallel prompts.
    pub parallel: Option<&'a ParallelIndex>,
}

impl<'a> RepairContext<'a> {
    pub fn new(parallel: Option<&'a ParallelIndex>) -> Self {
        Self {
            bases: BasesCache::new(),
            parallel,
        }
    }
}

fn case_counter(case_id: &str) -> u64 {
    let d = Sha256::digest(case_id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Undo every patch of an outcome, newest first, and clear its retained flag.
pub fn revert_outcome(state: &mut ModelState, outcome: &mut RepairOutcome) -> Result<()> {
    for p in outcome.patches.iter_mut().rev() {
        match p {
            AppliedPatch::Weight(w) => revert(state, w)?,
            AppliedPatch::Activation(k) => kn::remove(state, k)?,
        }
    }
    outcome.records.iter_mut().for_each(|r| r.retained = false);
    Ok(())
}

pub fn repair_failure(
    state: &mut ModelState,
    case: &FailureCase,
    cfg: &RepairConfig,
    ctx: &RepairContext<'_>,
) -> Result<RepairOutcome> {
    cfg.validate()?;
    match cfg.method {
        Method::Mint => mint_repair(state, case, cfg, ctx),
        Method::Kn => kn::kn_repair(state, case, cfg, ctx.parallel),
    }
}

fn mint_repair(
    state: &mut ModelState,
    case: &FailureCase,
    cfg: &RepairConfig,
    ctx: &RepairContext<'_>,
) -> Result<RepairOutcome> {
    let start = Instant::now();
    let target = case.target;
    let mut out = RepairOutcome::new(case, cfg);
    let mut weight_patches: Vec<Patch> = Vec::new();
    let kind = cfg.variant.patch_kind();
    let counter = case_counter(&case.case_id);

    for iter in 0..=cfg.quota {
        let sim = PatchSimulator::new(state, &case.prompt)?;
        out.forward_passes += 1;
        let probs = sim.base_probs();
        let argmax = argmax_f64(sim.base_logits())?;
        if iter == 0 && argmax == target {
            return Err(Error::NotAFailure { target });
        }
        out.p_target_trajectory.push(probs[target]);
        if let Some(last) = out.records.last_mut() {
            last.p_target_after = probs[target];
        }
        if argmax == target {
            out.status = RepairStatus::Solved;
            break;
        }
        if iter == cfg.quota {
            out.status = RepairStatus::Skipped;
            break;
        }

        let bases = ctx.bases.output_bases(state)?;
        let steer = match cfg.variant {
            Variant::EstBasis => semantic_steer_basis_only(&bases, target),
            _ => semantic_steer(&bases, target, argmax),
        };
        let steer = match steer {
            Ok(s) => s,
            Err(Error::DegenerateSteer(msg)) => {
                out.status = RepairStatus::Degenerate;
                out.note = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };

        let scores = match cfg.variant {
            Variant::AttrActv => actv_from_cache(state, sim_cache(&sim)),
            Variant::AttrRand => attribute_rand(
                state,
                seeds::derive(cfg.seed, Component::AttrRand, counter.wrapping_add(iter as u64)),
            ),
            _ => ixg_from_cache(state, sim_cache(&sim), argmax)?,
        };
        let ranked = ranking(&scores);
        let patched: Vec<NeuronRef> = weight_patches.iter().map(|p| p.neuron).collect();
        let mut available: Vec<NeuronRef> = ranked
            .iter()
            .take(cfg.candidates)
            .filter(|n| !patched.contains(n))
            .copied()
            .collect();
        if available.is_empty() {
            available.extend(ranked.iter().find(|n| !patched.contains(n)));
        }

        let estimates: Vec<GainEstimate> = if cfg.variant == Variant::GainScore {
            available.iter().map(|&n| gain_from_score(&scores, n)).collect()
        } else {
            available
                .iter()
                .map(|&n| patching_gain_sim(&sim, state, n, &steer, kind, target, argmax))
                .collect::<Result<_>>()?
        };
        let chosen = best_gain(&estimates)
            .cloned()
            .ok_or_else(|| Error::Data("no candidate neurons".into()))?;
        let alpha = match kind {
            PatchKind::EstPlain => None,
            _ => match chosen.alpha {
                Some(a) => Some(a),
                None => Some(search_alpha_sim(&sim, state, chosen.neuron, &steer, target)?.alpha),
            },
        };
        out.forward_passes += sim.evaluations();
        drop(sim);

        let patch = apply_patch(state, chosen.neuron, &steer, alpha, kind)?;
        out.records.push(PatchRecord {
            case_id: case.case_id.clone(),
            layer: chosen.neuron.layer,
            unit: chosen.neuron.unit,
            alpha,
            kind,
            p_target_before: probs[target],
            p_target_after: f64::NAN,
            gain: chosen.gain,
            retained: true,
        });
        weight_patches.push(patch);
    }

    out.patches = weight_patches.into_iter().map(AppliedPatch::Weight).collect();
    if out.status != RepairStatus::Solved {
        revert_outcome(state, &mut out)?;
    }
    out.neurons_patched = if out.is_solved() { out.patches.len() } else { 0 };
    out.elapsed_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

fn sim_cache<'s>(sim: &'s PatchSimulator<'_>) -> &'s crate::model::ForwardCache {
    sim.cache()
}

/// Whether patches persist from one case to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Isolation {
    /// Every case starts from the pristine model.
    Fresh,
    /// Patches of solved cases stay in place for later cases.
    Accumulate,
}

impl FromStr for Isolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(Self::Fresh),
            "accumulate" => Ok(Self::Accumulate),
            other => Err(Error::Config(format!("unknown isolation mode {other:?}"))),
        }
    }
}

impl fmt::Display for Isolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fresh => "fresh",
            Self::Accumulate => "accumulate",
        })
    }
}

/// Repair every case in order. In fresh mode the model is restored after
/// each case and its full digest checked against the pristine one.
pub fn repair_suite(
    state: &mut ModelState,
    cases: &[FailureCase],
    cfg: &RepairConfig,
    isolation: Isolation,
    ctx: &RepairContext<'_>,
) -> Result<Vec<RepairOutcome>> {
    let pristine = state.digest();
    let mut outcomes = Vec::with_capacity(cases.len());
    for case in cases {
        let (now, _) = predict_next_f64(state, &case.prompt)?;
        if now == case.target {
            let mut o = RepairOutcome::new(case, cfg);
            o.status = RepairStatus::AlreadyCorrect;
            outcomes.push(o);
            continue;
        }
        let outcome = repair_failure(state, case, cfg, ctx)?;
        if isolation == Isolation::Fresh {
            if outcome.is_solved() {
                let mut scratch = outcome.clone();
                revert_outcome(state, &mut scratch)?;
            }
            if state.digest() != pristine {
                return Err(Error::Data(format!(
                    "model not restored after case {}",
                    case.case_id
                )));
            }
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// Result of repairing a whole generation position by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRepair {
    pub pair_id: String,
    pub outcomes: Vec<RepairOutcome>,
    pub gen_before: Vec<TokenId>,
    pub gen_during: Vec<TokenId>,
    pub gen_after: Vec<TokenId>,
}

/// Teacher-forced pass over `truth`; every mispredicted position is
/// repaired on the growing prefix. Patches accumulate across positions and
/// are left in place; use [`revert_sequence`] to undo them.
pub fn repair_sequence(
    state: &mut ModelState,
    pair_id: &str,
    prompt: &[TokenId],
    truth: &[TokenId],
    eos: Option<TokenId>,
    cfg: &RepairConfig,
    ctx: &RepairContext<'_>,
) -> Result<SequenceRepair> {
    if truth.is_empty() {
        return Err(Error::Data(format!("{pair_id}: empty ground truth")));
    }
    let gen_before = greedy_generate(state, prompt, truth.len(), eos)?;
    let mut outcomes = Vec::new();
    let mut gen_during = Vec::with_capacity(truth.len());
    let mut prefix = prompt.to_vec();
    for (i, &gold) in truth.iter().enumerate() {
        let (pred, _) = predict_next_f64(state, &prefix)?;
        if pred == gold {
            gen_during.push(pred);
        } else {
            let case = FailureCase {
                case_id: format!("{pair_id}@{}", prompt.len() + i),
                prompt: prefix.clone(),
                target: gold,
                argmax_before: pred,
            };
            let outcome = repair_failure(state, &case, cfg, ctx)?;
            let (after, _) = predict_next_f64(state, &prefix)?;
            gen_during.push(after);
            outcomes.push(outcome);
        }
        prefix.push(gold);
    }
    let gen_after = greedy_generate(state, prompt, truth.len(), eos)?;
    Ok(SequenceRepair {
        pair_id: pair_id.to_string(),
        outcomes,
        gen_before,
        gen_during,
        gen_after,
    })
}

pub fn revert_sequence(state: &mut ModelState, rep: &mut SequenceRepair) -> Result<()> {
    for o in rep.outcomes.iter_mut().rev() {
        if o.is_solved() {
            revert_outcome(state, o)?;
        }
    }
    Ok(())
}

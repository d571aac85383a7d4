//! The two experiment protocols: patching generations position by position,
//! and probing generalization/specificity around single benchmark repairs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{benchmark_failures, probe_sets, BenchmarkSample, Grammar, SequencePair, SpecScope};
use crate::error::{Error, Result};
use crate::metrics::{
    balance_ratio, bleu4, cost_metrics, edit_similarity, exact_match, probability_shift_metrics, rouge_l,
    MetricsReport, ProbeObservation, ShiftMetrics,
};
use crate::model::{greedy_generate, predict_next_f64, ModelState, TokenId};
use crate::repair::{
    repair_failure, repair_sequence, revert_outcome, revert_sequence, Isolation, RepairConfig, RepairContext,
    RepairOutcome, RepairStatus, SequenceRepair,
};

/// Repair every pair's generation. Gen-before is always taken from the
/// model as it was on entry; on return the model is back to that state.
pub fn run_patching(
    state: &mut ModelState,
    pairs: &[SequencePair],
    cfg: &RepairConfig,
    isolation: Isolation,
    ctx: &RepairContext<'_>,
    eos: Option<TokenId>,
) -> Result<Vec<SequenceRepair>> {
    let pristine = state.digest();
    let gen_before: Vec<Vec<TokenId>> = pairs
        .iter()
        .map(|p| greedy_generate(state, &p.prompt, p.truth.len(), eos))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(pairs.len());
    for (pair, before) in pairs.iter().zip(gen_before) {
        let mut rep = repair_sequence(state, &pair.pair_id, &pair.prompt, &pair.truth, eos, cfg, ctx)?;
        rep.gen_before = before;
        if isolation == Isolation::Fresh {
            let mut scratch = rep.clone();
            revert_sequence(state, &mut scratch)?;
            check_restored(state, &pristine, &pair.pair_id)?;
        }
        out.push(rep);
    }
    if isolation == Isolation::Accumulate {
        let mut scratch = out.clone();
        for rep in scratch.iter_mut().rev() {
            revert_sequence(state, rep)?;
        }
        check_restored(state, &pristine, "accumulated suite")?;
    }
    Ok(out)
}

fn check_restored(state: &ModelState, pristine: &str, what: &str) -> Result<()> {
    if state.digest() != pristine {
        return Err(Error::Data(format!("model not restored after {what}")));
    }
    Ok(())
}

/// Outcome of one benchmark sample used as the patch set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub case_id: String,
    pub method: String,
    pub status: RepairStatus,
    pub neurons_patched: usize,
    pub forward_passes: usize,
    pub generalization: ShiftMetrics,
    pub specificity: ShiftMetrics,
    pub g_size: usize,
    pub s_size: usize,
    /// Model digest after restoring; equal to the pristine one.
    pub restored_digest: String,
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

pub fn observe(state: &ModelState, sample: &BenchmarkSample) -> Result<ProbeObservation> {
    let (argmax, probs) = predict_next_f64(state, &sample.prompt)?;
    Ok(ProbeObservation {
        p_target: probs[sample.target],
        p_argmax_token: probs[sample.argmax_expected],
        correct: argmax == sample.target,
    })
}

/// For each benchmark sample the model fails on in the designed way:
/// repair it, measure the probability shift on its G and S probe sets, and
/// restore the model. A repair that is not solved leaves the model
/// untouched and so contributes zero shift.
pub fn run_probing(
    state: &mut ModelState,
    benchmark: &[BenchmarkSample],
    cfg: &RepairConfig,
    scope: SpecScope,
    ctx: &RepairContext<'_>,
    limit: Option<usize>,
) -> Result<(Vec<ProbeRecord>, Vec<RepairOutcome>)> {
    let pristine = state.digest();
    let baseline: Vec<ProbeObservation> = benchmark
        .iter()
        .map(|s| observe(state, s))
        .collect::<Result<_>>()?;
    let mut failures = benchmark_failures(state, benchmark)?;
    if let Some(n) = limit {
        failures.truncate(n);
    }
    let mut records = Vec::with_capacity(failures.len());
    let mut outcomes = Vec::with_capacity(failures.len());
    for (idx, case) in failures {
        let start = Instant::now();
        let probes = probe_sets(benchmark, idx, scope);
        let mut outcome = repair_failure(state, &case, cfg, ctx)?;
        let shift = |ids: &[usize], state: &ModelState| -> Result<ShiftMetrics> {
            let before: Vec<ProbeObservation> = ids.iter().map(|&i| baseline[i]).collect();
            let after: Vec<ProbeObservation> = if outcome.is_solved() {
                ids.iter().map(|&i| observe(state, &benchmark[i])).collect::<Result<_>>()?
            } else {
                before.clone()
            };
            Ok(probability_shift_metrics(&before, &after))
        };
        let generalization = shift(&probes.generalization, state)?;
        let specificity = shift(&probes.specificity, state)?;
        if outcome.is_solved() {
            let mut scratch = outcome.clone();
            revert_outcome(state, &mut scratch)?;
        }
        let restored_digest = state.digest();
        check_restored(state, &pristine, &case.case_id)?;
        outcome.elapsed_seconds = start.elapsed().as_secs_f64();
        records.push(ProbeRecord {
            case_id: case.case_id.clone(),
            method: cfg.label(),
            status: outcome.status,
            neurons_patched: outcome.neurons_patched,
            forward_passes: outcome.forward_passes,
            generalization,
            specificity,
            g_size: probes.generalization.len(),
            s_size: probes.specificity.len(),
            restored_digest,
            elapsed_seconds: outcome.elapsed_seconds,
        });
        outcomes.push(outcome);
    }
    Ok((records, outcomes))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn status_rates(report: &mut MetricsReport, method: &str, dataset: &str, statuses: &[RepairStatus]) {
    let n = statuses.len() as f64;
    let rate = |s: RepairStatus| (n > 0.0).then(|| statuses.iter().filter(|&&x| x == s).count() as f64 / n);
    report.set(method, dataset, "solved_rate", rate(RepairStatus::Solved));
    report.set(method, dataset, "skipped_rate", rate(RepairStatus::Skipped));
    report.set(method, dataset, "cases", Some(n));
}

fn cost_rows(report: &mut MetricsReport, method: &str, dataset: &str, outcomes: &[RepairOutcome]) {
    let cost = cost_metrics(outcomes);
    report.set(method, dataset, "mean_neurons_per_solved", cost.map(|c| c.mean_neurons_per_solved));
    report.set(
        method,
        dataset,
        "mean_forward_passes_per_solved",
        cost.map(|c| c.mean_forward_passes_per_solved),
    );
}

/// Sequence similarity before and after repair, plus cost over all
/// repaired positions.
pub fn add_patching_metrics(
    report: &mut MetricsReport,
    method: &str,
    dataset: &str,
    grammar: &Grammar,
    pairs: &[SequencePair],
    repairs: &[SequenceRepair],
) {
    let joined: Vec<(&SequencePair, &SequenceRepair)> = pairs.iter().zip(repairs).collect();
    let text = |t: &[TokenId]| grammar.detokenize(t);
    let metric = |f: &dyn Fn(&[TokenId], &[TokenId]) -> f64, after: bool| {
        mean(joined.iter().map(|(p, r)| f(if after { &r.gen_after } else { &r.gen_before }, &p.truth)))
    };
    let edit = |a: &[TokenId], b: &[TokenId]| edit_similarity(&text(a), &text(b));
    for (name, f) in [
        ("exact_match", &exact_match as &dyn Fn(&[TokenId], &[TokenId]) -> f64),
        ("edit_similarity", &edit),
        ("bleu4", &bleu4),
        ("rouge_l", &rouge_l),
    ] {
        report.set(method, dataset, &format!("{name}_before"), metric(f, false));
        report.set(method, dataset, name, metric(f, true));
    }
    let outcomes: Vec<RepairOutcome> = repairs.iter().flat_map(|r| r.outcomes.iter().cloned()).collect();
    let statuses: Vec<RepairStatus> = outcomes.iter().map(|o| o.status).collect();
    status_rates(report, method, dataset, &statuses);
    cost_rows(report, method, dataset, &outcomes);
}

pub fn add_probing_metrics(report: &mut MetricsReport, method: &str, dataset: &str, records: &[ProbeRecord]) {
    let m = |f: &dyn Fn(&ProbeRecord) -> f64| mean(records.iter().map(f));
    let rows = [
        ("delta_acc_G", m(&|r| r.generalization.delta_acc)),
        ("delta_acc_S", m(&|r| r.specificity.delta_acc)),
        ("mae_G", m(&|r| r.generalization.mae)),
        ("mae_S", m(&|r| r.specificity.mae)),
        ("rmse_G", m(&|r| r.generalization.rmse)),
        ("rmse_S", m(&|r| r.specificity.rmse)),
    ];
    for (name, v) in rows {
        report.set(method, dataset, name, v);
    }
    let ratio = |g: &str, s: &str| match (report.get(method, dataset, g), report.get(method, dataset, s)) {
        (Some(g), Some(s)) => balance_ratio(g, s),
        _ => None,
    };
    let ratios = [
        ("ratio_acc", ratio("delta_acc_G", "delta_acc_S")),
        ("ratio_mae", ratio("mae_G", "mae_S")),
        ("ratio_rmse", ratio("rmse_G", "rmse_S")),
    ];
    for (name, v) in ratios {
        report.set(method, dataset, name, v);
    }
    let statuses: Vec<RepairStatus> = records.iter().map(|r| r.status).collect();
    status_rates(report, method, dataset, &statuses);
    let solved: Vec<&ProbeRecord> = records.iter().filter(|r| r.status == RepairStatus::Solved).collect();
    report.set(
        method,
        dataset,
        "mean_neurons_per_solved",
        mean(solved.iter().map(|r| r.neurons_patched as f64)),
    );
    report.set(
        method,
        dataset,
        "mean_forward_passes_per_solved",
        mean(solved.iter().map(|r| r.forward_passes as f64)),
    );
}

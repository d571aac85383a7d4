//! Checks that need a model which has actually learned the grammar.

use std::sync::OnceLock;

use neuropatch::bench::{
    benchmark_failures, build_benchmark, generate_corpus, probe_sets, sequence_pairs, BenchmarkSample, Corpus,
    Grammar, SequencePair, SpecScope,
};
use neuropatch::experiment::{run_patching, run_probing};
use neuropatch::kn::{kn_repair, ParallelIndex};
use neuropatch::model::{
    backward_logit, greedy_generate, predict_next_f64, train, ModelConfig, ModelState, TrainConfig,
};
use neuropatch::patcher::{apply_patch, patching_gain, revert, search_alpha, PatchKind, ALPHA_GRID};
use neuropatch::repair::{
    repair_failure, repair_sequence, repair_suite, revert_outcome, FailureCase, Isolation, Method, RepairConfig,
    RepairContext, RepairStatus, Variant,
};
use neuropatch::semantics::{output_bases, semantic_steer};
use neuropatch::attribution::{attribute_ixg, top_candidates};
use neuropatch::Error;

struct Fixture {
    grammar: Grammar,
    corpus: Corpus,
    bench: Vec<BenchmarkSample>,
    state: ModelState,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let grammar = Grammar::reference();
        let corpus = generate_corpus(&grammar, 11, 3000);
        let mut state = ModelState::init(ModelConfig::reference(5)).unwrap();
        let cfg = TrainConfig {
            steps: 150,
            seed: 2,
            ..TrainConfig::default()
        };
        train(&mut state, &corpus.train_sequences(), &cfg).unwrap();
        let bench = build_benchmark(&grammar);
        Fixture {
            grammar,
            corpus,
            bench,
            state,
        }
    })
}

fn failures(f: &Fixture, n: usize) -> Vec<FailureCase> {
    let all = benchmark_failures(&f.state, &f.bench).unwrap();
    assert!(all.len() >= n, "only {} benchmark failures", all.len());
    all.into_iter().step_by(7).take(n).map(|(_, c)| c).collect()
}

#[test]
fn outcomes_satisfy_their_postconditions() {
    let f = fixture();
    let mut s = f.state.clone();
    let pristine = s.digest();
    let ctx = RepairContext::new(None);
    let cfg = RepairConfig::default();
    let mut solved = 0;
    for case in failures(f, 12) {
        let before = s.digest();
        let mut out = repair_failure(&mut s, &case, &cfg, &ctx).unwrap();
        assert!(out.neurons_patched <= cfg.quota);
        match out.status {
            RepairStatus::Solved => {
                solved += 1;
                assert_eq!(predict_next_f64(&s, &case.prompt).unwrap().0, case.target);
                assert_eq!(out.neurons_patched, out.patches.len());
                assert_eq!(out.records.len(), out.patches.len());
                assert!(out.records.iter().all(|r| r.retained && r.kind == PatchKind::Mint));
                revert_outcome(&mut s, &mut out).unwrap();
            }
            _ => {
                assert_eq!(s.digest(), before);
                assert_eq!(out.neurons_patched, 0);
                assert!(out.records.iter().all(|r| !r.retained));
            }
        }
        assert_eq!(s.digest(), pristine);
    }
    assert!(solved > 0);
}

#[test]
fn zero_quota_skips_without_touching_the_model() {
    let f = fixture();
    let mut s = f.state.clone();
    let idx = ParallelIndex::new(f.corpus.train_sequences());
    let ctx = RepairContext::new(Some(&idx));
    let case = &failures(f, 1)[0];
    for method in [Method::Mint, Method::Kn] {
        let cfg = RepairConfig {
            method,
            quota: 0,
            ..RepairConfig::default()
        };
        let out = repair_failure(&mut s, case, &cfg, &ctx).unwrap();
        assert_eq!(out.status, RepairStatus::Skipped);
        assert!(out.patches.is_empty());
        assert_eq!(s.digest(), f.state.digest());
        assert!(s.scales_are_identity());
    }
}

#[test]
fn repeated_repairs_are_identical() {
    let f = fixture();
    let case = &failures(f, 3)[2];
    let ctx = RepairContext::new(None);
    for variant in [Variant::None, Variant::AttrRand] {
        let cfg = RepairConfig {
            variant,
            ..RepairConfig::default()
        };
        let mut a = f.state.clone();
        let mut b = f.state.clone();
        let oa = repair_failure(&mut a, case, &cfg, &ctx).unwrap();
        let ob = repair_failure(&mut b, case, &cfg, &ctx).unwrap();
        assert_eq!(serde_json::to_string(&oa).unwrap(), serde_json::to_string(&ob).unwrap());
        assert_eq!(a.digest(), b.digest());
    }
}

#[test]
fn already_correct_prompt_is_rejected() {
    let f = fixture();
    let mut s = f.state.clone();
    let sample = &f.bench[0];
    let (argmax, _) = predict_next_f64(&s, &sample.prompt).unwrap();
    let case = FailureCase {
        case_id: "ok".into(),
        prompt: sample.prompt.clone(),
        target: argmax,
        argmax_before: argmax,
    };
    let ctx = RepairContext::new(None);
    let err = repair_failure(&mut s, &case, &RepairConfig::default(), &ctx).unwrap_err();
    assert!(matches!(err, Error::NotAFailure { .. }));
}

#[test]
fn chosen_coefficient_maximizes_over_the_grid() {
    let f = fixture();
    let mut s = f.state.clone();
    let bases = output_bases(&s).unwrap();
    for case in failures(f, 3) {
        let steer = semantic_steer(&bases, case.target, case.argmax_before).unwrap();
        let scores = attribute_ixg(&s, &case.prompt, case.argmax_before).unwrap();
        let neuron = top_candidates(&scores, 1)[0];
        let (alpha, p) = search_alpha(&s, &case.prompt, neuron, &steer, case.target).unwrap();
        let mut grid = Vec::new();
        for &a in &ALPHA_GRID {
            let mut patch = apply_patch(&mut s, neuron, &steer, Some(a), PatchKind::Mint).unwrap();
            grid.push(predict_next_f64(&s, &case.prompt).unwrap().1[case.target]);
            revert(&mut s, &mut patch).unwrap();
        }
        let best = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let first = grid.iter().position(|&x| x >= best - 1e-9).unwrap();
        assert_eq!(alpha, ALPHA_GRID[first]);
        assert!((p - grid[first]).abs() < 1e-12);
        assert!(p >= grid[0]);
    }
    assert_eq!(s.digest(), f.state.digest());
}

#[test]
fn simulated_gains_match_real_patches() {
    let f = fixture();
    let mut s = f.state.clone();
    let bases = output_bases(&s).unwrap();
    let case = &failures(f, 2)[1];
    let (t, a) = (case.target, case.argmax_before);
    let steer = semantic_steer(&bases, t, a).unwrap();
    let scores = attribute_ixg(&s, &case.prompt, a).unwrap();
    let base = predict_next_f64(&s, &case.prompt).unwrap().1;
    for neuron in top_candidates(&scores, 10) {
        let est = patching_gain(&s, &case.prompt, neuron, &steer, t, a).unwrap();
        let mut patch = apply_patch(&mut s, neuron, &steer, est.alpha, PatchKind::Mint).unwrap();
        let after = predict_next_f64(&s, &case.prompt).unwrap().1;
        revert(&mut s, &mut patch).unwrap();
        let brute = (base[a] - base[t]) - (after[a] - after[t]);
        assert!((est.gain - brute).abs() < 1e-6, "{neuron}: {} vs {brute}", est.gain);
    }
}

#[test]
fn trained_gradients_depend_on_the_token() {
    let f = fixture();
    let p = &f.bench[40].prompt;
    let a = backward_logit(&f.state, p, f.bench[40].target).unwrap();
    let b = backward_logit(&f.state, p, f.bench[40].argmax_expected).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| x.1 != y.1));
}

#[test]
fn sequence_repair_edge_cases() {
    let f = fixture();
    let mut s = f.state.clone();
    let ctx = RepairContext::new(None);
    let cfg = RepairConfig::default();
    let prompt = f.bench[3].prompt.clone();
    let own = greedy_generate(&s, &prompt, 5, None).unwrap();
    let rep = repair_sequence(&mut s, "own", &prompt, &own, None, &cfg, &ctx).unwrap();
    assert!(rep.outcomes.is_empty());
    assert_eq!(rep.gen_before, rep.gen_after);

    let case = &failures(f, 1)[0];
    let rep = repair_sequence(&mut s, "one", &case.prompt, &[case.target], None, &cfg, &ctx).unwrap();
    assert_eq!(rep.outcomes.len(), 1);
    assert_eq!(rep.outcomes[0].case_id, format!("one@{}", case.prompt.len()));
    assert!(matches!(
        repair_sequence(&mut s, "empty", &prompt, &[], None, &cfg, &ctx),
        Err(Error::Data(_))
    ));
}

#[test]
fn kn_leaves_weights_alone() {
    let f = fixture();
    let mut s = f.state.clone();
    let weights = s.weights_digest();
    let idx = ParallelIndex::new(f.corpus.train_sequences());
    let cfg = RepairConfig {
        method: Method::Kn,
        ..RepairConfig::default()
    };
    for case in failures(f, 4) {
        let mut out = kn_repair(&mut s, &case, &cfg, Some(&idx)).unwrap();
        assert_eq!(s.weights_digest(), weights);
        if out.is_solved() {
            assert_eq!(predict_next_f64(&s, &case.prompt).unwrap().0, case.target);
            revert_outcome(&mut s, &mut out).unwrap();
        }
        assert!(s.scales_are_identity());
        assert!(out.records.iter().all(|r| r.kind == PatchKind::KnActivation));
    }
    let out = kn_repair(&mut s, &failures(f, 1)[0], &cfg, None).unwrap();
    assert_eq!(out.status, RepairStatus::Skipped);
    assert_eq!(out.note.as_deref(), Some("no parallel data"));
    let empty = ParallelIndex::new(Vec::new());
    let out = kn_repair(&mut s, &failures(f, 1)[0], &cfg, Some(&empty)).unwrap();
    assert_eq!(out.status, RepairStatus::Skipped);
    assert_eq!(s.digest(), f.state.digest());
}

#[test]
fn suites_restore_the_model() {
    let f = fixture();
    let mut s = f.state.clone();
    let ctx = RepairContext::new(None);
    let cases = failures(f, 6);
    let fresh = repair_suite(&mut s, &cases, &RepairConfig::default(), Isolation::Fresh, &ctx).unwrap();
    assert_eq!(s.digest(), f.state.digest());
    let mut acc = repair_suite(&mut s, &cases, &RepairConfig::default(), Isolation::Accumulate, &ctx).unwrap();
    assert_eq!(fresh[0].status, acc[0].status);
    assert_eq!(
        serde_json::to_string(&fresh[0].records).unwrap(),
        serde_json::to_string(&acc[0].records).unwrap()
    );
    for o in acc.iter_mut().rev() {
        if o.is_solved() {
            revert_outcome(&mut s, o).unwrap();
        }
    }
    assert_eq!(s.digest(), f.state.digest());
}

fn pairs(f: &Fixture, n: usize) -> Vec<SequencePair> {
    sequence_pairs(&f.grammar, &f.corpus.heldout, n)
}

#[test]
fn patching_experiment_both_isolation_modes() {
    let f = fixture();
    let mut s = f.state.clone();
    let ctx = RepairContext::new(None);
    let ps = pairs(f, 4);
    for iso in [Isolation::Fresh, Isolation::Accumulate] {
        let reps = run_patching(&mut s, &ps, &RepairConfig::default(), iso, &ctx, Some(f.grammar.eos)).unwrap();
        assert_eq!(reps.len(), ps.len());
        assert_eq!(s.digest(), f.state.digest());
        for (r, p) in reps.iter().zip(&ps) {
            let pristine = greedy_generate(&f.state, &p.prompt, p.truth.len(), Some(f.grammar.eos)).unwrap();
            assert_eq!(r.gen_before, pristine);
            assert_eq!(r.gen_during.len(), p.truth.len());
        }
    }
}

#[test]
fn probing_restores_after_every_sample() {
    let f = fixture();
    let mut s = f.state.clone();
    let ctx = RepairContext::new(None);
    let pristine = s.digest();
    let (records, outcomes) = run_probing(
        &mut s,
        &f.bench,
        &RepairConfig::default(),
        SpecScope::SameType,
        &ctx,
        Some(6),
    )
    .unwrap();
    assert_eq!(records.len(), outcomes.len());
    for r in &records {
        assert_eq!(r.restored_digest, pristine);
        assert_eq!((r.g_size, r.s_size), (9, 40));
        assert!(r.generalization.mae <= r.generalization.rmse + 1e-15);
        assert!(r.specificity.mae <= r.specificity.rmse + 1e-15);
        if r.status != RepairStatus::Solved {
            assert_eq!(r.generalization.mae, 0.0);
            assert_eq!(r.specificity.mae, 0.0);
        }
    }
    let i = f.bench.iter().position(|b| b.sample_id == records[0].case_id).unwrap();
    let p = probe_sets(&f.bench, i, SpecScope::All);
    assert_eq!(p.specificity.len(), 140);
}

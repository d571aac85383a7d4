use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::config::RunConfig;
use crate::attribution::{attribute_actv, attribute_ixg, attribute_rand, attribution_csv, AttributionMethod};
use crate::bench::{
    benchmark, benchmark_failures, build_benchmark, find_failures as scan_failures, generate_corpus, sequence_pairs,
    BenchmarkSample, CorpusSample, Grammar, SequencePair,
};
use crate::error::{Error, Result};
use crate::experiment::{add_patching_metrics, add_probing_metrics, run_patching, run_probing, ProbeRecord};
use crate::kn::ParallelIndex;
use crate::metrics::MetricsReport;
use crate::model::{self, predict_next_f64, token_accuracy, ModelConfig, ModelState, TrainConfig};
use crate::repair::{Isolation, Method, RepairConfig, RepairContext, RepairOutcome, SequenceRepair, Variant};
use crate::seeds::{self, Component};
use crate::semantics::{bases_csv, input_bases, output_bases, Side};

pub const CORPUS_TRAIN: &str = "corpus_train.jsonl";
pub const CORPUS_HELDOUT: &str = "corpus_heldout.jsonl";
pub const BENCHMARK: &str = "benchmark.jsonl";
pub const MODEL: &str = "model.nptl";
pub const TRAIN_LOSSES: &str = "train_losses.csv";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const PAIRS: &str = "pairs.jsonl";
pub const FAILURES: &str = "failures.jsonl";
pub const BENCHMARK_FAILURES: &str = "benchmark_failures.jsonl";
pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_MD: &str = "summary.md";
pub const TIMINGS_CSV: &str = "timings.csv";

fn check_writable(paths: &[PathBuf], force: bool) -> Result<()> {
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::WouldOverwrite(p.clone()));
        }
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// File-name form of a method label: `mint[est-plain]` → `mint-est-plain`.
pub fn method_stem(cfg: &RepairConfig) -> String {
    cfg.label().replace('[', "-").replace(']', "")
}

pub fn cmd_gen_corpus(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = &cfg.out;
    let paths = [out.join(CORPUS_TRAIN), out.join(CORPUS_HELDOUT), out.join(BENCHMARK)];
    check_writable(&paths, force)?;
    let grammar = Grammar::reference();
    let corpus = generate_corpus(&grammar, seeds::derive(cfg.seed, Component::Corpus, 0), cfg.corpus_size);
    write(&paths[0], to_jsonl(&corpus.train)?)?;
    write(&paths[1], to_jsonl(&corpus.heldout)?)?;
    write(&paths[2], benchmark::to_jsonl(&build_benchmark(&grammar))?)?;
    Ok(())
}

fn sequences(samples: &[CorpusSample]) -> Vec<Vec<usize>> {
    samples.iter().map(|s| s.tokens.clone()).collect()
}

pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = &cfg.out;
    let paths = [out.join(MODEL), out.join(TRAIN_LOSSES), out.join(TRAIN_REPORT)];
    check_writable(&paths, force)?;
    let train: Vec<CorpusSample> = read_jsonl(&out.join(CORPUS_TRAIN))?;
    let heldout: Vec<CorpusSample> = read_jsonl(&out.join(CORPUS_HELDOUT))?;
    let mut state = ModelState::init(ModelConfig::reference(seeds::derive(cfg.seed, Component::Init, 0)))?;
    let tc = TrainConfig {
        learning_rate: cfg.learning_rate,
        steps: cfg.train_steps,
        batch_size: cfg.batch_size,
        seed: seeds::derive(cfg.seed, Component::Train, 0),
        ..TrainConfig::default()
    };
    let report = model::train(&mut state, &sequences(&train), &tc)?;
    model::save(&state, &paths[0])?;
    let mut losses = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(losses, "{},{l:.9}", i + 1).expect("write to string");
    }
    write(&paths[1], losses)?;
    let heldout_accuracy = if heldout.is_empty() {
        None
    } else {
        Some(token_accuracy(&state, &sequences(&heldout))?)
    };
    let summary = serde_json::json!({
        "final_train_accuracy": report.final_accuracy,
        "heldout_accuracy": heldout_accuracy,
        "model_digest": state.digest(),
        "steps": cfg.train_steps,
    });
    write(&paths[2], serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

pub fn load_model(out: &Path) -> Result<ModelState> {
    let path = out.join(MODEL);
    if !path.exists() {
        return Err(Error::Data(format!("no model at {}", path.display())));
    }
    model::load(&path)
}

pub fn cmd_find_failures(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = &cfg.out;
    let paths = [out.join(PAIRS), out.join(FAILURES), out.join(BENCHMARK_FAILURES)];
    check_writable(&paths, force)?;
    let grammar = Grammar::reference();
    let state = load_model(out)?;
    let heldout: Vec<CorpusSample> = read_jsonl(&out.join(CORPUS_HELDOUT))?;
    let bench: Vec<BenchmarkSample> = read_jsonl(&out.join(BENCHMARK))?;
    let pairs = sequence_pairs(&grammar, &heldout, cfg.max_pairs);
    let mut failures = Vec::new();
    for p in &pairs {
        failures.extend(scan_failures(&state, p)?);
    }
    let bench_failures: Vec<_> = benchmark_failures(&state, &bench)?.into_iter().map(|(_, f)| f).collect();
    write(&paths[0], to_jsonl(&pairs)?)?;
    write(&paths[1], to_jsonl(&failures)?)?;
    write(&paths[2], to_jsonl(&bench_failures)?)?;
    Ok(())
}

fn timings_csv(outcomes: &[&RepairOutcome]) -> String {
    let mut s = String::from("case_id,status,neurons_patched,seconds\n");
    for o in outcomes {
        writeln!(s, "{},{},{},{:.6}", o.case_id, o.status, o.neurons_patched, o.elapsed_seconds).expect("write to string");
    }
    s
}

pub fn repair_file(stem: &str, isolation: Isolation) -> String {
    format!("repair_{stem}_{isolation}.jsonl")
}

pub fn probe_file(stem: &str, cfg: &RunConfig) -> String {
    format!("probe_{stem}_{}.jsonl", cfg.spec_scope)
}

pub fn parallel_index(out: &Path) -> Result<ParallelIndex> {
    let train: Vec<CorpusSample> = read_jsonl(&out.join(CORPUS_TRAIN))?;
    Ok(ParallelIndex::new(sequences(&train)))
}

pub fn cmd_repair(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = &cfg.out;
    let rc = cfg.repair_config()?;
    let stem = method_stem(&rc);
    let results = out.join(repair_file(&stem, cfg.isolation));
    let patches = out.join(format!("patches_{stem}_{}.jsonl", cfg.isolation));
    let summary = out.join(format!("repair_summary_{stem}_{}.csv", cfg.isolation));
    let timings = out.join(format!("timings_repair_{stem}_{}.csv", cfg.isolation));
    check_writable(&[results.clone(), patches.clone(), summary.clone(), timings.clone()], force)?;
    let grammar = Grammar::reference();
    let mut state = load_model(out)?;
    let pairs: Vec<SequencePair> = read_jsonl(&out.join(PAIRS))?;
    let index = match rc.method {
        Method::Kn => Some(parallel_index(out)?),
        Method::Mint => None,
    };
    let ctx = RepairContext::new(index.as_ref());
    let reps = run_patching(&mut state, &pairs, &rc, cfg.isolation, &ctx, Some(grammar.eos))?;
    let outcomes: Vec<&RepairOutcome> = reps.iter().flat_map(|r| &r.outcomes).collect();
    let records: Vec<_> = outcomes.iter().flat_map(|o| o.records.iter().cloned()).collect();
    write(&results, to_jsonl(&reps)?)?;
    write(&patches, to_jsonl(&records)?)?;
    let solved: Vec<&&RepairOutcome> = outcomes.iter().filter(|o| o.is_solved()).collect();
    let mean = |f: &dyn Fn(&RepairOutcome) -> f64| {
        (!solved.is_empty()).then(|| solved.iter().map(|o| f(o)).sum::<f64>() / solved.len() as f64)
    };
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    write(
        &summary,
        format!(
            "method,solved_count,skipped_count,mean_neurons_per_solved,mean_forward_passes_per_solved\n{},{},{},{},{}\n",
            rc.label(),
            solved.len(),
            outcomes.len() - solved.len(),
            fmt(mean(&|o| o.neurons_patched as f64)),
            fmt(mean(&|o| o.forward_passes as f64)),
        ),
    )?;
    write(&timings, timings_csv(&outcomes))?;
    Ok(())
}

pub fn cmd_probe(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = &cfg.out;
    let rc = cfg.repair_config()?;
    let stem = method_stem(&rc);
    let results = out.join(probe_file(&stem, cfg));
    let timings = out.join(format!("timings_probe_{stem}_{}.csv", cfg.spec_scope));
    check_writable(&[results.clone(), timings.clone()], force)?;
    let mut state = load_model(out)?;
    let bench: Vec<BenchmarkSample> = read_jsonl(&out.join(BENCHMARK))?;
    let index = match rc.method {
        Method::Kn => Some(parallel_index(out)?),
        Method::Mint => None,
    };
    let ctx = RepairContext::new(index.as_ref());
    let (records, outcomes) = run_probing(&mut state, &bench, &rc, cfg.spec_scope, &ctx, cfg.probe_limit)?;
    write(&results, to_jsonl(&records)?)?;
    write(&timings, timings_csv(&outcomes.iter().collect::<Vec<_>>()))?;
    Ok(())
}

/// Every (method, variant) the probing experiment compares.
pub fn probing_methods() -> Vec<(Method, Variant)> {
    let mut v = vec![(Method::Mint, Variant::None), (Method::Kn, Variant::None)];
    v.extend(Variant::ALL.iter().skip(1).map(|&var| (Method::Mint, var)));
    v
}

fn sorted_files(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        if let Some(mid) = name.strip_prefix(prefix).and_then(|n| n.strip_suffix(suffix)) {
            out.push((mid.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// `stem_setting` → (`stem`, `setting`); stems never contain `_`.
fn split_stem(mid: &str) -> Result<(&str, &str)> {
    mid.rsplit_once('_')
        .ok_or_else(|| Error::Data(format!("unexpected results file name part {mid:?}")))
}

pub fn build_report(cfg: &RunConfig) -> Result<MetricsReport> {
    let out = &cfg.out;
    let grammar = Grammar::reference();
    let mut report = MetricsReport::default();
    let pairs: Vec<SequencePair> = if out.join(PAIRS).exists() {
        read_jsonl(&out.join(PAIRS))?
    } else {
        Vec::new()
    };
    for (mid, path) in sorted_files(out, "repair_", ".jsonl")? {
        let (stem, isolation) = split_stem(&mid)?;
        let reps: Vec<SequenceRepair> = read_jsonl(&path)?;
        let used: Vec<SequencePair> = reps
            .iter()
            .map(|r| {
                pairs
                    .iter()
                    .find(|p| p.pair_id == r.pair_id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("{}: unknown pair {}", path.display(), r.pair_id)))
            })
            .collect::<Result<_>>()?;
        add_patching_metrics(&mut report, stem, &format!("patching-{isolation}"), &grammar, &used, &reps);
    }
    for (mid, path) in sorted_files(out, "probe_", ".jsonl")? {
        let (stem, scope) = split_stem(&mid)?;
        let records: Vec<ProbeRecord> = read_jsonl(&path)?;
        add_probing_metrics(&mut report, stem, &format!("probing-{scope}"), &records);
    }
    if report.rows.is_empty() {
        return Err(Error::Data(format!("no repair_*.jsonl or probe_*.jsonl logs in {}", out.display())));
    }
    Ok(report)
}

fn timings_summary(out: &Path) -> Result<String> {
    let mut s = String::from("experiment,run,solved,mean_seconds_per_solved\n");
    for (mid, path) in sorted_files(out, "timings_", ".csv")? {
        let text = read(&path)?;
        let secs: Vec<f64> = text
            .lines()
            .skip(1)
            .filter_map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                (cols.len() == 4 && cols[1] == "solved").then(|| cols[3].parse().ok()).flatten()
            })
            .collect();
        let mean = (!secs.is_empty()).then(|| secs.iter().sum::<f64>() / secs.len() as f64);
        let (experiment, run) = mid.split_once('_').unwrap_or((&mid, ""));
        writeln!(
            s,
            "{experiment},{run},{},{}",
            secs.len(),
            mean.map_or(String::new(), |m| format!("{m:.6}"))
        )
        .expect("write to string");
    }
    Ok(s)
}

pub fn cmd_report(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = &cfg.out;
    let paths = [out.join(REPORT_CSV), out.join(SUMMARY_MD), out.join(TIMINGS_CSV)];
    check_writable(&paths, force)?;
    let report = build_report(cfg)?;
    let mut md = String::from("# Repair report\n\n");
    writeln!(md, "- root seed: {}", cfg.seed).expect("write to string");
    if out.join(MODEL).exists() {
        writeln!(md, "- model digest: {}", load_model(out)?.digest()).expect("write to string");
    }
    if out.join(TRAIN_REPORT).exists() {
        let tr: serde_json::Value = serde_json::from_str(&read(&out.join(TRAIN_REPORT))?)?;
        if let Some(acc) = tr["heldout_accuracy"].as_f64() {
            writeln!(md, "- held-out next-token accuracy: {acc:.4}").expect("write to string");
        }
    }
    md.push('\n');
    md.push_str(&report.to_markdown());
    write(&paths[0], report.to_csv())?;
    write(&paths[1], md)?;
    write(&paths[2], timings_summary(out)?)?;
    Ok(())
}

/// Corpus → model → failures → patching (mint and kn, both isolation
/// modes) → probing (every method) → report.
pub fn cmd_pipeline(cfg: &RunConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    cmd_gen_corpus(cfg, force)?;
    cmd_train(cfg, force)?;
    cmd_find_failures(cfg, force)?;
    for method in [Method::Mint, Method::Kn] {
        for isolation in [Isolation::Fresh, Isolation::Accumulate] {
            let c = RunConfig {
                method,
                variant: Variant::None,
                isolation,
                ..cfg.clone()
            };
            cmd_repair(&c, force)?;
        }
    }
    for (method, variant) in probing_methods() {
        let c = RunConfig {
            method,
            variant,
            ..cfg.clone()
        };
        cmd_probe(&c, force)?;
    }
    cmd_report(cfg, force)
}

pub fn cmd_dump_bases(cfg: &RunConfig, side: Side, force: bool) -> Result<()> {
    let name = match side {
        Side::Input => "bases_input.csv",
        Side::Output => "bases_output.csv",
    };
    let path = cfg.out.join(name);
    check_writable(std::slice::from_ref(&path), force)?;
    let grammar = Grammar::reference();
    let state = load_model(&cfg.out)?;
    let bases = match side {
        Side::Input => input_bases(&state),
        Side::Output => output_bases(&state)?,
    };
    write(&path, bases_csv(&bases, |t| grammar.surface(t).to_string()))
}

pub fn cmd_attribute(
    cfg: &RunConfig,
    prompt: &str,
    wrt: Option<&str>,
    method: AttributionMethod,
    dest: Option<&Path>,
    force: bool,
) -> Result<()> {
    let path = dest.map_or_else(|| cfg.out.join("attribution.csv"), Path::to_path_buf);
    check_writable(std::slice::from_ref(&path), force)?;
    let grammar = Grammar::reference();
    let state = load_model(&cfg.out)?;
    let tokens = grammar.tokenize(prompt)?;
    let wrt = match wrt {
        Some(w) => grammar
            .token(w)
            .ok_or_else(|| Error::Data(format!("unknown token {w:?}")))?,
        None => predict_next_f64(&state, &tokens)?.0,
    };
    let scores = match method {
        AttributionMethod::Ixg => attribute_ixg(&state, &tokens, wrt)?,
        AttributionMethod::Actv => attribute_actv(&state, &tokens)?,
        AttributionMethod::Rand => attribute_rand(&state, seeds::derive(cfg.seed, Component::AttrRand, 0)),
    };
    write(&path, attribution_csv(&scores))
}

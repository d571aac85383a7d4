use serde::{Deserialize, Serialize};

use super::benchmark::BenchmarkSample;
use super::corpus::CorpusSample;
use super::grammar::Grammar;
use crate::error::{Error, Result};
use crate::model::{predict_next_f64, teacher_forced_argmax, ModelState, TokenId};
use crate::repair::FailureCase;

/// A prompt and the continuation the model should produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequencePair {
    pub pair_id: String,
    pub prompt: Vec<TokenId>,
    pub truth: Vec<TokenId>,
}

/// Held-out samples whose slot holds one of the subtype's rarer tokens,
/// split at the slot. At most `cap` pairs, in corpus order.
pub fn sequence_pairs(grammar: &Grammar, heldout: &[CorpusSample], cap: usize) -> Vec<SequencePair> {
    let slot = grammar.slot_position();
    heldout
        .iter()
        .filter(|s| {
            grammar
                .parse_sample(&s.tokens)
                .is_some_and(|inst| inst.slot != grammar.subtypes[inst.subtype].argmax)
        })
        .take(cap)
        .map(|s| SequencePair {
            pair_id: s.sample_id.clone(),
            prompt: s.tokens[..slot].to_vec(),
            truth: s.tokens[slot..].to_vec(),
        })
        .collect()
}

/// Every position of the ground truth the model mispredicts when fed the
/// true prefix. Ids are `{pair_id}@{position}`.
pub fn find_failures(state: &ModelState, pair: &SequencePair) -> Result<Vec<FailureCase>> {
    if pair.prompt.is_empty() || pair.truth.is_empty() {
        return Err(Error::Data(format!("{}: empty prompt or truth", pair.pair_id)));
    }
    let full: Vec<TokenId> = pair.prompt.iter().chain(&pair.truth).copied().collect();
    let preds = teacher_forced_argmax(state, &full[..full.len() - 1])?;
    let start = pair.prompt.len();
    Ok((start..full.len())
        .filter(|&pos| preds[pos - 1] != full[pos])
        .map(|pos| FailureCase {
            case_id: format!("{}@{pos}", pair.pair_id),
            prompt: full[..pos].to_vec(),
            target: full[pos],
            argmax_before: preds[pos - 1],
        })
        .collect())
}

/// Benchmark samples the model gets wrong in the expected way: it predicts
/// the subtype's frequent token where the sample wants a rarer one.
pub fn benchmark_failures(state: &ModelState, benchmark: &[BenchmarkSample]) -> Result<Vec<(usize, FailureCase)>> {
    let mut out = Vec::new();
    for (i, s) in benchmark.iter().enumerate() {
        let (pred, _) = predict_next_f64(state, &s.prompt)?;
        if pred == s.argmax_expected && pred != s.target {
            out.push((
                i,
                FailureCase {
                    case_id: s.sample_id.clone(),
                    prompt: s.prompt.clone(),
                    target: s.target,
                    argmax_before: pred,
                },
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::corpus::generate_corpus;
    use crate::model::ModelConfig;

    #[test]
    fn pairs_split_at_a_rare_slot() {
        let g = Grammar::reference();
        let c = generate_corpus(&g, 3, 400);
        let pairs = sequence_pairs(&g, &c.heldout, 5);
        assert!(!pairs.is_empty() && pairs.len() <= 5);
        for p in &pairs {
            assert_eq!(p.prompt.len(), g.slot_position());
            assert_eq!(p.prompt.len() + p.truth.len(), g.sample_len());
            let full: Vec<_> = p.prompt.iter().chain(&p.truth).copied().collect();
            let inst = g.parse_sample(&full).unwrap();
            assert!(g.subtypes[inst.subtype].targets.contains(&p.truth[0]));
        }
    }

    #[test]
    fn failures_match_prefix_predictions() {
        let s = ModelState::init(ModelConfig {
            vocab_size: 101,
            d_model: 8,
            d_ff: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq: 32,
            seed: 4,
        })
        .unwrap();
        let pair = SequencePair {
            pair_id: "p".into(),
            prompt: vec![0, 5, 6],
            truth: vec![7, 8, 9, 1],
        };
        let fails = find_failures(&s, &pair).unwrap();
        let mut expected = Vec::new();
        let mut prefix = pair.prompt.clone();
        for &gold in &pair.truth {
            let (pred, _) = predict_next_f64(&s, &prefix).unwrap();
            if pred != gold {
                expected.push((prefix.len(), pred));
            }
            prefix.push(gold);
        }
        assert_eq!(
            fails.iter().map(|f| (f.prompt.len(), f.argmax_before)).collect::<Vec<_>>(),
            expected
        );
        for f in &fails {
            assert_eq!(f.case_id, format!("p@{}", f.prompt.len()));
            assert_ne!(f.target, f.argmax_before);
        }
    }
}

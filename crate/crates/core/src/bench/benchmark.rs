use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grammar::{Grammar, Instance, TokenType};
use crate::error::{Error, Result};
use crate::model::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSample {
    pub sample_id: String,
    pub subtype: String,
    pub kind: TokenType,
    /// Index of the lead word, one per crafted template.
    pub template: usize,
    pub variant: usize,
    pub prompt: Vec<TokenId>,
    pub argmax_expected: TokenId,
    pub target: TokenId,
}

/// Which subtypes the specificity probe set draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecScope {
    /// The other subtypes of the patch sample's type.
    SameType,
    /// Every other subtype.
    All,
}

impl FromStr for SpecScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same-type" => Ok(Self::SameType),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown spec scope {other:?}"))),
        }
    }
}

impl fmt::Display for SpecScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SameType => "same-type",
            Self::All => "all",
        })
    }
}

/// Indices into the benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProbePair {
    pub patch: usize,
    pub generalization: Vec<usize>,
    pub specificity: Vec<usize>,
}

/// One sample per (subtype, template, variant), in that nesting order.
/// The target of variant `v` is the subtype's `v`-th target token.
pub fn build_benchmark(grammar: &Grammar) -> Vec<BenchmarkSample> {
    let slot = grammar.slot_position();
    let mut out = Vec::new();
    for (si, sub) in grammar.subtypes.iter().enumerate() {
        for template in 0..grammar.leads.len() {
            for variant in 0..grammar.variants.len() {
                let tokens = grammar.instantiate(&Instance {
                    subtype: si,
                    lead: template,
                    variant,
                    slot: sub.argmax,
                });
                out.push(BenchmarkSample {
                    sample_id: format!("{}/t{template:02}/v{variant}", sub.name),
                    subtype: sub.name.clone(),
                    kind: sub.kind,
                    template,
                    variant,
                    prompt: tokens[..slot].to_vec(),
                    argmax_expected: sub.argmax,
                    target: sub.targets[variant],
                });
            }
        }
    }
    out
}

/// Generalization: same subtype and variant (hence same argmax/target
/// pair), other templates. Specificity: same variant, other subtypes within
/// `scope`.
pub fn probe_sets(benchmark: &[BenchmarkSample], patch: usize, scope: SpecScope) -> ProbePair {
    let p = &benchmark[patch];
    let mut generalization = Vec::new();
    let mut specificity = Vec::new();
    for (i, s) in benchmark.iter().enumerate() {
        if i == patch || s.variant != p.variant {
            continue;
        }
        if s.subtype == p.subtype {
            generalization.push(i);
        } else if scope == SpecScope::All || s.kind == p.kind {
            specificity.push(i);
        }
    }
    ProbePair {
        patch,
        generalization,
        specificity,
    }
}

pub fn to_jsonl(benchmark: &[BenchmarkSample]) -> Result<String> {
    let mut out = String::new();
    for s in benchmark {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<BenchmarkSample>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn digest(benchmark: &[BenchmarkSample]) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_jsonl(benchmark)?.as_bytes())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn counts() {
        let g = Grammar::reference();
        let b = build_benchmark(&g);
        assert_eq!(b.len(), 450);
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &b {
            *per.entry(&s.subtype).or_default() += 1;
        }
        assert_eq!(per.len(), 15);
        assert!(per.values().all(|&c| c == 30));
    }

    #[test]
    fn one_argmax_three_targets_per_subtype() {
        let g = Grammar::reference();
        let b = build_benchmark(&g);
        for sub in &g.subtypes {
            let rows: Vec<_> = b.iter().filter(|s| s.subtype == sub.name).collect();
            let argmaxes: std::collections::BTreeSet<_> = rows.iter().map(|s| s.argmax_expected).collect();
            let targets: std::collections::BTreeSet<_> = rows.iter().map(|s| s.target).collect();
            assert_eq!(argmaxes.len(), 1);
            assert_eq!(targets.len(), 3);
            assert!(!targets.contains(&sub.argmax));
        }
    }

    #[test]
    fn assign_probe_sizes() {
        let g = Grammar::reference();
        let b = build_benchmark(&g);
        let i = b.iter().position(|s| s.subtype == "assign").unwrap();
        let pair = probe_sets(&b, i, SpecScope::SameType);
        assert_eq!(pair.generalization.len(), 9);
        assert_eq!(pair.specificity.len(), 40);
        let siblings: std::collections::BTreeSet<_> =
            pair.specificity.iter().map(|&j| b[j].subtype.as_str()).collect();
        assert_eq!(
            siblings.into_iter().collect::<Vec<_>>(),
            ["arithmetic_mod", "assign_multiply", "comparison_ge", "logic_and"]
        );
        assert_eq!(probe_sets(&b, i, SpecScope::All).specificity.len(), 140);
    }

    #[test]
    fn jsonl_round_trip_and_stable_digest() {
        let g = Grammar::reference();
        let b = build_benchmark(&g);
        assert_eq!(from_jsonl(&to_jsonl(&b).unwrap()).unwrap(), b);
        assert_eq!(digest(&b).unwrap(), digest(&build_benchmark(&g)).unwrap());
    }
}

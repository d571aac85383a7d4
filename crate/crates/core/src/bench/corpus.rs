use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grammar::{Grammar, Instance};
use crate::model::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub sample_id: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<CorpusSample>,
    pub heldout: Vec<CorpusSample>,
}

impl Corpus {
    pub fn train_sequences(&self) -> Vec<Vec<TokenId>> {
        self.train.iter().map(|s| s.tokens.clone()).collect()
    }

    pub fn heldout_sequences(&self) -> Vec<Vec<TokenId>> {
        self.heldout.iter().map(|s| s.tokens.clone()).collect()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in self.train.iter().chain(&self.heldout) {
            h.update(s.sample_id.as_bytes());
            for &t in &s.tokens {
                h.update((t as u32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Held out iff the leading u64 of SHA-256(sample_id) is divisible by 10,
/// which gives a split independent of sampling order.
pub fn is_heldout(sample_id: &str) -> bool {
    let digest = Sha256::digest(sample_id.as_bytes());
    let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    x % 10 == 0
}

pub fn sample_instance(grammar: &Grammar, rng: &mut impl Rng) -> Instance {
    let subtype = rng.random_range(0..grammar.subtypes.len());
    let lead = rng.random_range(0..grammar.leads.len());
    let variant = rng.random_range(0..grammar.variants.len());
    let sub = &grammar.subtypes[subtype];
    let slot = if rng.random::<f64>() < grammar.argmax_weight {
        sub.argmax
    } else {
        sub.targets[rng.random_range(0..sub.targets.len())]
    };
    Instance {
        subtype,
        lead,
        variant,
        slot,
    }
}

pub fn generate_corpus(grammar: &Grammar, seed: u64, size: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = Corpus {
        train: Vec::new(),
        heldout: Vec::new(),
    };
    for i in 0..size {
        let inst = sample_instance(grammar, &mut rng);
        let sample = CorpusSample {
            sample_id: format!("c{i:06}"),
            tokens: grammar.instantiate(&inst),
        };
        if is_heldout(&sample.sample_id) {
            corpus.heldout.push(sample);
        } else {
            corpus.train.push(sample);
        }
    }
    corpus
}

/// Count of samples per subtype name.
pub fn subtype_counts(grammar: &Grammar, samples: &[CorpusSample]) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = grammar
        .subtypes
        .iter()
        .map(|s| (s.name.clone(), 0))
        .collect();
    for s in samples {
        if let Some(inst) = grammar.parse_sample(&s.tokens) {
            *counts
                .get_mut(&grammar.subtypes[inst.subtype].name)
                .expect("known subtype") += 1;
        }
    }
    counts
}

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const REFERENCE_GRAMMAR: &str = include_str!("../../assets/grammar.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenType {
    Operator,
    Keyword,
    ApiName,
}

impl TokenType {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "operator" => Ok(Self::Operator),
            "keyword" => Ok(Self::Keyword),
            "api_name" => Ok(Self::ApiName),
            other => Err(Error::Data(format!("unknown token type {other:?}"))),
        }
    }
}

impl fmt::Display for TokenType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Operator => "operator",
            Self::Keyword => "keyword",
            Self::ApiName => "api_name",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subtype {
    pub name: String,
    pub kind: TokenType,
    pub cue: TokenId,
    pub argmax: TokenId,
    pub targets: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    Literal(TokenId),
    Lead,
    A,
    B,
    Cue,
    Slot,
}

/// Values chosen for one instantiation of the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instance {
    pub subtype: usize,
    pub lead: usize,
    pub variant: usize,
    pub slot: TokenId,
}

#[derive(Debug, Clone)]
pub struct Grammar {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    pub bos: TokenId,
    pub eos: TokenId,
    pub leads: Vec<TokenId>,
    pub variants: Vec<(TokenId, TokenId)>,
    pub layout: Vec<Piece>,
    pub argmax_weight: f64,
    pub subtypes: Vec<Subtype>,
}

#[derive(Default)]
struct Section {
    name: String,
    entries: Vec<(String, String)>,
}

impl Section {
    fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Data(format!("section [{}] lacks key {key:?}", self.name)))
    }
}

fn sections(text: &str) -> Result<Vec<Section>> {
    let mut out: Vec<Section> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            out.push(Section {
                name: name.trim().to_string(),
                entries: Vec::new(),
            });
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("grammar line {}: expected key = value", lineno + 1)))?;
        let section = out
            .last_mut()
            .ok_or_else(|| Error::Data(format!("grammar line {}: entry outside a section", lineno + 1)))?;
        section.entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Grammar {
    pub fn reference() -> Self {
        Self::parse(REFERENCE_GRAMMAR).expect("bundled grammar is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let secs = sections(text)?;
        let head = secs
            .iter()
            .find(|s| s.name == "grammar")
            .ok_or_else(|| Error::Data("missing [grammar] section".into()))?;

        let mut vocab: Vec<String> = Vec::new();
        let mut index: HashMap<String, TokenId> = HashMap::new();
        let mut add = |tok: &str| -> Result<TokenId> {
            if index.contains_key(tok) {
                return Err(Error::Data(format!("token {tok:?} declared twice")));
            }
            index.insert(tok.to_string(), vocab.len());
            vocab.push(tok.to_string());
            Ok(vocab.len() - 1)
        };

        let bos = add(head.get("bos")?)?;
        let eos = add(head.get("eos")?)?;
        for tok in head.get("structure")?.split_whitespace() {
            add(tok)?;
        }
        let leads = head
            .get("leads")?
            .split_whitespace()
            .map(&mut add)
            .collect::<Result<Vec<_>>>()?;
        let mut variants = Vec::new();
        for pair in head.get("variants")?.split('|') {
            let toks: Vec<&str> = pair.split_whitespace().collect();
            if toks.len() != 2 {
                return Err(Error::Data(format!("variant {pair:?} must name two identifiers")));
            }
            variants.push((add(toks[0])?, add(toks[1])?));
        }
        let argmax_weight: f64 = head
            .get("argmax_weight")?
            .parse()
            .map_err(|_| Error::Data("argmax_weight is not a number".into()))?;
        if !(0.0..=1.0).contains(&argmax_weight) {
            return Err(Error::Data(format!("argmax_weight {argmax_weight} outside [0, 1]")));
        }

        let mut subtypes = Vec::new();
        for sec in secs.iter().filter(|s| s.name.starts_with("subtype ")) {
            let name = sec.name["subtype ".len()..].trim().to_string();
            let kind = TokenType::parse(sec.get("type")?)?;
            let cue = add(sec.get("cue")?)?;
            let argmax = add(sec.get("argmax")?)?;
            let targets = sec
                .get("targets")?
                .split_whitespace()
                .map(&mut add)
                .collect::<Result<Vec<_>>>()?;
            if targets.len() != variants.len() {
                return Err(Error::Data(format!(
                    "subtype {name}: {} targets for {} variants",
                    targets.len(),
                    variants.len()
                )));
            }
            subtypes.push(Subtype {
                name,
                kind,
                cue,
                argmax,
                targets,
            });
        }
        if subtypes.is_empty() || leads.is_empty() || variants.is_empty() {
            return Err(Error::Data("grammar needs subtypes, leads and variants".into()));
        }

        let layout = head
            .get("layout")?
            .split_whitespace()
            .map(|tok| match tok {
                "LEAD" => Ok(Piece::Lead),
                "A" => Ok(Piece::A),
                "B" => Ok(Piece::B),
                "CUE" => Ok(Piece::Cue),
                "SLOT" => Ok(Piece::Slot),
                lit => index
                    .get(lit)
                    .map(|&t| Piece::Literal(t))
                    .ok_or_else(|| Error::Data(format!("layout token {lit:?} is not in the vocabulary"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if layout.iter().filter(|p| **p == Piece::Slot).count() != 1 {
            return Err(Error::Data("layout must contain exactly one SLOT".into()));
        }
        if layout.first() != Some(&Piece::Literal(bos)) {
            return Err(Error::Data("layout must start with the bos token".into()));
        }

        Ok(Self {
            vocab,
            index,
            bos,
            eos,
            leads,
            variants,
            layout,
            argmax_weight,
            subtypes,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.vocab[id]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|t| {
                self.token(t)
                    .ok_or_else(|| Error::Data(format!("unknown token {t:?}")))
            })
            .collect()
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.surface(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn slot_position(&self) -> usize {
        self.layout
            .iter()
            .position(|p| *p == Piece::Slot)
            .expect("validated at parse time")
    }

    pub fn sample_len(&self) -> usize {
        self.layout.len()
    }

    pub fn subtype_index(&self, name: &str) -> Option<usize> {
        self.subtypes.iter().position(|s| s.name == name)
    }

    pub fn instantiate(&self, inst: &Instance) -> Vec<TokenId> {
        let sub = &self.subtypes[inst.subtype];
        let (a, b) = self.variants[inst.variant];
        self.layout
            .iter()
            .map(|p| match *p {
                Piece::Literal(t) => t,
                Piece::Lead => self.leads[inst.lead],
                Piece::A => a,
                Piece::B => b,
                Piece::Cue => sub.cue,
                Piece::Slot => inst.slot,
            })
            .collect()
    }

    /// Inverse of [`instantiate`](Self::instantiate); `None` if the tokens
    /// do not follow the layout.
    pub fn parse_sample(&self, tokens: &[TokenId]) -> Option<Instance> {
        if tokens.len() != self.layout.len() {
            return None;
        }
        let lead_at = self.layout.iter().position(|p| *p == Piece::Lead)?;
        let cue_at = self.layout.iter().position(|p| *p == Piece::Cue)?;
        let a_at = self.layout.iter().position(|p| *p == Piece::A)?;
        let lead = self.leads.iter().position(|&t| t == tokens[lead_at])?;
        let subtype = self.subtypes.iter().position(|s| s.cue == tokens[cue_at])?;
        let variant = self.variants.iter().position(|&(a, _)| a == tokens[a_at])?;
        let slot = tokens[self.slot_position()];
        let sub = &self.subtypes[subtype];
        if slot != sub.argmax && !sub.targets.contains(&slot) {
            return None;
        }
        let inst = Instance {
            subtype,
            lead,
            variant,
            slot,
        };
        (self.instantiate(&inst) == tokens).then_some(inst)
    }

    /// Best achievable teacher-forced next-token accuracy on samples drawn
    /// from this grammar: the first occurrence of each free choice is
    /// unpredictable, the slot is predictable up to its argmax weight and
    /// every other position is determined by its prefix.
    pub fn accuracy_ceiling(&self) -> f64 {
        let slot_best = self
            .argmax_weight
            .max((1.0 - self.argmax_weight) / self.variants.len() as f64);
        let mut seen = [false; 3];
        let mut total = 0.0;
        for p in &self.layout[1..] {
            total += match p {
                Piece::Lead if !seen[0] => {
                    seen[0] = true;
                    1.0 / self.leads.len() as f64
                }
                Piece::A if !seen[1] => {
                    seen[1] = true;
                    1.0 / self.variants.len() as f64
                }
                Piece::Cue if !seen[2] => {
                    seen[2] = true;
                    1.0 / self.subtypes.len() as f64
                }
                Piece::Slot => slot_best,
                _ => 1.0,
            };
        }
        total / (self.layout.len() - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_grammar_shape() {
        let g = Grammar::reference();
        assert_eq!(g.vocab_size(), 101);
        assert_eq!(g.subtypes.len(), 15);
        for kind in [TokenType::Operator, TokenType::Keyword, TokenType::ApiName] {
            assert_eq!(g.subtypes.iter().filter(|s| s.kind == kind).count(), 5);
        }
        assert!(g.subtypes.iter().all(|s| s.targets.len() == 3));
        assert_eq!(g.leads.len(), 10);
        assert_eq!(g.variants.len(), 3);
    }

    #[test]
    fn instantiate_parse_round_trip() {
        let g = Grammar::reference();
        let inst = Instance {
            subtype: 4,
            lead: 7,
            variant: 2,
            slot: g.subtypes[4].targets[1],
        };
        let toks = g.instantiate(&inst);
        assert_eq!(g.parse_sample(&toks), Some(inst));
        assert_eq!(g.tokenize(&g.detokenize(&toks)).unwrap(), toks);
        assert_eq!(toks[g.slot_position()], inst.slot);
    }

    #[test]
    fn rejects_duplicate_tokens() {
        let text = REFERENCE_GRAMMAR.replace("cue = factor", "cue = total");
        assert!(matches!(Grammar::parse(&text), Err(Error::Data(_))));
    }

    #[test]
    fn ceiling_hand_count() {
        let g = Grammar::reference();
        // 31 predicted positions: lead, first A and cue are free choices.
        let want = (28.0 + 0.1 + 1.0 / 3.0 + 1.0 / 15.0 + 0.4 - 1.0) / 31.0;
        assert!((g.accuracy_ceiling() - want).abs() < 1e-12);
    }
}

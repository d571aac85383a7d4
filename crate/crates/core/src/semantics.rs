//! Token semantics in the model's latent space.
//!
//! On the input side a token's basis is its embedding row. On the output
//! side it is the token's one-hot mapped back through the pseudoinverse of
//! the LM head, i.e. row `t` of `pinv(W_o)`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelState, TokenId};
use crate::numerics::{l2_normalize, pinv_default, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticBases {
    pub side: Side,
    /// `vocab × d_model`
    pub bases: Matrix,
}

impl SemanticBases {
    pub fn basis(&self, token: TokenId) -> Result<Vector> {
        if token >= self.bases.rows() {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.bases.rows(),
            });
        }
        Vector::new(self.bases.row(token).to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticSteer {
    /// Unit-norm patch direction in the latent space.
    pub direction: Vector,
    pub target: TokenId,
    /// `None` for the target-only steer.
    pub argmax: Option<TokenId>,
}

pub fn input_bases(state: &ModelState) -> SemanticBases {
    SemanticBases {
        side: Side::Input,
        bases: state.tok_emb.clone(),
    }
}

pub fn output_bases(state: &ModelState) -> Result<SemanticBases> {
    Ok(SemanticBases {
        side: Side::Output,
        bases: pinv_default(&state.lm_head)?,
    })
}

/// `norm(s_o(target) − s_o(argmax))`
pub fn semantic_steer(bases: &SemanticBases, target: TokenId, argmax: TokenId) -> Result<SemanticSteer> {
    if target == argmax {
        return Err(Error::NotAFailure { target });
    }
    let diff = bases.basis(target)?.sub(&bases.basis(argmax)?)?;
    let direction = l2_normalize(&diff).map_err(|_| {
        Error::DegenerateSteer(format!("tokens {target} and {argmax} share an output basis"))
    })?;
    Ok(SemanticSteer {
        direction,
        target,
        argmax: Some(argmax),
    })
}

/// `norm(s_o(target))`
pub fn semantic_steer_basis_only(bases: &SemanticBases, target: TokenId) -> Result<SemanticSteer> {
    let direction = l2_normalize(&bases.basis(target)?)
        .map_err(|_| Error::DegenerateSteer(format!("token {target} has a zero output basis")))?;
    Ok(SemanticSteer {
        direction,
        target,
        argmax: None,
    })
}

/// Output bases memoized on the LM head's content hash.
#[derive(Debug, Default)]
pub struct BasesCache {
    entries: RwLock<HashMap<String, SemanticBases>>,
}

impl BasesCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_bases(&self, state: &ModelState) -> Result<SemanticBases> {
        let key = head_digest(&state.lm_head);
        if let Some(hit) = self.entries.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let bases = output_bases(state)?;
        self.entries
            .write()
            .expect("cache lock")
            .insert(key, bases.clone());
        Ok(bases)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn head_digest(m: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u32).to_le_bytes());
    h.update((m.cols() as u32).to_le_bytes());
    for x in m.as_slice() {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Fraction of tokens whose output basis, pushed through the LM head,
/// has its own token as argmax.
pub fn basis_recovery_rate(state: &ModelState, bases: &SemanticBases) -> Result<f64> {
    let logits = bases.bases.matmul(&state.lm_head)?;
    let mut hits = 0;
    for t in 0..logits.rows() {
        if crate::numerics::argmax(logits.row(t))? == t {
            hits += 1;
        }
    }
    Ok(hits as f64 / logits.rows() as f64)
}

/// CSV: `token_id,token_text,side,d0,...`.
pub fn bases_csv(bases: &SemanticBases, token_text: impl Fn(TokenId) -> String) -> String {
    let mut out = String::from("token_id,token_text,side");
    for i in 0..bases.bases.cols() {
        write!(out, ",d{i}").expect("write to string");
    }
    out.push('\n');
    let side = match bases.side {
        Side::Input => "input",
        Side::Output => "output",
    };
    for t in 0..bases.bases.rows() {
        write!(out, "{t},{},{side}", csv_field(&token_text(t))).expect("write to string");
        for x in bases.bases.row(t) {
            write!(out, ",{x}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

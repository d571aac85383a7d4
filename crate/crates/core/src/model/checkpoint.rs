//! Binary checkpoint format.
//!
//! ```text
//! "NPTL" | u16 version | u32 n + n bytes of key=value config lines
//! | u32 tensor count | per tensor: u32 name len, name, u32 rows, u32 cols
//! | f32 payloads in manifest order
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"NPTL";
pub const VERSION: u16 = 1;

const CONFIG_KEYS: [&str; 7] = [
    "vocab_size",
    "d_model",
    "d_ff",
    "n_layers",
    "n_heads",
    "max_seq",
    "seed",
];

fn config_block(cfg: &ModelConfig) -> String {
    let values = [
        cfg.vocab_size as u64,
        cfg.d_model as u64,
        cfg.d_ff as u64,
        cfg.n_layers as u64,
        cfg.n_heads as u64,
        cfg.max_seq as u64,
        cfg.seed,
    ];
    CONFIG_KEYS
        .iter()
        .zip(values)
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
        let v: u64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad config value {line:?}")))?;
        map.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| {
        map.get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing config key {k}")))
    };
    let cfg = ModelConfig {
        vocab_size: get("vocab_size")? as usize,
        d_model: get("d_model")? as usize,
        d_ff: get("d_ff")? as usize,
        n_layers: get("n_layers")? as usize,
        n_heads: get("n_heads")? as usize,
        max_seq: get("max_seq")? as usize,
        seed: get("seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_block(state.config());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let tensors = state.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    }
    for (_, m) in &tensors {
        for x in m.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config block")?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let cfg = parse_config(cfg_text)?;

    let count = r.u32("tensor count")? as usize;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let name_len = r.u32(&format!("tensor {i} name length"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &format!("tensor {i} name"))?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rows = r.u32(&format!("{name} rows"))? as usize;
        let cols = r.u32(&format!("{name} cols"))? as usize;
        manifest.push((name, rows, cols));
    }

    let mut state = ModelState::init(cfg)?;
    let expected: BTreeMap<String, (usize, usize)> = state
        .named_tensors()
        .into_iter()
        .map(|(n, m)| (n, m.shape()))
        .collect();
    if manifest.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            manifest.len()
        )));
    }
    for (name, rows, cols) in &manifest {
        let want = *expected
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if want != (*rows, *cols) {
            return Err(Error::TensorShape {
                name: name.clone(),
                expected: want,
                found: (*rows, *cols),
            });
        }
    }

    let mut payloads = BTreeMap::new();
    for (name, rows, cols) in &manifest {
        let raw = r.take(rows * cols * 4, &format!("{name} payload"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let m = Matrix::new(*rows, *cols, data)
            .map_err(|_| Error::Checkpoint(format!("{name} holds non-finite values")))?;
        if payloads.insert(name.clone(), m).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    for (name, slot) in state.named_tensors_mut() {
        *slot = payloads.remove(&name).expect("manifest checked against config");
    }
    Ok(state)
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(state))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelState> {
    read_checkpoint(&fs::read(path)?)
}

pub(crate) fn digest_tensors<'a>(tensors: impl Iterator<Item = (String, &'a Matrix)>) -> String {
    let mut h = Sha256::new();
    for (name, m) in tensors {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((m.rows() as u32).to_le_bytes());
        h.update((m.cols() as u32).to_le_bytes());
        for x in m.as_slice() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelState {
        ModelState::init(ModelConfig {
            vocab_size: 7,
            d_model: 4,
            d_ff: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq: 6,
            seed: 42,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = tiny();
        s.set_activation_scale(crate::model::NeuronRef::new(1, 2), 0.5).unwrap();
        let bytes = write_checkpoint(&s);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = write_checkpoint(&tiny());
        bytes[0] = b'X';
        assert!(matches!(read_checkpoint(&bytes), Err(Error::BadMagic(_))));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = write_checkpoint(&tiny());
        bytes[4] = 9;
        assert!(matches!(read_checkpoint(&bytes), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = write_checkpoint(&tiny());
        for cut in [3, 5, 20, bytes.len() - 1] {
            assert!(
                matches!(read_checkpoint(&bytes[..cut]), Err(Error::Truncated(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn shape_mismatch_against_config() {
        let s = tiny();
        let mut bytes = write_checkpoint(&s);
        // First manifest entry is tok_emb; its rows field follows the name.
        let cfg_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let rows_at = 10 + cfg_len + 4 + 4 + "tok_emb".len();
        bytes[rows_at] = 8;
        assert!(matches!(read_checkpoint(&bytes), Err(Error::TensorShape { .. })));
    }
}

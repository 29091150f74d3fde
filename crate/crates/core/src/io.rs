//! Checkpoint container.
//!
//! ```text
//! sbmcl-checkpoint v1\n
//! config <MetaConfig as one-line JSON>\n
//! params <count>\n
//! <name> <rows> <cols> f64\n          (one line per parameter, in order)
//! payload <byte length>\n
//! <row-major little-endian f64 values of every parameter, in header order>
//! <8-byte little-endian FNV-1a 64 checksum of the payload bytes>
//! ```

use std::path::Path;

use thiserror::Error;

use crate::autodiff::{Matrix, ParamSet};
use crate::harness::{Checkpoint, MetaConfig};

pub const CHECKPOINT_MAGIC: &str = "sbmcl-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed checkpoint header line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("checkpoint parameters do not fit the configured model: {0}")]
    Layout(String),
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let params = &ckpt.params;
    let mut header = format!("{CHECKPOINT_MAGIC}\n");
    header.push_str(&format!("config {}\n", serde_json::to_string(&ckpt.config).expect("config serializes")));
    header.push_str(&format!("params {}\n", params.len()));
    let mut payload = Vec::with_capacity(params.num_scalars() * 8);
    for (name, m) in params.names().iter().zip(params.values()) {
        assert!(!name.is_empty() && !name.contains(char::is_whitespace), "parameter names must be single tokens");
        header.push_str(&format!("{name} {} {} f64\n", m.rows(), m.cols()));
        for v in m.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.push_str(&format!("payload {}\n", payload.len()));
    let mut out = header.into_bytes();
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Result<(usize, String), CheckpointError> {
        line_no += 1;
        let rest = &bytes[*pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or(CheckpointError::Format { line: line_no, msg: "truncated header".into() })?;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| CheckpointError::Format { line: line_no, msg: "not UTF-8".into() })?;
        *pos += end + 1;
        Ok((line_no, text.to_string()))
    };
    let bad = |line: usize, msg: &str| CheckpointError::Format { line, msg: msg.to_string() };

    let (n, magic) = next_line(&mut pos)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(n, "unknown magic or version"));
    }
    let (n, cfg_line) = next_line(&mut pos)?;
    let json = cfg_line.strip_prefix("config ").ok_or_else(|| bad(n, "expected `config`"))?;
    let config: MetaConfig = serde_json::from_str(json).map_err(|e| bad(n, &e.to_string()))?;
    let (n, count_line) = next_line(&mut pos)?;
    let count: usize = count_line
        .strip_prefix("params ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(n, "expected `params <count>`"))?;
    let mut layout = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = next_line(&mut pos)?;
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 4 || f[3] != "f64" {
            return Err(bad(n, "expected `<name> <rows> <cols> f64`"));
        }
        let rows: usize = f[1].parse().map_err(|_| bad(n, "bad row count"))?;
        let cols: usize = f[2].parse().map_err(|_| bad(n, "bad column count"))?;
        layout.push((f[0].to_string(), rows, cols));
    }
    let (n, len_line) = next_line(&mut pos)?;
    let len: usize = len_line
        .strip_prefix("payload ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(n, "expected `payload <bytes>`"))?;
    let expected: usize = layout.iter().map(|(_, r, c)| r * c * 8).sum();
    if len != expected {
        return Err(bad(n, &format!("payload length {len} does not match header ({expected})")));
    }
    if bytes.len() != pos + len + 8 {
        return Err(bad(n, &format!("file holds {} bytes after the header, expected {}", bytes.len() - pos, len + 8)));
    }
    let payload = &bytes[pos..pos + len];
    let stored = u64::from_le_bytes(bytes[pos + len..].try_into().expect("8 bytes"));
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let mut params = ParamSet::new();
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (name, rows, cols) in layout {
        let data: Vec<f64> = values.by_ref().take(rows * cols).collect();
        params.push(name, Matrix::from_vec(rows, cols, data));
    }
    let ckpt = Checkpoint { config, params };
    ckpt.model().map_err(|e| CheckpointError::Layout(e.to_string()))?;
    Ok(ckpt)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| CheckpointError::Io(e.to_string()))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(e.to_string()))?;
    decode_checkpoint(&bytes)
}

/// Checksum stored in an encoded checkpoint.
pub fn checkpoint_checksum(bytes: &[u8]) -> Option<u64> {
    let tail = bytes.get(bytes.len().checked_sub(8)?..)?;
    Some(u64::from_le_bytes(tail.try_into().ok()?))
}

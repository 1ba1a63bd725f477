//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `CRSATNET`, `u32` version, `u64`-prefixed
//! UTF-8 config block of `key=value` lines, `u32` tensor count, then per
//! tensor a `u32`-prefixed name, `u32` rank, `u64` extents and raw `f64`
//! values, closed by the footer `CRSATEND`.

use std::fs;
use std::path::Path;

use super::{init_model, ModelConfig, ModelParams};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRSATNET";
const FOOTER: &[u8; 8] = b"CRSATEND";
pub const CHECKPOINT_VERSION: u32 = 1;

fn join_usize(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn config_text(c: &ModelConfig) -> String {
    format!(
        "d_in={}\nd_w={}\nd_shared={}\nencoder_hidden={}\nsemantic_hidden={}\natt_pool={}\n\
         leaky_slope={}\nhash_beta={}\nsemantic_decoder={}\nseen_classes={}\n",
        c.d_in,
        c.d_w,
        c.d_shared,
        join_usize(&c.encoder_hidden),
        join_usize(&c.semantic_hidden),
        c.att_pool,
        c.leaky_slope,
        c.hash_beta,
        c.semantic_decoder,
        c.seen_classes.join(","),
    )
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    let bad = |k: &str, v: &str| Error::Format(format!("bad checkpoint config {k}={v}"));
    let usize_list = |k: &str, v: &str| -> Result<Vec<usize>> {
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| x.parse().map_err(|_| bad(k, v)))
            .collect()
    };
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad checkpoint config line {line:?}")))?;
        match k {
            "d_in" => c.d_in = v.parse().map_err(|_| bad(k, v))?,
            "d_w" => c.d_w = v.parse().map_err(|_| bad(k, v))?,
            "d_shared" => c.d_shared = v.parse().map_err(|_| bad(k, v))?,
            "encoder_hidden" => c.encoder_hidden = usize_list(k, v)?,
            "semantic_hidden" => c.semantic_hidden = usize_list(k, v)?,
            "att_pool" => c.att_pool = v.parse().map_err(|_| bad(k, v))?,
            "leaky_slope" => c.leaky_slope = v.parse().map_err(|_| bad(k, v))?,
            "hash_beta" => c.hash_beta = v.parse().map_err(|_| bad(k, v))?,
            "semantic_decoder" => c.semantic_decoder = v.parse().map_err(|_| bad(k, v))?,
            "seen_classes" => {
                c.seen_classes = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect()
            }
            other => return Err(Error::Format(format!("unknown checkpoint key {other}"))),
        }
    }
    Ok(c)
}

/// Serialises parameters into the checkpoint byte layout.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = config_text(&params.config);
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let tensors = params.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, _, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(FOOTER);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, limit: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > limit {
            return Err(Error::Format("checkpoint length field out of range".into()));
        }
        Ok(n)
    }
}

/// Parses checkpoint bytes; nothing is returned unless the whole file is valid.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| Error::Format("not a checkpoint".into()))? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let cfg_len = r.len(bytes.len())?;
    let cfg = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let config = parse_config(cfg)?;
    let mut params =
        init_model(&config, 0).map_err(|e| Error::Format(format!("invalid config: {e}")))?;

    let count = r.u32()? as usize;
    let expected = params.named_tensors();
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, architecture needs {}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (name, _, like) in &expected {
        let n = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if got != name {
            return Err(Error::Format(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len(bytes.len())?);
        }
        if shape != like.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                like.shape()
            )));
        }
        let len: usize = shape.iter().product();
        let data = r
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push(Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    if r.take(8)? != FOOTER {
        return Err(Error::Format("missing checkpoint footer".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint footer".into()));
    }
    params.assign(&values)?;
    if !params.is_finite() {
        return Err(Error::Format("checkpoint holds non-finite values".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::tests::small_config;

    #[test]
    fn round_trip_is_bitwise() {
        let mut cfg = small_config();
        cfg.semantic_decoder = true;
        let p = init_model(&cfg, 17).unwrap();
        let bytes = encode_checkpoint(&p);
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(bytes, encode_checkpoint(&q));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let p = init_model(&small_config(), 1).unwrap();
        let bytes = encode_checkpoint(&p);
        for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let p = init_model(&small_config(), 1).unwrap();
        let mut bytes = encode_checkpoint(&p);
        bytes[8] = 9;
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("version")), "{err}");
    }
}

//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DNLM"                      4-byte magic
//! version         u32
//! config_len      u32
//! config          config_len bytes of UTF-8 JSON
//! seed            u64
//! param_count     u32
//! param_count x { numel u64, numel x f64 }
//! ```
//!
//! Parameters appear in declaration order; their shapes follow from the
//! config.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DNLM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("model config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&model.seed().to_le_bytes());
    out.extend_from_slice(&(model.parameters().len() as u32).to_le_bytes());
    for p in model.parameters() {
        out.extend_from_slice(&(p.value().numel() as u64).to_le_bytes());
        for v in p.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse(format!("checkpoint truncated reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Parse("checkpoint: bad magic at byte 0".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("checkpoint: unsupported version {version} at byte 4")));
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::Parse(format!("checkpoint: config at byte {at}: {e}")))?;
    let seed = r.u64("seed")?;
    let shapes = config.parameter_shapes()?;
    let count = r.u32("parameter count")? as usize;
    if count != shapes.len() {
        return Err(Error::Parse(format!("checkpoint: {count} parameters stored, config declares {}", shapes.len())));
    }
    let mut values = Vec::with_capacity(count);
    for (i, shape) in shapes.into_iter().enumerate() {
        let at = r.pos;
        let numel = r.u64("parameter length")? as usize;
        if numel != shape.iter().product::<usize>() {
            return Err(Error::Parse(format!(
                "checkpoint: parameter {i} at byte {at} holds {numel} values, expected shape {shape:?}"
            )));
        }
        let raw = r.take(numel * 8, "parameter data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        values.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!("checkpoint: trailing bytes after byte {}", r.pos)));
    }
    Model::from_parameters(config, values, seed)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, ConvBlock, SmallCnnConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfgs = [
            ModelConfig::mlp([4, 8, 3]),
            ModelConfig::Cnn(SmallCnnConfig {
                input: [2, 5, 5],
                blocks: vec![ConvBlock { out_channels: 3, kernel: 2, stride: 1, padding: 1, pool: 2 }],
                classes: 2,
            }),
        ];
        for cfg in cfgs {
            let m = init_model(cfg, 9).unwrap();
            let bytes = encode_checkpoint(&m);
            assert_eq!(&bytes[..4], b"DNLM");
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back.config(), m.config());
            assert_eq!(back.seed(), 9);
            for (a, b) in back.parameters().iter().zip(m.parameters()) {
                assert!(a.value().bit_eq(b.value()));
            }
            assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = init_model(ModelConfig::mlp([2, 2]), 1).unwrap();
        let bytes = encode_checkpoint(&m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Parse(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Parse(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Parse(_))));
    }
}

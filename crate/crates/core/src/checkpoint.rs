//! `GLDNCKPT` checkpoints.
//!
//! ```text
//! magic    8 bytes "GLDNCKPT"
//! version  u32 LE
//! records  until end of file:
//!   name length u32 LE, name bytes (UTF-8)
//!   rank u32 LE, extents u32 LE x rank
//!   values f32 LE
//! ```
//!
//! The first record, `meta.config`, holds the model configuration as JSON,
//! one byte per value. Parameters and batch-norm buffers follow under
//! their store names.

use std::collections::HashMap;
use std::path::Path;

use crate::dataset::container::Reader;
use crate::error::{Error, Result};
use crate::model::{Gldn, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLDNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CONFIG_RECORD: &str = "meta.config";

fn push_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(config: &ModelConfig, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = Tensor::new(&[json.len()], json.iter().map(|&b| b as f32).collect())?;
    push_record(&mut out, CONFIG_RECORD, &meta);
    for e in store.params().iter().chain(store.buffers()) {
        push_record(&mut out, &e.name, &e.value);
    }
    Ok(out)
}

struct Record {
    offset: u64,
    value: Tensor<f32>,
}

fn parse_records(bytes: &[u8]) -> Result<Vec<(String, Record)>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    r.expect_version(CHECKPOINT_VERSION)?;
    let mut out = Vec::new();
    while !r.at_end() {
        let offset = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(offset + 4, "record name is not UTF-8"))?
            .to_string();
        let (shape, count) = r.shape()?;
        let data = r.f32s(count, "record values")?;
        out.push((
            name,
            Record {
                offset,
                value: Tensor::new(&shape, data)?,
            },
        ));
    }
    Ok(out)
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub model: Gldn,
    pub store: ParamStore<f32>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let records = parse_records(bytes)?;
    let (first, meta) = records
        .first()
        .ok_or_else(|| Error::format(12, "checkpoint has no records"))?;
    if first != CONFIG_RECORD {
        return Err(Error::format(
            meta.offset,
            format!("first record is {first:?}, expected {CONFIG_RECORD}"),
        ));
    }
    let json: Vec<u8> = meta
        .value
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::format(
                    meta.offset,
                    "config record holds a non-byte value",
                ))
            }
        })
        .collect::<Result<_>>()?;
    let config: ModelConfig = serde_json::from_slice(&json)
        .map_err(|e| Error::format(meta.offset, format!("config record: {e}")))?;
    let (model, mut store) = Gldn::build::<f32>(&config, 0)?;

    let mut by_name: HashMap<&str, &Record> = HashMap::new();
    for (name, rec) in &records[1..] {
        if by_name.insert(name, rec).is_some() {
            return Err(Error::format(
                rec.offset,
                format!("duplicate record {name}"),
            ));
        }
    }
    let mut used = 0;
    let mut fill = |name: &str, slot: &mut Tensor<f32>| -> Result<()> {
        let rec = by_name
            .get(name)
            .ok_or_else(|| Error::format(bytes.len() as u64, format!("missing record {name}")))?;
        if rec.value.shape() != slot.shape() {
            return Err(Error::format(
                rec.offset,
                format!(
                    "record {name} has shape {:?}, the configuration needs {:?}",
                    rec.value.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = rec.value.clone();
        used += 1;
        Ok(())
    };
    for e in store.params_mut() {
        fill(&e.name, &mut e.value)?;
    }
    for e in store.buffers_mut() {
        fill(&e.name, &mut e.value)?;
    }
    if used != records.len() - 1 {
        let known: std::collections::HashSet<&str> = store
            .params()
            .iter()
            .chain(store.buffers())
            .map(|e| e.name.as_str())
            .collect();
        let (name, rec) = records[1..]
            .iter()
            .find(|(n, _)| !known.contains(n.as_str()))
            .expect("an unused record");
        return Err(Error::format(
            rec.offset,
            format!("unexpected record {name}"),
        ));
    }
    Ok(Checkpoint {
        config,
        model,
        store,
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    store: &ParamStore<f32>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(config, store)?;
    // Atomic replace.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, ParamStore<f32>) {
        let cfg = ModelConfig::tiny();
        let (_, store) = Gldn::build::<f32>(&cfg, 42).unwrap();
        (cfg, store)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (cfg, mut store) = tiny();
        store.buffers_mut()[0].value.data_mut()[0] = 0.123;
        let bytes = encode_checkpoint(&cfg, &store).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.store, store);
        assert_eq!(encode_checkpoint(&ck.config, &ck.store).unwrap(), bytes);
    }

    #[test]
    fn corrupted_headers() {
        let (cfg, store) = tiny();
        let bytes = encode_checkpoint(&cfg, &store).unwrap();
        let mut m = bytes.clone();
        m[3] = b'x';
        assert!(matches!(
            decode_checkpoint(&m),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut v = bytes.clone();
        v[8] = 2;
        assert!(matches!(
            decode_checkpoint(&v),
            Err(Error::Format { offset: 8, .. })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn shape_mismatch_against_config() {
        let (cfg, _) = tiny();
        let mut other = cfg.clone();
        other.blocks[0].llb_channels = [3, 3];
        let (_, wrong) = Gldn::build::<f32>(&other, 0).unwrap();
        // Config of one model, tensors of another.
        let bytes = encode_checkpoint(&cfg, &wrong).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Format { .. })
        ));
    }
}

//! Binary checkpoint: magic, version, a JSON header describing the model
//! and one record per parameter.

use std::io::Write;
use std::path::Path;

use keci_autodiff::{ParameterStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::corpus::TaskSchema;
use crate::encoder::Vocab;
use crate::model::{KbMeta, Model};
use crate::{KeciError, Result};

const MAGIC: &[u8; 4] = b"KECI";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    variant: Variant,
    schema: TaskSchema,
    vocab: Vocab,
    kb: Option<KbMeta>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| KeciError::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint(model: &Model<f32>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        variant: model.variant,
        schema: model.schema.clone(),
        vocab: model.vocab.clone(),
        kb: model.kb.clone(),
    })
    .map_err(|e| KeciError::Format(format!("cannot encode header: {e}")))?;
    let mut out = Vec::with_capacity(header.len() + 4 * model.store.num_scalars() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(&header);
    for (name, t) in model.store.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for d in t.shape() {
            put_u32(&mut out, *d)?;
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(KeciError::Format(format!(
                "checkpoint truncated while reading {what} at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(KeciError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(KeciError::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.u32("header length")?;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| KeciError::Format(format!("bad checkpoint header: {e}")))?;
    let mut store = ParameterStore::new();
    while !r.done() {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| KeciError::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank)
            .map(|_| r.u32("shape"))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| KeciError::Format(format!("shape of `{name}` overflows")))?;
        let raw = r.take(n.saturating_mul(4), "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, values)
            .map_err(|e| KeciError::Format(format!("parameter `{name}`: {e}")))?;
        store
            .insert(name.clone(), t)
            .map_err(|_| KeciError::Format(format!("duplicate parameter `{name}`")))?;
    }
    header.config.validate()?;
    Model::from_parts(
        header.config,
        header.variant,
        header.schema,
        header.vocab,
        header.kb,
        Some(store),
    )
    .map_err(|e| match e {
        KeciError::Validation(m) => KeciError::Format(format!("checkpoint is inconsistent: {m}")),
        other => other,
    })
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| KeciError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| KeciError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| KeciError::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::toy::{generate_toy, ToySpec};
    use crate::kb::KnowledgeBase;

    fn model() -> Model<f32> {
        let data = generate_toy(&ToySpec::simple(4, 0, 0.5), 1).unwrap();
        let kb = KnowledgeBase::from_file(data.kb).unwrap();
        let cfg = ModelConfig {
            d: 4,
            d_tok: 3,
            d_len: 2,
            max_span_len: 3,
            ..Default::default()
        };
        Model::new(cfg, Variant::Full, data.schema, &data.train, Some(&kb)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let bytes = write_checkpoint(&m).unwrap();
        assert_eq!(&bytes[..4], b"KECI");
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            let bits = |t: &Tensor<f32>| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let bytes = write_checkpoint(&model()).unwrap();
        let header_end = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        for cut in [3, 10, header_end, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(read_checkpoint(&bytes[..cut]), Err(KeciError::Format(_))),
                "{cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(KeciError::Format(_))));
        let mut future = bytes;
        future[4] = 9;
        assert!(matches!(
            read_checkpoint(&future),
            Err(KeciError::Format(_))
        ));
    }
}

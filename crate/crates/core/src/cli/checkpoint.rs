//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::Vocabulary;
use crate::error::{Error, Result};
use crate::experiment::Strategy;
use crate::network::{Model, ModelDims, ModelVariant};
use crate::training::TrainingConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATSPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 8 + 4 + 8;

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub vocab_hash: String,
    pub strategy: Strategy,
    pub training: TrainingConfig,
    pub main_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    variant: ModelVariant,
    dims: ModelDims,
    n_keywords: usize,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let tensors = model
        .params
        .tensors()
        .into_iter()
        .map(|t| {
            let entry = TensorEntry {
                name: t.name,
                shape: t.shape,
                offset,
            };
            offset += 8 * t.data.len() as u64;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        variant: model.variant.clone(),
        dims: model.dims.clone(),
        n_keywords: model.n_keywords(),
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.params.tensors() {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Decode {
        offset: offset as u64,
        message: message.into(),
    }
}

fn take<'a>(bytes: &'a [u8], at: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(at..at + len)
        .ok_or_else(|| decode_error(bytes.len(), format!("file ends inside {what}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if take(bytes, 0, 8, "magic")? != CHECKPOINT_MAGIC {
        return Err(decode_error(0, "bad magic"));
    }
    let version = u32::from_le_bytes(take(bytes, 8, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(take(bytes, 12, 8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| decode_error(12, "header length overflows"))?;
    let header_bytes = take(bytes, PREAMBLE_LEN, header_len, "header")?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| {
        // the header is written on a single line
        decode_error(PREAMBLE_LEN + e.column().saturating_sub(1), e.to_string())
    })?;

    let data_start = PREAMBLE_LEN + header_len;
    let mut model = Model::init(header.variant, header.dims, header.n_keywords, header.meta.seed)
        .map_err(|e| decode_error(PREAMBLE_LEN, format!("header describes no valid model: {e}")))?;
    let expected = model.params.tensors();
    if expected.len() != header.tensors.len() {
        return Err(decode_error(
            PREAMBLE_LEN,
            format!("header lists {} tensors, model has {}", header.tensors.len(), expected.len()),
        ));
    }
    let mut cursor = 0u64;
    let mut total = 0usize;
    for (want, got) in expected.iter().zip(&header.tensors) {
        if want.name != got.name || want.shape != got.shape || got.offset != cursor {
            return Err(decode_error(
                PREAMBLE_LEN,
                format!("tensor entry {} {:?} at {} does not match the model layout", got.name, got.shape, got.offset),
            ));
        }
        cursor += 8 * want.data.len() as u64;
        total += want.data.len();
    }
    let data = take(bytes, data_start, 8 * total, "tensor data")?;
    if bytes.len() != data_start + data.len() {
        return Err(decode_error(data_start + data.len(), "trailing bytes after tensor data"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    model.params.assign_flat(&values)?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, refusing it when `vocab` is supplied and its content
/// hash differs from the one recorded at training time.
pub fn load_checkpoint(path: &Path, vocab: Option<&Vocabulary>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = decode_checkpoint(&bytes)?;
    if let Some(v) = vocab {
        let actual = v.content_hash();
        if actual != ckpt.meta.vocab_hash {
            return Err(Error::VocabularyMismatch {
                expected: ckpt.meta.vocab_hash,
                actual,
            });
        }
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{FeatureSchema, FieldDef, FieldKind, GroupDef, Entity};
    use crate::network::Task;

    fn dims() -> ModelDims {
        ModelDims {
            keyword_dim: 4,
            feature_dim: 3,
            hidden1: 5,
            hidden2: 6,
            ..ModelDims::default()
        }
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            vocab_hash: "abc".into(),
            strategy: Strategy::Alternate,
            training: TrainingConfig::default(),
            main_fraction: 0.1,
            seed: 9,
        }
    }

    fn augmented() -> ModelVariant {
        let schema = FeatureSchema::new(vec![GroupDef {
            name: "profile".into(),
            entity: Entity::User,
            fields: vec![FieldDef {
                name: "age".into(),
                cardinality: 3,
                kind: FieldKind::Categorical,
            }],
        }])
        .unwrap();
        ModelVariant::Augmented { schema }
    }

    #[test]
    fn round_trip_is_bit_exact_for_every_variant() {
        for variant in [ModelVariant::Basic, ModelVariant::MultiTask, augmented()] {
            let model = Model::init(variant, dims(), 12, 4).unwrap();
            let bytes = encode_checkpoint(&model, &meta()).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back.meta, meta());
            assert_eq!(back.model.variant, model.variant);
            let a: Vec<u64> = model.params.flatten().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.model.params.flatten().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncation_is_reported_with_an_offset() {
        let model = Model::init(ModelVariant::MultiTask, dims(), 12, 4).unwrap();
        let bytes = encode_checkpoint(&model, &meta()).unwrap();
        for cut in [0, 5, 15, 40, bytes.len() - 1] {
            match decode_checkpoint(&bytes[..cut]) {
                Err(Error::Decode { offset, .. }) => assert_eq!(offset, cut as u64),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            decode_checkpoint(&longer),
            Err(Error::Decode { offset, .. }) if offset == bytes.len() as u64
        ));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let model = Model::init(ModelVariant::Basic, dims(), 12, 4).unwrap();
        let mut bytes = encode_checkpoint(&model, &meta()).unwrap();
        bytes[8] = 7;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Decode { offset: 0, .. })));
    }

    #[test]
    fn corrupt_header_is_a_decode_error() {
        let model = Model::init(ModelVariant::Basic, dims(), 12, 4).unwrap();
        let mut bytes = encode_checkpoint(&model, &meta()).unwrap();
        bytes[PREAMBLE_LEN + 3] = b'#';
        match decode_checkpoint(&bytes) {
            Err(Error::Decode { offset, .. }) => assert!(offset >= PREAMBLE_LEN as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn vocabulary_hash_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let vocab = Vocabulary::from_terms(vec!["a".into(), "b".into()]).unwrap();
        let model = Model::init(ModelVariant::Basic, dims(), 2, 1).unwrap();
        let mut m = meta();
        m.vocab_hash = vocab.content_hash();
        save_checkpoint(&model, &m, &path).unwrap();
        assert!(load_checkpoint(&path, Some(&vocab)).is_ok());
        let other = Vocabulary::from_terms(vec!["a".into(), "c".into()]).unwrap();
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(Error::VocabularyMismatch { .. })
        ));
    }

    #[test]
    fn basic_checkpoint_lacks_auxiliary_head() {
        let model = Model::init(ModelVariant::Basic, dims(), 12, 4).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&model, &meta()).unwrap()).unwrap();
        let err = back.model.check_task(Task::Aux).unwrap_err();
        assert_eq!(err.to_string(), "variant lacks auxiliary head");
    }
}

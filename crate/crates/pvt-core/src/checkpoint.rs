//! Combined weight container and the on-disk checkpoint format.
//!
//! A checkpoint is `"PVTC"` magic, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header, and the raw tensor
//! payloads. The header carries the model configuration, the optional
//! segmentation-head configuration, and a manifest of every tensor: name,
//! shape, element precision, and the payload byte range (offsets relative
//! to the end of the header). Payloads are little-endian element dumps in
//! the manifest's order, so saving the same weights twice produces
//! byte-identical files.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::ModelError;
use crate::backbone::{
    init_weights, zeroed_weights, BackboneVars, BackboneWeights, ModelConfig,
};
use crate::heads::{SegHeadConfig, SegHeadVars, SegHeadWeights};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Precision, Tensor, TensorSet};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PVTC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// XOR-folded into the seed for the segmentation head so its draws stay
/// decorrelated from the backbone's, which consume the same logical seed.
const SEG_HEAD_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}, expected {CHECKPOINT_VERSION}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("tensor {0} overlaps another payload in the manifest")]
    ManifestOverlap(String),
    #[error("tensor {name}: file stores {file} but {requested} was requested")]
    PrecisionMismatch {
        name: String,
        file: Precision,
        requested: Precision,
    },
    #[error("checkpoint declares tensors of mixed precision")]
    MixedPrecision,
    #[error("checkpoint declares no tensors")]
    EmptyManifest,
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint contains unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("tensor {name}: file shape {file:?} does not match the configured shape {expected:?}")]
    ShapeMismatch {
        name: String,
        file: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor {name}: manifest declares {declared} bytes, shape requires {required}")]
    PayloadLength {
        name: String,
        declared: u64,
        required: u64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("header is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

// ── combined weights ────────────────────────────────────────────────────

/// Backbone plus the optional segmentation head — the unit a checkpoint
/// stores and the trainer optimizes.
#[derive(Clone, Debug)]
pub struct ModelWeights<T: Elem> {
    pub backbone: BackboneWeights<T>,
    pub seg_head: Option<SegHeadWeights<T>>,
}

impl<T: Elem> ModelWeights<T> {
    pub fn init(
        model: &ModelConfig,
        seg: Option<&SegHeadConfig>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let backbone = init_weights(model, seed)?;
        let seg_head = match seg {
            Some(cfg) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SEG_HEAD_SEED_SALT);
                Some(SegHeadWeights::init(cfg, model, &mut rng)?)
            }
            None => None,
        };
        Ok(ModelWeights { backbone, seg_head })
    }

    /// All-zero weights with the right shapes, used as a loading skeleton.
    pub fn zeroed(model: &ModelConfig, seg: Option<&SegHeadConfig>) -> Result<Self, ModelError> {
        Ok(ModelWeights {
            backbone: zeroed_weights(model)?,
            seg_head: seg
                .map(|cfg| SegHeadWeights::zeroed(cfg, model))
                .transpose()?,
        })
    }

    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> ModelVars {
        ModelVars {
            backbone: self.backbone.register(tape, requires_grad),
            seg_head: self
                .seg_head
                .as_ref()
                .map(|h| h.register(tape, requires_grad)),
        }
    }
}

impl<T: Elem> TensorSet<T> for ModelWeights<T> {
    fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.backbone.for_each_tensor(f);
        if let Some(head) = &self.seg_head {
            head.visit("seg_head", f);
        }
    }

    fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.backbone.for_each_tensor_mut(f);
        if let Some(head) = &mut self.seg_head {
            head.visit_mut("seg_head", f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub seg_head: Option<SegHeadVars>,
}

impl ModelVars {
    /// `(name, var)` pairs in the same order and with the same names as the
    /// [`TensorSet`] traversal of [`ModelWeights`].
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = self.backbone.named_vars();
        if let Some(head) = &self.seg_head {
            for (name, var) in head.named_vars() {
                out.push((format!("seg_head.{name}"), var));
            }
        }
        out
    }
}

// ── file format ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    precision: Precision,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelConfig,
    seg_head: Option<SegHeadConfig>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Elem>(
    path: &Path,
    model: &ModelConfig,
    seg: Option<&SegHeadConfig>,
    weights: &ModelWeights<T>,
) -> Result<(), CheckpointError> {
    model.validate()?;
    if let Some(seg) = seg {
        seg.validate()?;
    }
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    weights.for_each_tensor(&mut |name, tensor| {
        let offset = payload.len() as u64;
        for &v in tensor.data() {
            v.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            precision: T::PRECISION,
            offset,
            byte_len: payload.len() as u64 - offset,
        });
    });
    let header = serde_json::to_vec(&Header {
        format: "pvt-checkpoint".to_string(),
        model: model.clone(),
        seg_head: seg.cloned(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    std::fs::write(path, out)?;
    Ok(())
}

fn read_or_truncated(
    reader: &mut impl Read,
    buf: &mut [u8],
    context: &str,
) -> Result<(), CheckpointError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated(context.to_string())
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_header(reader: &mut impl Read) -> Result<Header, CheckpointError> {
    let mut preamble = [0u8; 16];
    read_or_truncated(reader, &mut preamble, "shorter than the fixed preamble")?;
    if preamble[0..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(preamble[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(preamble[8..16].try_into().unwrap());
    let mut header_bytes = vec![0u8; header_len as usize];
    read_or_truncated(reader, &mut header_bytes, "header extends past end of file")?;
    Ok(serde_json::from_slice(&header_bytes)?)
}

/// Element precision the file stores, read from the header alone.
pub fn peek_precision(path: &Path) -> Result<Precision, CheckpointError> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header(&mut reader)?;
    let first = header
        .tensors
        .first()
        .ok_or(CheckpointError::EmptyManifest)?;
    if header.tensors.iter().any(|e| e.precision != first.precision) {
        return Err(CheckpointError::MixedPrecision);
    }
    Ok(first.precision)
}

/// Validates offsets and byte ranges: in-bounds, non-overlapping.
fn check_manifest(tensors: &[TensorEntry], payload_len: u64) -> Result<(), CheckpointError> {
    let mut sorted: Vec<&TensorEntry> = tensors.iter().collect();
    sorted.sort_by_key(|e| e.offset);
    let mut cursor = 0u64;
    for entry in sorted {
        if entry.offset < cursor {
            return Err(CheckpointError::ManifestOverlap(entry.name.clone()));
        }
        let end = entry
            .offset
            .checked_add(entry.byte_len)
            .ok_or_else(|| CheckpointError::ManifestOverlap(entry.name.clone()))?;
        if end > payload_len {
            return Err(CheckpointError::Truncated(format!(
                "tensor {} ends at byte {end} but the payload holds {payload_len}",
                entry.name
            )));
        }
        cursor = end;
    }
    Ok(())
}

pub fn load_checkpoint<T: Elem>(
    path: &Path,
) -> Result<(ModelConfig, Option<SegHeadConfig>, ModelWeights<T>), CheckpointError> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = read_header(&mut reader)?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;

    header.model.validate()?;
    if let Some(seg) = &header.seg_head {
        seg.validate()?;
    }
    check_manifest(&header.tensors, payload.len() as u64)?;

    let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
    for entry in &header.tensors {
        if by_name.insert(entry.name.as_str(), entry).is_some() {
            return Err(CheckpointError::ManifestOverlap(entry.name.clone()));
        }
    }

    let mut weights = ModelWeights::<T>::zeroed(&header.model, header.seg_head.as_ref())?;
    let mut filled: HashSet<String> = HashSet::new();
    let mut first_err: Option<CheckpointError> = None;
    weights.for_each_tensor_mut(&mut |name, tensor| {
        if first_err.is_some() {
            return;
        }
        let Some(entry) = by_name.get(name) else {
            first_err = Some(CheckpointError::MissingTensor(name.to_string()));
            return;
        };
        if entry.precision != T::PRECISION {
            first_err = Some(CheckpointError::PrecisionMismatch {
                name: name.to_string(),
                file: entry.precision,
                requested: T::PRECISION,
            });
            return;
        }
        if entry.shape != tensor.shape() {
            first_err = Some(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                file: entry.shape.clone(),
                expected: tensor.shape().to_vec(),
            });
            return;
        }
        let elem_bytes = T::PRECISION.bytes();
        let required = (tensor.numel() * elem_bytes) as u64;
        if entry.byte_len != required {
            first_err = Some(CheckpointError::PayloadLength {
                name: name.to_string(),
                declared: entry.byte_len,
                required,
            });
            return;
        }
        let start = entry.offset as usize;
        let bytes = &payload[start..start + entry.byte_len as usize];
        let data: Vec<T> = bytes.chunks_exact(elem_bytes).map(T::read_le).collect();
        match Tensor::new(entry.shape.clone(), data) {
            Ok(t) => {
                *tensor = t;
                filled.insert(name.to_string());
            }
            Err(e) => first_err = Some(CheckpointError::Model(e.into())),
        }
    });
    if let Some(err) = first_err {
        return Err(err);
    }
    for entry in &header.tensors {
        if !filled.contains(&entry.name) {
            return Err(CheckpointError::UnexpectedTensor(entry.name.clone()));
        }
    }
    Ok((header.model, header.seg_head, weights))
}

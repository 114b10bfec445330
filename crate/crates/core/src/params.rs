//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is a JSON manifest (`*.json`) next to a flat little-endian
//! `f32` payload (`*.bin`). The manifest lists every tensor by its layer name
//! together with its shape and element offset into the payload.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
    /// Optimizer moments stored alongside a checkpoint.
    OptimizerState,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar | ParamKind::OptimizerState)
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].kind.trainable())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| !trainable_only || e.kind.trainable())
            .map(|e| e.value.shape().len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// He-style normal initialization with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..shape.len()).map(|_| s(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

// ------------------------------------------------------------ checkpoints

pub const CHECKPOINT_FORMAT: &str = "roadfuse-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub kind: ParamKind,
    pub shape: [usize; 4],
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub payload: String,
    /// Free-form JSON describing the producer (model widths, step, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
    /// Extra named tensors (optimizer state), same layout rules.
    #[serde(default)]
    pub extra: Vec<TensorRecord>,
}

/// Paths of a checkpoint given its stem (`dir/epoch-003` -> `.json` + `.bin`).
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn shape_arr(sh: Shape) -> [usize; 4] {
    [sh.n, sh.c, sh.h, sh.w]
}

fn push_f32<T: Scalar>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
}

/// Write `store` (plus optional extra tensors) to `stem.json` / `stem.bin`.
pub fn save_checkpoint<T: Scalar>(
    stem: &Path,
    store: &ParamStore<T>,
    extra: &[(String, ParamKind, &Tensor<T>)],
    meta: serde_json::Value,
) -> Result<()> {
    let (json_path, bin_path) = checkpoint_paths(stem);
    let mut payload = Vec::new();
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(store.len());
    for e in &store.entries {
        tensors.push(TensorRecord {
            name: e.name.clone(),
            kind: e.kind,
            shape: shape_arr(e.value.shape()),
            offset,
        });
        offset += e.value.shape().len();
        push_f32(&mut payload, &e.value);
    }
    let mut extras = Vec::with_capacity(extra.len());
    for (name, kind, t) in extra {
        extras.push(TensorRecord {
            name: name.clone(),
            kind: *kind,
            shape: shape_arr(t.shape()),
            offset,
        });
        offset += t.shape().len();
        push_f32(&mut payload, t);
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        dtype: "f32le".into(),
        payload: bin_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        meta,
        tensors,
        extra: extras,
    };
    if let Some(dir) = json_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bin_path, &payload).map_err(|e| Error::io(&bin_path, e))?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// A loaded checkpoint: manifest plus decoded tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: HashMap<String, Tensor<f32>>,
    pub extra: HashMap<String, Tensor<f32>>,
}

pub fn read_checkpoint(stem: &Path) -> Result<Checkpoint> {
    let (json_path, _) = checkpoint_paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f32le" {
        return Err(Error::format(&json_path, "not a roadfuse f32le checkpoint"));
    }
    let bin_path = json_path.with_file_name(&manifest.payload);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(&bin_path, "payload length is not a multiple of 4"));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let decode = |records: &[TensorRecord]| -> Result<HashMap<String, Tensor<f32>>> {
        let mut out = HashMap::with_capacity(records.len());
        for r in records {
            let shape = Shape::new(r.shape[0], r.shape[1], r.shape[2], r.shape[3]);
            let end = r.offset + shape.len();
            if end > floats.len() {
                return Err(Error::format(&bin_path, format!("tensor {} overruns the payload", r.name)));
            }
            out.insert(r.name.clone(), Tensor::from_vec(shape, floats[r.offset..end].to_vec())?);
        }
        Ok(out)
    };
    let tensors = decode(&manifest.tensors)?;
    let extra = decode(&manifest.extra)?;
    Ok(Checkpoint { manifest, tensors, extra })
}

impl Checkpoint {
    /// Overwrite every parameter of `store` from this checkpoint.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for e in &mut store.entries {
            let t = self
                .tensors
                .get(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {}, model expects {}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.cast();
        }
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        Ok(())
    }
}

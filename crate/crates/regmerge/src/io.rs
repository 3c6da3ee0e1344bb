//! On-disk JSON formats. Every float is written with 17 significant decimal
//! digits so 64-bit values survive a write/read cycle bitwise, and map keys
//! are ordered, so re-running a command overwrites outputs byte-identically.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{ContinualMetrics, DomainSpec, Split, Strategy, TaskDataset};
use crate::linalg::{GramMatrix, Matrix};
use crate::merging::{MergeConfig, MergeState};
use crate::model::{Checkpoint, CheckpointMeta, LayerParams, LoraAdapter, ParamKind};

pub const FORMAT_VERSION: u32 = 1;

/// serde_json formatter that writes every f64 as `{:.16e}`: 17 significant
/// digits, enough to pin down any double exactly. Non-finite values never
/// reach this (the serializer emits null first), and the parsing side relies
/// on serde_json's float_roundtrip feature for correctly rounded reads.
struct Sig17Formatter;

impl serde_json::ser::Formatter for Sig17Formatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        self.write_f64(writer, f64::from(value))
    }
}

/// Serialize to the canonical byte representation (compact, 17-digit floats,
/// trailing newline).
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17Formatter);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(buf)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = to_json_bytes(value)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Validation(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn check_version(found: u32, what: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::validation(format!(
            "{what} has format_version {found}, expected {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

/// Matrix payload inside checkpoint files: explicit shape plus row-major data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatFile {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl From<&Matrix> for MatFile {
    fn from(m: &Matrix) -> Self {
        MatFile {
            shape: [m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

impl TryFrom<MatFile> for Matrix {
    type Error = Error;
    fn try_from(f: MatFile) -> Result<Matrix> {
        Matrix::new(f.shape[0], f.shape[1], f.data)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerFile {
    pub name: String,
    pub kind: ParamKind,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aux: Vec<MatFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterFile {
    pub layer_name: String,
    pub rank: usize,
    pub scaling: f64,
    pub a: MatFile,
    pub b: MatFile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub meta: CheckpointMeta,
    pub layers: Vec<LayerFile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adapters: Vec<AdapterFile>,
}

impl CheckpointFile {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        CheckpointFile {
            format_version: FORMAT_VERSION,
            meta: ckpt.meta.clone(),
            layers: ckpt
                .layers
                .iter()
                .map(|l| LayerFile {
                    name: l.name.clone(),
                    kind: l.kind,
                    shape: [l.weight.rows(), l.weight.cols()],
                    data: l.weight.data().to_vec(),
                    aux: l.aux.iter().map(MatFile::from).collect(),
                })
                .collect(),
            adapters: ckpt
                .adapters
                .iter()
                .map(|a| AdapterFile {
                    layer_name: a.layer_name.clone(),
                    rank: a.rank,
                    scaling: a.scaling,
                    a: MatFile::from(&a.a),
                    b: MatFile::from(&a.b),
                })
                .collect(),
        }
    }

    pub fn into_checkpoint(self) -> Result<Checkpoint> {
        check_version(self.format_version, "checkpoint file")?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in self.layers {
            let weight = Matrix::new(l.shape[0], l.shape[1], l.data)?;
            let aux = l
                .aux
                .into_iter()
                .map(Matrix::try_from)
                .collect::<Result<Vec<_>>>()?;
            let mut lp = LayerParams::new(l.name, l.kind, weight);
            lp.aux = aux;
            layers.push(lp);
        }
        let mut adapters = Vec::with_capacity(self.adapters.len());
        for a in self.adapters {
            let adapter =
                LoraAdapter::new(a.layer_name, a.a.try_into()?, a.b.try_into()?, a.scaling)?;
            if adapter.rank != a.rank {
                return Err(Error::validation(format!(
                    "adapter for '{}' declares rank {} but factors have rank {}",
                    adapter.layer_name, a.rank, adapter.rank
                )));
            }
            adapters.push(adapter);
        }
        let ckpt = Checkpoint {
            layers,
            adapters,
            meta: self.meta,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    save_json(path, &CheckpointFile::from_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_json::<CheckpointFile>(path)?.into_checkpoint()
}

/// Gram file: per-layer Gram matrices keyed by layer name.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GramFile {
    pub format_version: u32,
    pub layers: BTreeMap<String, GramMatrix>,
}

impl GramFile {
    pub fn from_grams(grams: &BTreeMap<String, GramMatrix>) -> Self {
        GramFile {
            format_version: FORMAT_VERSION,
            layers: grams.clone(),
        }
    }

    pub fn into_grams(self) -> Result<BTreeMap<String, GramMatrix>> {
        check_version(self.format_version, "gram file")?;
        Ok(self.layers)
    }
}

pub fn save_grams(path: &Path, grams: &BTreeMap<String, GramMatrix>) -> Result<()> {
    save_json(path, &GramFile::from_grams(grams))
}

pub fn load_grams(path: &Path) -> Result<BTreeMap<String, GramMatrix>> {
    load_json::<GramFile>(path)?.into_grams()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MergeStateFile {
    pub format_version: u32,
    pub task_count: u64,
    pub merge_history: Vec<String>,
    pub accumulators: GramFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged: Option<CheckpointFile>,
    pub config: MergeConfig,
}

impl MergeStateFile {
    pub fn from_state(state: &MergeState) -> Self {
        MergeStateFile {
            format_version: FORMAT_VERSION,
            task_count: state.task_count,
            merge_history: state.merge_history.clone(),
            accumulators: GramFile::from_grams(&state.accumulators),
            merged: state.merged.as_ref().map(CheckpointFile::from_checkpoint),
            config: state.config.clone(),
        }
    }

    pub fn into_state(self) -> Result<MergeState> {
        check_version(self.format_version, "merge state file")?;
        let state = MergeState {
            config: self.config,
            task_count: self.task_count,
            merge_history: self.merge_history,
            accumulators: self.accumulators.into_grams()?,
            merged: self.merged.map(|c| c.into_checkpoint()).transpose()?,
        };
        state.validate()?;
        Ok(state)
    }
}

pub fn save_state(path: &Path, state: &MergeState) -> Result<()> {
    save_json(path, &MergeStateFile::from_state(state))
}

pub fn load_state(path: &Path) -> Result<MergeState> {
    load_json::<MergeStateFile>(path)?.into_state()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetFile {
    pub format_version: u32,
    pub task_id: String,
    pub split: Split,
    pub domain_spec: DomainSpec,
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl DatasetFile {
    pub fn from_task(task: &TaskDataset) -> Self {
        DatasetFile {
            format_version: FORMAT_VERSION,
            task_id: task.task_id.clone(),
            split: task.split,
            domain_spec: task.domain_spec.clone(),
            inputs: task.inputs.clone(),
            targets: task.targets.clone(),
        }
    }

    pub fn into_task(self) -> Result<TaskDataset> {
        check_version(self.format_version, "dataset file")?;
        if self.inputs.rows() != self.targets.rows() {
            return Err(Error::validation(
                "dataset inputs and targets disagree on rows",
            ));
        }
        Ok(TaskDataset {
            task_id: self.task_id,
            split: self.split,
            inputs: self.inputs,
            targets: self.targets,
            domain_spec: self.domain_spec,
        })
    }
}

pub fn save_dataset(path: &Path, task: &TaskDataset) -> Result<()> {
    save_json(path, &DatasetFile::from_task(task))
}

pub fn load_dataset(path: &Path) -> Result<TaskDataset> {
    load_json::<DatasetFile>(path)?.into_task()
}

/// Results of a full sequence run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultsFile {
    pub strategy: Strategy,
    pub seed: u64,
    pub task_ids: Vec<String>,
    #[serde(rename = "R")]
    pub r: BTreeMap<String, Vec<Vec<f64>>>,
    pub metrics: BTreeMap<String, ContinualMetrics>,
    pub config_echo: serde_json::Value,
}

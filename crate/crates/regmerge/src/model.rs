//! Checkpoints, LoRA adapters, and the frozen-encoder toy network whose
//! forward pass captures per-layer inputs for Gram computation.
//!
//! Layer convention throughout: a linear layer stores W with shape m x n and
//! maps a batch X (N x m) to X*W (N x n), i.e. y = W^T x per example. Merging
//! therefore always works with left Grams X^T X of shape m x m.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::subseed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Weight on the y = W^T x path; merged through Gram-weighted least squares.
    Linear,
    /// Everything else (biases, frozen projections); merged by running mean.
    Other,
}

/// One named parameter tensor plus optional auxiliary tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub name: String,
    pub kind: ParamKind,
    pub weight: Matrix,
    #[serde(default)]
    pub aux: Vec<Matrix>,
}

impl LayerParams {
    pub fn new(name: impl Into<String>, kind: ParamKind, weight: Matrix) -> Self {
        LayerParams {
            name: name.into(),
            kind,
            weight,
            aux: Vec::new(),
        }
    }
}

/// Output transform applied downstream of the final linear block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Sigmoid,
    Identity,
}

impl Head {
    /// Apply the head elementwise to logits.
    pub fn apply(&self, logits: &Matrix) -> Matrix {
        match self {
            Head::Sigmoid => logits.map(sigmoid),
            Head::Identity => logits.clone(),
        }
    }

    /// d(output)/d(logit), expressed in terms of the head output.
    pub(crate) fn derivative_from_output(&self, out: f64) -> f64 {
        match self {
            Head::Sigmoid => out * (1.0 - out),
            Head::Identity => 1.0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchMeta {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub rank: usize,
    pub scaling: f64,
    pub head: Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub task_id: Option<String>,
    pub merge_history: Vec<String>,
    pub arch: Option<ArchMeta>,
}

impl CheckpointMeta {
    pub fn new(seed: u64) -> Self {
        CheckpointMeta {
            seed,
            task_id: None,
            merge_history: Vec::new(),
            arch: None,
        }
    }
}

/// A full model's parameters: ordered layers, any attached adapters, metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layers: Vec<LayerParams>,
    pub adapters: Vec<LoraAdapter>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn layer(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn adapter_for(&self, layer_name: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.layer_name == layer_name)
    }

    pub fn linear_layer_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.kind == ParamKind::Linear)
            .map(|l| l.name.as_str())
            .collect()
    }

    /// (name, kind, shape) per layer plus adapter shapes; drift in any entry
    /// means two checkpoints cannot be merged.
    pub fn topology(&self) -> Vec<(String, ParamKind, (usize, usize))> {
        let mut sig: Vec<_> = self
            .layers
            .iter()
            .map(|l| (l.name.clone(), l.kind, l.weight.shape()))
            .collect();
        for a in &self.adapters {
            sig.push((
                format!("{}#adapter", a.layer_name),
                ParamKind::Other,
                (a.a.rows(), a.b.rows()),
            ));
        }
        sig
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|p| p.name == l.name) {
                return Err(Error::validation(format!(
                    "duplicate layer name '{}'",
                    l.name
                )));
            }
        }
        for a in &self.adapters {
            let host = self.layer(&a.layer_name).ok_or_else(|| {
                Error::validation(format!("adapter targets unknown layer '{}'", a.layer_name))
            })?;
            if host.kind != ParamKind::Linear {
                return Err(Error::validation(format!(
                    "adapter targets non-linear layer '{}'",
                    a.layer_name
                )));
            }
            a.validate()?;
            if (a.a.cols(), a.b.rows()) != host.weight.shape() {
                return Err(Error::validation(format!(
                    "adapter delta shape {}x{} does not match layer '{}' weight {}x{}",
                    a.a.cols(),
                    a.b.rows(),
                    a.layer_name,
                    host.weight.rows(),
                    host.weight.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Low-rank additive update to one linear layer: delta = scaling * (b*a)^T.
///
/// `a` (r x m) receives the layer input, `b` (n x r) projects back up; b is
/// zero at init so a fresh adapter leaves the host function unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub layer_name: String,
    pub rank: usize,
    pub scaling: f64,
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraAdapter {
    pub fn new(
        layer_name: impl Into<String>,
        a: Matrix,
        b: Matrix,
        scaling: f64,
    ) -> Result<Self> {
        let adapter = LoraAdapter {
            layer_name: layer_name.into(),
            rank: a.rows(),
            scaling,
            a,
            b,
        };
        adapter.validate()?;
        Ok(adapter)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rank;
        let m = self.a.cols();
        let n = self.b.rows();
        if r == 0 {
            return Err(Error::validation("adapter rank must be positive"));
        }
        if self.a.rows() != r || self.b.cols() != r {
            return Err(Error::validation(format!(
                "adapter '{}' factor shapes {}x{} / {}x{} disagree with rank {}",
                self.layer_name,
                self.a.rows(),
                self.a.cols(),
                self.b.rows(),
                self.b.cols(),
                r
            )));
        }
        if r > m.min(n) {
            return Err(Error::validation(format!(
                "adapter rank {} exceeds min({}, {})",
                r, m, n
            )));
        }
        if !self.scaling.is_finite() {
            return Err(Error::validation("adapter scaling must be finite"));
        }
        Ok(())
    }
}

/// Kaiming-uniform adapter init from a dedicated seed: `a` drawn from
/// U(-sqrt(6/m), sqrt(6/m)) in row-major order, `b` all zeros.
pub fn init_adapter(
    layer_name: &str,
    layer_shape: (usize, usize),
    rank: usize,
    scaling: f64,
    seed: u64,
) -> Result<LoraAdapter> {
    let (m, n) = layer_shape;
    if rank == 0 || rank > m.min(n) {
        return Err(Error::validation(format!(
            "adapter rank {} invalid for layer shape {}x{}",
            rank, m, n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = kaiming_uniform(rank, m, m, &mut rng);
    let b = Matrix::zeros(n, rank);
    LoraAdapter::new(layer_name, a, b, scaling)
}

/// Kaiming-uniform fill: U(-sqrt(6/fan_in), sqrt(6/fan_in)), row-major order.
pub(crate) fn kaiming_uniform(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Matrix {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_raw(rows, cols, data)
}

/// Materialize the adapter's additive update, shape m x n like the host weight.
pub fn effective_delta(adapter: &LoraAdapter) -> Matrix {
    let ba = adapter
        .b
        .matmul(&adapter.a)
        .expect("adapter factor shapes validated at construction");
    ba.transpose().scale(adapter.scaling)
}

/// Add each adapter's delta onto its host layer weight; the input checkpoint
/// is untouched and the returned one keeps its own adapter list as-is.
pub fn apply_adapter(checkpoint: &Checkpoint, adapters: &[LoraAdapter]) -> Result<Checkpoint> {
    let mut out = checkpoint.clone();
    for adapter in adapters {
        adapter.validate()?;
        let delta = effective_delta(adapter);
        let layer = out.layer_mut(&adapter.layer_name).ok_or_else(|| {
            Error::validation(format!("unknown layer name '{}'", adapter.layer_name))
        })?;
        if layer.kind != ParamKind::Linear {
            return Err(Error::validation(format!(
                "adapter targets non-linear layer '{}'",
                adapter.layer_name
            )));
        }
        layer.weight = layer.weight.add(&delta)?;
    }
    Ok(out)
}

/// Fold a checkpoint's own adapters into its linear weights and drop them.
pub fn fold_adapters(checkpoint: &Checkpoint) -> Result<Checkpoint> {
    let mut out = apply_adapter(checkpoint, &checkpoint.adapters)?;
    out.adapters.clear();
    Ok(out)
}

/// A linear block of the adapted stack: frozen host weight, trainable bias,
/// optional trainable adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedBlock {
    pub host: LayerParams,
    pub bias: LayerParams,
    pub adapter: Option<LoraAdapter>,
}

impl AdaptedBlock {
    pub fn in_dim(&self) -> usize {
        self.host.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.host.weight.cols()
    }

    /// Host weight plus materialized adapter delta.
    pub fn effective_weight(&self) -> Matrix {
        match &self.adapter {
            Some(ad) => self
                .host
                .weight
                .add(&effective_delta(ad))
                .expect("adapter shape validated against host"),
            None => self.host.weight.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub rank: usize,
    pub scaling: f64,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 256,
            hidden: 32,
            output_dim: 256,
            rank: 4,
            scaling: 1.0,
            head: Head::Sigmoid,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.output_dim == 0 {
            return Err(Error::validation("model dimensions must be positive"));
        }
        if self.rank == 0 || self.rank > self.hidden.min(self.output_dim) {
            return Err(Error::validation(format!(
                "rank {} invalid for hidden {} / output {}",
                self.rank, self.hidden, self.output_dim
            )));
        }
        if !self.scaling.is_finite() {
            return Err(Error::validation("scaling must be finite"));
        }
        Ok(())
    }
}

/// Frozen random encoder, two adapted linear blocks, parameterless head.
///
/// Forward: x -> tanh(x * W_enc) -> tanh(a1 * W1_eff + b1) -> a2 * W2_eff + b2
/// = logits; the head (sigmoid for segmentation, identity for regression) is
/// applied downstream by training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub frozen_encoder: Vec<LayerParams>,
    pub adapted_layers: Vec<AdaptedBlock>,
    pub head: Head,
}

/// Per-block inputs recorded during a forward pass; `block_inputs[i]` feeds
/// both the host weight and the adapter of block i.
pub(crate) struct Trace {
    pub block_inputs: Vec<Matrix>,
    pub logits: Matrix,
}

impl ToyModel {
    /// Build the canonical W0 for a run: every task model starts from this
    /// exact state (encoder, hosts, and adapter init all derive from `seed`).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ToyModel> {
        cfg.validate()?;
        let (d, h, k) = (cfg.input_dim, cfg.hidden, cfg.output_dim);

        let mut enc_rng = ChaCha8Rng::seed_from_u64(subseed(seed, "encoder"));
        let encoder = LayerParams::new(
            "encoder",
            ParamKind::Other,
            kaiming_uniform(d, h, d, &mut enc_rng),
        );

        let mut blocks = Vec::new();
        for (idx, (m, n)) in [(h, h), (h, k)].into_iter().enumerate() {
            let name = format!("block{}", idx + 1);
            let mut host_rng =
                ChaCha8Rng::seed_from_u64(subseed(seed, &format!("{name}.host")));
            let host = LayerParams::new(
                format!("{name}.host"),
                ParamKind::Linear,
                kaiming_uniform(m, n, m, &mut host_rng),
            );
            let bias = LayerParams::new(
                format!("{name}.bias"),
                ParamKind::Other,
                Matrix::zeros(1, n),
            );
            let adapter = init_adapter(
                &host.name,
                (m, n),
                cfg.rank,
                cfg.scaling,
                subseed(seed, &format!("{name}.adapter")),
            )?;
            blocks.push(AdaptedBlock {
                host,
                bias,
                adapter: Some(adapter),
            });
        }

        Ok(ToyModel {
            frozen_encoder: vec![encoder],
            adapted_layers: blocks,
            head: cfg.head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.frozen_encoder
            .first()
            .map(|l| l.weight.rows())
            .unwrap_or_else(|| {
                self.adapted_layers
                    .first()
                    .map(|b| b.in_dim())
                    .unwrap_or(0)
            })
    }

    pub fn output_dim(&self) -> usize {
        self.adapted_layers.last().map(|b| b.out_dim()).unwrap_or(0)
    }

    pub fn adapters(&self) -> Vec<&LoraAdapter> {
        self.adapted_layers
            .iter()
            .filter_map(|b| b.adapter.as_ref())
            .collect()
    }

    /// Forward pass; with `capture` set, also returns the exact input rows
    /// seen by each adapted linear layer, keyed by host layer name.
    pub fn forward_capture(
        &self,
        x: &Matrix,
        capture: bool,
    ) -> Result<(Matrix, BTreeMap<String, Matrix>)> {
        let trace = self.forward_trace(x)?;
        let mut captures = BTreeMap::new();
        if capture {
            for (block, input) in self.adapted_layers.iter().zip(&trace.block_inputs) {
                captures.insert(block.host.name.clone(), input.clone());
            }
        }
        Ok((trace.logits, captures))
    }

    pub(crate) fn forward_trace(&self, x: &Matrix) -> Result<Trace> {
        if self.adapted_layers.is_empty() {
            return Err(Error::validation("model has no adapted layers"));
        }
        if x.cols() != self.input_dim() {
            return Err(Error::validation(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut a = x.clone();
        for enc in &self.frozen_encoder {
            a = a.matmul(&enc.weight)?.map(f64::tanh);
        }
        let mut block_inputs = Vec::with_capacity(self.adapted_layers.len());
        let last = self.adapted_layers.len() - 1;
        for (i, block) in self.adapted_layers.iter().enumerate() {
            block_inputs.push(a.clone());
            let mut z = a.matmul(&block.effective_weight())?;
            add_row_broadcast(&mut z, &block.bias.weight)?;
            a = if i == last { z } else { z.map(f64::tanh) };
        }
        Ok(Trace {
            block_inputs,
            logits: a,
        })
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let mut layers = self.frozen_encoder.clone();
        let mut adapters = Vec::new();
        for block in &self.adapted_layers {
            layers.push(block.host.clone());
            layers.push(block.bias.clone());
            if let Some(ad) = &block.adapter {
                adapters.push(ad.clone());
            }
        }
        let mut meta = meta;
        if meta.arch.is_none() {
            meta.arch = Some(ArchMeta {
                input_dim: self.input_dim(),
                hidden: self.adapted_layers[0].in_dim(),
                output_dim: self.output_dim(),
                rank: self.adapters().first().map(|a| a.rank).unwrap_or(0),
                scaling: self.adapters().first().map(|a| a.scaling).unwrap_or(0.0),
                head: self.head,
            });
        }
        Checkpoint {
            layers,
            adapters,
            meta,
        }
    }

    /// Rebuild a model from the layer naming contract: optional leading
    /// "encoder*" layers, then alternating "<block>.host" / "<block>.bias".
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<ToyModel> {
        ckpt.validate()?;
        let mut frozen_encoder = Vec::new();
        let mut blocks: Vec<AdaptedBlock> = Vec::new();
        let mut it = ckpt.layers.iter().peekable();
        while let Some(layer) = it.next() {
            if layer.name.starts_with("encoder") {
                if !blocks.is_empty() {
                    return Err(Error::validation(
                        "encoder layer appears after adapted blocks",
                    ));
                }
                frozen_encoder.push(layer.clone());
                continue;
            }
            let base = layer.name.strip_suffix(".host").ok_or_else(|| {
                Error::validation(format!("unexpected layer '{}' in checkpoint", layer.name))
            })?;
            if layer.kind != ParamKind::Linear {
                return Err(Error::validation(format!(
                    "host layer '{}' must be linear",
                    layer.name
                )));
            }
            let bias_name = format!("{base}.bias");
            let bias = match it.peek() {
                Some(next) if next.name == bias_name => it.next().unwrap().clone(),
                _ => {
                    return Err(Error::validation(format!(
                        "host layer '{}' is not followed by '{}'",
                        layer.name, bias_name
                    )))
                }
            };
            if bias.weight.shape() != (1, layer.weight.cols()) {
                return Err(Error::validation(format!(
                    "bias '{}' shape mismatch",
                    bias.name
                )));
            }
            blocks.push(AdaptedBlock {
                host: layer.clone(),
                bias,
                adapter: ckpt.adapter_for(&layer.name).cloned(),
            });
        }
        if blocks.is_empty() {
            return Err(Error::validation("checkpoint contains no adapted blocks"));
        }
        // Dimension chain must be consistent end to end.
        let mut prev_out = None;
        for enc in &frozen_encoder {
            if let Some(p) = prev_out {
                if enc.weight.rows() != p {
                    return Err(Error::validation("encoder dimension chain broken"));
                }
            }
            prev_out = Some(enc.weight.cols());
        }
        for b in &blocks {
            if let Some(p) = prev_out {
                if b.in_dim() != p {
                    return Err(Error::validation(format!(
                        "block '{}' input dim {} does not match upstream {}",
                        b.host.name,
                        b.in_dim(),
                        p
                    )));
                }
            }
            prev_out = Some(b.out_dim());
        }
        let head = ckpt
            .meta
            .arch
            .as_ref()
            .map(|a| a.head)
            .unwrap_or(Head::Sigmoid);
        Ok(ToyModel {
            frozen_encoder,
            adapted_layers: blocks,
            head,
        })
    }
}

/// z[i][:] += row[0][:] for every row i.
fn add_row_broadcast(z: &mut Matrix, row: &Matrix) -> Result<()> {
    if row.rows() != 1 || row.cols() != z.cols() {
        return Err(Error::validation(format!(
            "bias shape {}x{} does not broadcast over {}x{}",
            row.rows(),
            row.cols(),
            z.rows(),
            z.cols()
        )));
    }
    let cols = z.cols();
    let data = z.data_mut();
    for i in 0..data.len() / cols.max(1) {
        for j in 0..cols {
            data[i * cols + j] += row.get(0, j);
        }
    }
    Ok(())
}

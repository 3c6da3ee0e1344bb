//! Synthetic domain-incremental benchmark: task generation, segmentation and
//! continual-learning metrics, the sequence runner with its baseline
//! strategies, and the replay-augmented variant.
//!
//! Domains share the label space (a binary mask over a g x g grid) but differ
//! in input distribution: shape family, intensity polarity, contrast, noise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::merging::{mean_step, merge_adapters, MergeConfig, MergeState};
use crate::model::{
    fold_adapters, init_adapter, Checkpoint, CheckpointMeta, ModelConfig, ToyModel,
};
use crate::seed::subseed;
use crate::training::{train_task, LossConfig, LossRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Ring,
    Stripes,
    Square,
    Triangle,
}

/// Task family plus its distributional parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilySpec {
    /// y = X * W_teacher (+ noise), optionally thresholded to binary targets.
    LinearTeacher {
        input_dim: usize,
        output_dim: usize,
        noise_sigma: f64,
        /// Per-column geometric scale on the inputs (1.0 = isotropic).
        cov_decay: f64,
        binarize: bool,
    },
    /// g x g images of one randomly placed shape on a flat background, with
    /// the shape mask as target.
    ToySegmentation {
        grid: usize,
        shape: ShapeKind,
        /// Foreground / background intensities in [0, 1]; fg < bg flips the
        /// polarity, the main driver of forgetting across domains.
        fg: f64,
        bg: f64,
        noise_sigma: f64,
        /// Scales the fg/bg separation around their midpoint; 1.0 = full.
        contrast: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub seed: u64,
    pub family: FamilySpec,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::validation("domain name must not be empty"));
        }
        match &self.family {
            FamilySpec::LinearTeacher {
                input_dim,
                output_dim,
                noise_sigma,
                cov_decay,
                ..
            } => {
                if *input_dim == 0 || *output_dim == 0 {
                    return Err(Error::validation("teacher dimensions must be positive"));
                }
                if !(*noise_sigma >= 0.0) {
                    return Err(Error::validation("noise_sigma must be >= 0"));
                }
                if !(*cov_decay > 0.0 && *cov_decay <= 1.0) {
                    return Err(Error::validation("cov_decay must lie in (0, 1]"));
                }
            }
            FamilySpec::ToySegmentation {
                grid,
                fg,
                bg,
                noise_sigma,
                contrast,
                ..
            } => {
                if *grid < 2 {
                    return Err(Error::validation("grid must be at least 2"));
                }
                for v in [*fg, *bg] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::validation("fg/bg intensities must lie in [0, 1]"));
                    }
                }
                if !(*noise_sigma >= 0.0) {
                    return Err(Error::validation("noise_sigma must be >= 0"));
                }
                if !(0.0..=1.0).contains(contrast) {
                    return Err(Error::validation("contrast must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Flattened input dimension of one example.
    pub fn input_dim(&self) -> usize {
        match &self.family {
            FamilySpec::LinearTeacher { input_dim, .. } => *input_dim,
            FamilySpec::ToySegmentation { grid, .. } => grid * grid,
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.family {
            FamilySpec::LinearTeacher { output_dim, .. } => *output_dim,
            FamilySpec::ToySegmentation { grid, .. } => grid * grid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: String,
    pub split: Split,
    pub inputs: Matrix,
    pub targets: Matrix,
    pub domain_spec: DomainSpec,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets_are_binary(&self) -> bool {
        self.targets.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Uniform noise with unit variance, scaled by sigma.
fn noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let half_width = 3.0_f64.sqrt();
    sigma * rng.random_range(-half_width..half_width)
}

fn sample_mask(g: usize, shape: ShapeKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gf = g as f64;
    let mut mask = vec![0.0; g * g];
    let mut fill = |pred: &dyn Fn(f64, f64) -> bool| {
        for r in 0..g {
            for c in 0..g {
                let x = c as f64 + 0.5;
                let y = r as f64 + 0.5;
                if pred(x, y) {
                    mask[r * g + c] = 1.0;
                }
            }
        }
    };
    match shape {
        ShapeKind::Disk => {
            let cx = rng.random_range(0.3 * gf..0.7 * gf);
            let cy = rng.random_range(0.3 * gf..0.7 * gf);
            let rad = rng.random_range(0.15 * gf..0.3 * gf);
            fill(&|x, y| (x - cx).powi(2) + (y - cy).powi(2) <= rad * rad);
        }
        ShapeKind::Ring => {
            let cx = rng.random_range(0.3 * gf..0.7 * gf);
            let cy = rng.random_range(0.3 * gf..0.7 * gf);
            let outer = rng.random_range(0.2 * gf..0.35 * gf);
            let inner = outer * rng.random_range(0.45..0.65);
            fill(&|x, y| {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= outer * outer && d2 >= inner * inner
            });
        }
        ShapeKind::Stripes => {
            let vertical = rng.random_range(0..2u32) == 0;
            let period = rng.random_range(4..=8usize);
            let phase = rng.random_range(0..period);
            let width = (period / 2).max(1);
            fill(&|x, y| {
                let coord = if vertical { x as usize } else { y as usize };
                (coord + phase) % period < width
            });
        }
        ShapeKind::Square => {
            let cx = rng.random_range(0.3 * gf..0.7 * gf);
            let cy = rng.random_range(0.3 * gf..0.7 * gf);
            let half = rng.random_range(0.12 * gf..0.28 * gf);
            fill(&|x, y| (x - cx).abs() <= half && (y - cy).abs() <= half);
        }
        ShapeKind::Triangle => {
            let cx = rng.random_range(0.35 * gf..0.65 * gf);
            let cy = rng.random_range(0.35 * gf..0.65 * gf);
            let height = rng.random_range(0.3 * gf..0.6 * gf);
            let halfw = rng.random_range(0.15 * gf..0.35 * gf);
            let top = cy - height / 2.0;
            fill(&|x, y| {
                y >= top && y <= top + height && (x - cx).abs() <= halfw * (y - top) / height
            });
        }
    }
    mask
}

fn gen_split(spec: &DomainSpec, n: usize, split: Split, rng: &mut ChaCha8Rng) -> TaskDataset {
    match &spec.family {
        FamilySpec::ToySegmentation {
            grid,
            shape,
            fg,
            bg,
            noise_sigma,
            contrast,
        } => {
            let g = *grid;
            let d = g * g;
            let mid = (fg + bg) / 2.0;
            let f_eff = mid + contrast * (fg - mid);
            let b_eff = mid + contrast * (bg - mid);
            let mut inputs = Vec::with_capacity(n * d);
            let mut targets = Vec::with_capacity(n * d);
            for _ in 0..n {
                let mask = sample_mask(g, *shape, rng);
                for &m in &mask {
                    let base = if m == 1.0 { f_eff } else { b_eff };
                    inputs.push((base + noise(rng, *noise_sigma)).clamp(0.0, 1.0));
                }
                targets.extend_from_slice(&mask);
            }
            TaskDataset {
                task_id: spec.name.clone(),
                split,
                inputs: Matrix::from_raw(n, d, inputs),
                targets: Matrix::from_raw(n, d, targets),
                domain_spec: spec.clone(),
            }
        }
        FamilySpec::LinearTeacher {
            input_dim,
            output_dim,
            noise_sigma,
            cov_decay,
            binarize,
        } => {
            let (m, k) = (*input_dim, *output_dim);
            let mut teacher_rng = ChaCha8Rng::seed_from_u64(subseed(spec.seed, "teacher"));
            let teacher = Matrix::from_raw(
                m,
                k,
                (0..m * k)
                    .map(|_| teacher_rng.random_range(-1.0..1.0))
                    .collect(),
            );
            let mut inputs = Vec::with_capacity(n * m);
            for _ in 0..n {
                for j in 0..m {
                    let scale = cov_decay.powi(j as i32);
                    inputs.push(scale * rng.random_range(-1.0..1.0));
                }
            }
            let x = Matrix::from_raw(n, m, inputs);
            let mut y = x.matmul(&teacher).expect("shapes fixed above");
            if *noise_sigma > 0.0 {
                let data = y.data_mut();
                for v in data.iter_mut() {
                    *v += noise(rng, *noise_sigma);
                }
            }
            if *binarize {
                y = y.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            }
            TaskDataset {
                task_id: spec.name.clone(),
                split,
                inputs: x,
                targets: y,
                domain_spec: spec.clone(),
            }
        }
    }
}

/// Deterministically generate the train and test splits of one domain from
/// independent seeded streams.
pub fn gen_domain(spec: &DomainSpec, n_train: usize, n_test: usize) -> Result<(TaskDataset, TaskDataset)> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::validation("split sizes must be at least 1"));
    }
    let mut train_rng = ChaCha8Rng::seed_from_u64(subseed(spec.seed, "train"));
    let mut test_rng = ChaCha8Rng::seed_from_u64(subseed(spec.seed, "test"));
    let train = gen_split(spec, n_train, Split::Train, &mut train_rng);
    let test = gen_split(spec, n_test, Split::Test, &mut test_rng);
    Ok((train, test))
}

/// The canonical five-domain sequence: distinct shape families with
/// alternating intensity polarity so sequential fine-tuning visibly forgets.
pub fn default5_suite(seed: u64) -> Vec<DomainSpec> {
    let domains = [
        ("d1_disk", ShapeKind::Disk, 0.85, 0.15, 0.05, 1.0),
        ("d2_ring", ShapeKind::Ring, 0.2, 0.8, 0.05, 1.0),
        ("d3_stripes", ShapeKind::Stripes, 0.8, 0.25, 0.1, 0.9),
        ("d4_square", ShapeKind::Square, 0.25, 0.75, 0.1, 0.9),
        ("d5_triangle", ShapeKind::Triangle, 0.75, 0.2, 0.15, 0.8),
    ];
    domains
        .iter()
        .map(|(name, shape, fg, bg, sigma, contrast)| DomainSpec {
            name: name.to_string(),
            seed: subseed(seed, &format!("domain.{name}")),
            family: FamilySpec::ToySegmentation {
                grid: 16,
                shape: *shape,
                fg: *fg,
                bg: *bg,
                noise_sigma: *sigma,
                contrast: *contrast,
            },
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub mf1: f64,
    pub mmae: f64,
}

/// Binarize probabilities at 0.5.
pub fn threshold_mask(prob: &Matrix) -> Matrix {
    prob.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Per-sample IoU / F1 / MAE averaged over the batch. Empty prediction and
/// ground truth both count as a perfect match (IoU = F1 = 1).
pub fn seg_metrics(pred_mask: &Matrix, gt_mask: &Matrix, pred_prob: &Matrix) -> Result<SegMetrics> {
    if pred_mask.shape() != gt_mask.shape() || pred_mask.shape() != pred_prob.shape() {
        return Err(Error::validation("segmentation metric shapes differ"));
    }
    let n = pred_mask.rows();
    if n == 0 {
        return Err(Error::validation("empty evaluation set"));
    }
    let cols = pred_mask.cols();
    let (mut iou_sum, mut f1_sum, mut mae_sum) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let p = pred_mask.row(i);
        let g = gt_mask.row(i);
        let prob = pred_prob.row(i);
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        let mut mae = 0.0;
        for j in 0..cols {
            inter += p[j] * g[j];
            psum += p[j];
            gsum += g[j];
            mae += (prob[j] - g[j]).abs();
        }
        let union = psum + gsum - inter;
        iou_sum += if union == 0.0 { 1.0 } else { inter / union };
        f1_sum += if psum + gsum == 0.0 {
            1.0
        } else {
            2.0 * inter / (psum + gsum)
        };
        mae_sum += mae / cols as f64;
    }
    Ok(SegMetrics {
        miou: iou_sum / n as f64,
        mf1: f1_sum / n as f64,
        mmae: mae_sum / n as f64,
    })
}

/// R[i][j] = metric on task j's test split after training step i.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultMatrix {
    pub metric_name: String,
    pub task_ids: Vec<String>,
    pub r: Matrix,
}

impl ResultMatrix {
    pub fn new(metric_name: impl Into<String>, task_ids: Vec<String>) -> Self {
        let t = task_ids.len();
        ResultMatrix {
            metric_name: metric_name.into(),
            task_ids,
            r: Matrix::zeros(t, t),
        }
    }

    pub fn from_rows(
        metric_name: impl Into<String>,
        task_ids: Vec<String>,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let t = task_ids.len();
        if rows.len() != t || rows.iter().any(|r| r.len() != t) {
            return Err(Error::validation("result matrix must be T x T"));
        }
        Ok(ResultMatrix {
            metric_name: metric_name.into(),
            task_ids,
            r: Matrix::from_rows(rows)?,
        })
    }

    pub fn t(&self) -> usize {
        self.task_ids.len()
    }

    pub fn as_rows(&self) -> Vec<Vec<f64>> {
        (0..self.t()).map(|i| self.r.row(i).to_vec()).collect()
    }

    /// Mean of the final row; defined for any T >= 1.
    pub fn acc(&self) -> f64 {
        let t = self.t();
        (0..t).map(|j| self.r.get(t - 1, j)).sum::<f64>() / t as f64
    }

    /// Mean of the diagonal (each task right after its own training step).
    pub fn diagonal_mean(&self) -> f64 {
        let t = self.t();
        (0..t).map(|i| self.r.get(i, i)).sum::<f64>() / t as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualMetrics {
    pub acc: f64,
    pub bwt: f64,
    pub fwt: f64,
}

/// ACC = mean of the last row; BWT = mean of (final - own-step) over past
/// tasks; FWT = mean of R[i][i+1]. Formulas apply unchanged to error metrics
/// like mMAE (the sign convention simply follows the arithmetic).
pub fn continual_metrics(result: &ResultMatrix) -> Result<ContinualMetrics> {
    let t = result.t();
    if result.r.shape() != (t, t) {
        return Err(Error::validation("result matrix must be square"));
    }
    if t < 2 {
        return Err(Error::validation(
            "BWT/FWT require at least two tasks",
        ));
    }
    let last = t - 1;
    let acc = result.acc();
    let mut bwt = 0.0;
    let mut fwt = 0.0;
    for i in 0..last {
        bwt += result.r.get(last, i) - result.r.get(i, i);
        fwt += result.r.get(i, i + 1);
    }
    Ok(ContinualMetrics {
        acc,
        bwt: bwt / last as f64,
        fwt: fwt / last as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Regcl,
    LoraSeq,
    MeanMerge,
    Independent,
    Frozen,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Regcl,
        Strategy::LoraSeq,
        Strategy::MeanMerge,
        Strategy::Independent,
        Strategy::Frozen,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Regcl => "regcl",
            Strategy::LoraSeq => "lora_seq",
            Strategy::MeanMerge => "mean_merge",
            Strategy::Independent => "independent",
            Strategy::Frozen => "frozen",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown strategy '{s}' (expected regcl|lora_seq|mean_merge|independent|frozen)"
                ))
            })
    }
}

/// Source of task data for a sequence run; a test double can interpose here
/// to log the access pattern.
pub trait TaskProvider {
    fn count(&self) -> usize;
    fn train(&self, idx: usize) -> &TaskDataset;
    fn test(&self, idx: usize) -> &TaskDataset;
}

impl TaskProvider for [(TaskDataset, TaskDataset)] {
    fn count(&self) -> usize {
        self.len()
    }
    fn train(&self, idx: usize) -> &TaskDataset {
        &self[idx].0
    }
    fn test(&self, idx: usize) -> &TaskDataset {
        &self[idx].1
    }
}

impl TaskProvider for Vec<(TaskDataset, TaskDataset)> {
    fn count(&self) -> usize {
        self.len()
    }
    fn train(&self, idx: usize) -> &TaskDataset {
        &self[idx].0
    }
    fn test(&self, idx: usize) -> &TaskDataset {
        &self[idx].1
    }
}

#[derive(Clone, Debug)]
pub struct SequenceOptions {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub merge: MergeConfig,
    pub replay_k: Option<usize>,
    /// Run seed: everything (model init, per-task training, replay sampling)
    /// derives from it through labeled subseeds.
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    pub strategy: Strategy,
    pub task_ids: Vec<String>,
    pub r_matrices: BTreeMap<String, ResultMatrix>,
    pub metrics: BTreeMap<String, ContinualMetrics>,
    pub final_checkpoint: Checkpoint,
    pub merge_state: Option<MergeState>,
    /// The checkpoint each R row was evaluated with, per training step.
    pub step_checkpoints: Vec<Checkpoint>,
    pub histories: Vec<Vec<LossRecord>>,
}

pub const METRIC_NAMES: [&str; 3] = ["miou", "mf1", "mmae"];

fn eval_model(model: &ToyModel, test: &TaskDataset) -> Result<SegMetrics> {
    let (logits, _) = model.forward_capture(&test.inputs, false)?;
    let prob = model.head.apply(&logits);
    let mask = threshold_mask(&prob);
    seg_metrics(&mask, &test.targets, &prob)
}

/// Evaluate a checkpoint on one test split (shared by the CLI eval command).
pub fn evaluate_checkpoint(ckpt: &Checkpoint, test: &TaskDataset) -> Result<SegMetrics> {
    let model = ToyModel::from_checkpoint(ckpt)?;
    eval_model(&model, test)
}

struct RowWriter {
    mats: BTreeMap<String, ResultMatrix>,
}

impl RowWriter {
    fn new(task_ids: &[String]) -> Self {
        let mats = METRIC_NAMES
            .iter()
            .map(|m| (m.to_string(), ResultMatrix::new(*m, task_ids.to_vec())))
            .collect();
        RowWriter { mats }
    }

    fn fill_row<P: TaskProvider + ?Sized>(
        &mut self,
        tasks: &P,
        row: usize,
        model: &ToyModel,
    ) -> Result<()> {
        for j in 0..tasks.count() {
            let m = eval_model(model, tasks.test(j))?;
            self.mats.get_mut("miou").unwrap().r.set(row, j, m.miou);
            self.mats.get_mut("mf1").unwrap().r.set(row, j, m.mf1);
            self.mats.get_mut("mmae").unwrap().r.set(row, j, m.mmae);
        }
        Ok(())
    }
}

fn task_meta(seed: u64, task_id: &str) -> CheckpointMeta {
    CheckpointMeta {
        seed,
        task_id: Some(task_id.to_string()),
        merge_history: Vec::new(),
        arch: None,
    }
}

fn per_task_train_config(base: &TrainConfig, run_seed: u64, task_id: &str) -> TrainConfig {
    TrainConfig {
        seed: subseed(run_seed, &format!("train.{task_id}")),
        ..base.clone()
    }
}

/// Arithmetic mean of every parameter tensor across checkpoints, folded
/// incrementally.
fn mean_fold(prev: &Checkpoint, incoming: &Checkpoint, t: u64, label: String) -> Result<Checkpoint> {
    if prev.topology() != incoming.topology() {
        return Err(Error::TopologyDrift(
            "mean merge saw differing layer sets".to_string(),
        ));
    }
    let mut out = prev.clone();
    for layer in out.layers.iter_mut() {
        let inc = incoming.layer(&layer.name).expect("topology checked");
        layer.weight = mean_step(&layer.weight, &inc.weight, t)?;
        for (pa, na) in layer.aux.iter_mut().zip(&inc.aux) {
            *pa = mean_step(pa, na, t)?;
        }
    }
    out.meta.merge_history.push(label);
    Ok(out)
}

/// Seeded sample of k rows without replacement, drawn once per task when it
/// first appears.
pub fn sample_buffer(task: &TaskDataset, k: usize, seed: u64) -> Result<TaskDataset> {
    if k > task.len() {
        return Err(Error::validation(format!(
            "replay sample size {} exceeds dataset size {}",
            k,
            task.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..task.len()).collect();
    // Partial Fisher-Yates: the first k entries are the sample.
    for i in 0..k {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx.truncate(k);
    Ok(TaskDataset {
        task_id: task.task_id.clone(),
        split: task.split,
        inputs: gather(&task.inputs, &idx),
        targets: gather(&task.targets, &idx),
        domain_spec: task.domain_spec.clone(),
    })
}

fn gather(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_raw(idx.len(), m.cols(), data)
}

fn concat_datasets(parts: &[&TaskDataset], current: &TaskDataset) -> TaskDataset {
    let cols = current.inputs.cols();
    let tcols = current.targets.cols();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut rows = 0;
    for part in parts.iter().copied().chain(std::iter::once(current)) {
        inputs.extend_from_slice(part.inputs.data());
        targets.extend_from_slice(part.targets.data());
        rows += part.len();
    }
    TaskDataset {
        task_id: format!("{}+replay", current.task_id),
        split: Split::Train,
        inputs: Matrix::from_raw(rows, cols, inputs),
        targets: Matrix::from_raw(rows, tcols, targets),
        domain_spec: current.domain_spec.clone(),
    }
}

/// Fine-tune the merged model on past replay buffers plus the current task.
///
/// The merge bookkeeping (accumulators, task count, history) is untouched:
/// only the merged checkpoint moves. With k = 0 the state is returned
/// unchanged. For composite-merged (adapter-free) checkpoints fresh zero-delta
/// adapters are attached for the fine-tune and folded back afterwards, so the
/// trainable surface matches task training.
pub fn replay_finetune(
    state: &MergeState,
    buffers: &[TaskDataset],
    current: &TaskDataset,
    k: usize,
    tc: &TrainConfig,
    lc: &LossConfig,
) -> Result<MergeState> {
    if k == 0 {
        return Ok(state.clone());
    }
    let merged = state
        .merged
        .as_ref()
        .ok_or_else(|| Error::validation("replay requires a merged checkpoint"))?;
    for b in buffers {
        if b.len() != k {
            return Err(Error::validation(format!(
                "replay buffer for '{}' holds {} rows, expected {}",
                b.task_id,
                b.len(),
                k
            )));
        }
    }
    let mut model = ToyModel::from_checkpoint(merged)?;
    let had_adapters = !merged.adapters.is_empty();
    if !had_adapters {
        let arch = merged.meta.arch.as_ref().ok_or_else(|| {
            Error::validation("merged checkpoint lacks arch metadata for replay")
        })?;
        for block in model.adapted_layers.iter_mut() {
            block.adapter = Some(init_adapter(
                &block.host.name,
                (block.in_dim(), block.out_dim()),
                arch.rank,
                arch.scaling,
                subseed(tc.seed, &format!("replay_adapter.{}", block.host.name)),
            )?);
        }
    }
    let refs: Vec<&TaskDataset> = buffers.iter().collect();
    let combined = concat_datasets(&refs, current);
    let out = train_task(&model, &combined, tc, lc)?;
    let tuned = out.model.to_checkpoint(merged.meta.clone());
    let tuned = if had_adapters {
        tuned
    } else {
        fold_adapters(&tuned)?
    };
    let mut next = state.clone();
    next.merged = Some(tuned);
    Ok(next)
}

/// Run a full domain-incremental sequence under one strategy and fill the
fn check_task_data(data: &TaskDataset, model: &ModelConfig) -> Result<()> {
    if data.inputs.cols() != model.input_dim || data.targets.cols() != model.output_dim {
        return Err(Error::validation(format!(
            "task '{}' dims {}x{} do not match model {}x{}",
            data.task_id,
            data.inputs.cols(),
            data.targets.cols(),
            model.input_dim,
            model.output_dim
        )));
    }
    if !data.targets_are_binary() {
        return Err(Error::validation(format!(
            "task '{}' has non-binary targets",
            data.task_id
        )));
    }
    Ok(())
}

/// Fetch a training split inside its task window, validating on first touch.
fn fetch_train<'a, P: TaskProvider + ?Sized>(
    tasks: &'a P,
    t: usize,
    model: &ModelConfig,
) -> Result<&'a TaskDataset> {
    let train = tasks.train(t);
    check_task_data(train, model).map_err(|e| e.with_task(t))?;
    Ok(train)
}

/// T x T result matrices for every metric.
pub fn run_sequence<P: TaskProvider + ?Sized>(
    tasks: &P,
    strategy: Strategy,
    opts: &SequenceOptions,
) -> Result<SequenceOutcome> {
    let t_count = tasks.count();
    if t_count < 2 {
        return Err(Error::validation("sequence runs need at least two tasks"));
    }
    opts.model.validate()?;
    opts.train.validate()?;
    opts.loss.validate()?;
    opts.merge.validate()?;
    let replay_k = opts.replay_k.unwrap_or(0);
    if replay_k > 0 && strategy != Strategy::Regcl {
        return Err(Error::validation(
            "replay only combines with the regcl strategy",
        ));
    }

    // Only the withheld test splits are inspected up front; training splits
    // are fetched and checked inside each task's own window so an
    // instrumented provider can verify the non-replay access pattern.
    let mut task_ids = Vec::with_capacity(t_count);
    for i in 0..t_count {
        let test = tasks.test(i);
        check_task_data(test, &opts.model)?;
        task_ids.push(test.task_id.clone());
    }

    let w0 = ToyModel::init(&opts.model, subseed(opts.seed, "model"))?;
    let mut rows = RowWriter::new(&task_ids);
    let mut histories: Vec<Vec<LossRecord>> = Vec::new();
    let mut step_checkpoints: Vec<Checkpoint> = Vec::with_capacity(t_count);
    let mut merge_state: Option<MergeState> = None;
    let final_checkpoint;

    match strategy {
        Strategy::Frozen => {
            for t in 0..t_count {
                rows.fill_row(tasks, t, &w0)?;
                histories.push(Vec::new());
                step_checkpoints.push(w0.to_checkpoint(CheckpointMeta::new(opts.seed)));
            }
            final_checkpoint = w0.to_checkpoint(CheckpointMeta::new(opts.seed));
        }
        Strategy::LoraSeq => {
            let mut model = w0;
            for t in 0..t_count {
                let tc = per_task_train_config(&opts.train, opts.seed, &task_ids[t]);
                let train = fetch_train(tasks, t, &opts.model)?;
                let out = train_task(&model, train, &tc, &opts.loss).map_err(|e| e.with_task(t))?;
                model = out.model;
                histories.push(out.history);
                rows.fill_row(tasks, t, &model)?;
                step_checkpoints.push(model.to_checkpoint(task_meta(opts.seed, &task_ids[t])));
            }
            final_checkpoint = model.to_checkpoint(CheckpointMeta::new(opts.seed));
        }
        Strategy::Independent => {
            // Upper-bound diagonal; off-diagonal rows use the frozen model so
            // the matrix stays complete.
            let mut frozen_metrics = Vec::with_capacity(t_count);
            for j in 0..t_count {
                frozen_metrics.push(eval_model(&w0, tasks.test(j))?);
            }
            let mut last = None;
            for t in 0..t_count {
                let tc = per_task_train_config(&opts.train, opts.seed, &task_ids[t]);
                let train = fetch_train(tasks, t, &opts.model)?;
                let out = train_task(&w0, train, &tc, &opts.loss).map_err(|e| e.with_task(t))?;
                let own = eval_model(&out.model, tasks.test(t))?;
                for j in 0..t_count {
                    let m = if j == t { own } else { frozen_metrics[j] };
                    rows.mats.get_mut("miou").unwrap().r.set(t, j, m.miou);
                    rows.mats.get_mut("mf1").unwrap().r.set(t, j, m.mf1);
                    rows.mats.get_mut("mmae").unwrap().r.set(t, j, m.mmae);
                }
                histories.push(out.history);
                step_checkpoints.push(out.model.to_checkpoint(task_meta(opts.seed, &task_ids[t])));
                last = Some(out.model);
            }
            final_checkpoint = last
                .expect("at least two tasks")
                .to_checkpoint(CheckpointMeta::new(opts.seed));
        }
        Strategy::MeanMerge => {
            let mut mean: Option<Checkpoint> = None;
            for t in 0..t_count {
                let tc = per_task_train_config(&opts.train, opts.seed, &task_ids[t]);
                let train = fetch_train(tasks, t, &opts.model)?;
                let out = train_task(&w0, train, &tc, &opts.loss).map_err(|e| e.with_task(t))?;
                histories.push(out.history);
                let folded = fold_adapters(
                    &out.model.to_checkpoint(task_meta(opts.seed, &task_ids[t])),
                )?;
                mean = Some(match mean {
                    None => {
                        let mut first = folded;
                        first.meta.task_id = None;
                        first.meta.merge_history = vec![task_ids[t].clone()];
                        first
                    }
                    Some(prev) => mean_fold(&prev, &folded, (t + 1) as u64, task_ids[t].clone())
                        .map_err(|e| e.with_task(t))?,
                });
                let model = ToyModel::from_checkpoint(mean.as_ref().unwrap())?;
                rows.fill_row(tasks, t, &model)?;
                step_checkpoints.push(mean.clone().unwrap());
            }
            final_checkpoint = mean.expect("at least two tasks");
        }
        Strategy::Regcl => {
            let mut state = MergeState::new(opts.merge.clone());
            let mut buffers: Vec<TaskDataset> = Vec::new();
            for t in 0..t_count {
                let train = fetch_train(tasks, t, &opts.model)?;
                let tc = per_task_train_config(&opts.train, opts.seed, &task_ids[t]);
                let out = train_task(&w0, train, &tc, &opts.loss).map_err(|e| e.with_task(t))?;
                histories.push(out.history);
                let ckpt = out.model.to_checkpoint(task_meta(opts.seed, &task_ids[t]));
                state = merge_adapters(&state, &ckpt, &out.grams).map_err(|e| e.with_task(t))?;
                if replay_k > 0 {
                    let replay_tc = TrainConfig {
                        seed: subseed(opts.seed, &format!("replay_train.{}", task_ids[t])),
                        ..opts.train.clone()
                    };
                    state =
                        replay_finetune(&state, &buffers, train, replay_k, &replay_tc, &opts.loss)
                            .map_err(|e| e.with_task(t))?;
                    buffers.push(sample_buffer(
                        train,
                        replay_k,
                        subseed(opts.seed, &format!("replay.{}", task_ids[t])),
                    )?);
                }
                let model = ToyModel::from_checkpoint(state.merged.as_ref().unwrap())?;
                rows.fill_row(tasks, t, &model)?;
                step_checkpoints.push(state.merged.clone().expect("merged after step"));
            }
            final_checkpoint = state.merged.clone().expect("merged after first task");
            merge_state = Some(state);
        }
    }

    let mut metrics = BTreeMap::new();
    for (name, mat) in &rows.mats {
        metrics.insert(name.clone(), continual_metrics(mat)?);
    }
    Ok(SequenceOutcome {
        strategy,
        task_ids,
        r_matrices: rows.mats,
        metrics,
        final_checkpoint,
        merge_state,
        step_checkpoints,
        histories,
    })
}

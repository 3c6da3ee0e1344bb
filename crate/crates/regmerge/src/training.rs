//! Task fine-tuning: the MSE + focal + 10*dice composite loss with analytic
//! gradients, and seeded SGD over the trainable parameters (adapters and
//! biases; encoder and host weights never move).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::TaskDataset;
use crate::linalg::{gram, GramMatrix, Matrix};
use crate::model::ToyModel;

/// Probabilities are clamped to [EPS, 1-EPS] before logs in the focal loss.
const CLAMP_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mse_weight: f64,
    pub focal_weight: f64,
    pub dice_weight: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mse_weight: 1.0,
            focal_weight: 1.0,
            dice_weight: 10.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for w in [self.mse_weight, self.focal_weight, self.dice_weight] {
            if !w.is_finite() {
                return Err(Error::validation("loss weights must be finite"));
            }
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::validation("focal_gamma must be >= 0"));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::validation("focal_alpha must lie in (0, 1)"));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::validation("dice_smooth must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    CosineAnnealing,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 0.005,
            schedule: Schedule::CosineAnnealing,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::validation("lr must be positive and finite"));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total_steps`; cosine anneals to zero.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::CosineAnnealing => {
                if total_steps == 0 {
                    return self.lr;
                }
                let frac = step as f64 / total_steps as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

fn check_shapes(pred: &Matrix, target: &Matrix) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::validation(format!(
            "prediction shape {}x{} does not match target {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    Ok(())
}

/// Mean squared error over all elements; grad = 2(pred - target)/count.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    check_shapes(pred, target)?;
    let count = (pred.rows() * pred.cols()) as f64;
    if count == 0.0 {
        return Ok((0.0, Matrix::zeros(pred.rows(), pred.cols())));
    }
    let mut value = 0.0;
    let grad_data: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            value += d * d;
            2.0 * d / count
        })
        .collect();
    Ok((
        value / count,
        Matrix::from_raw(pred.rows(), pred.cols(), grad_data),
    ))
}

/// Mean of -alpha_t (1-p_t)^gamma log(p_t) with p_t = p for target 1 and
/// 1-p otherwise; probabilities clamped to [1e-7, 1-1e-7], zero gradient in
/// the clamped region.
pub fn focal_loss(pred: &Matrix, target: &Matrix, cfg: &LossConfig) -> Result<(f64, Matrix)> {
    check_shapes(pred, target)?;
    let count = (pred.rows() * pred.cols()) as f64;
    if count == 0.0 {
        return Ok((0.0, Matrix::zeros(pred.rows(), pred.cols())));
    }
    let gamma = cfg.focal_gamma;
    let alpha = cfg.focal_alpha;
    let mut value = 0.0;
    let grad_data: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let pc = p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            let (pt, at, sign) = if t > 0.5 {
                (pc, alpha, 1.0)
            } else {
                (1.0 - pc, 1.0 - alpha, -1.0)
            };
            value += -at * (1.0 - pt).powf(gamma) * pt.ln();
            if p <= CLAMP_EPS || p >= 1.0 - CLAMP_EPS {
                return 0.0;
            }
            let log_term = if gamma == 0.0 {
                0.0
            } else {
                gamma * (1.0 - pt).powf(gamma - 1.0) * pt.ln()
            };
            let d_pt = at * (log_term - (1.0 - pt).powf(gamma) / pt);
            d_pt * sign / count
        })
        .collect();
    Ok((
        value / count,
        Matrix::from_raw(pred.rows(), pred.cols(), grad_data),
    ))
}

/// Per-sample soft dice loss 1 - (2*sum(p*t)+s)/(sum(p)+sum(t)+s), averaged
/// over the batch rows.
pub fn dice_loss(pred: &Matrix, target: &Matrix, cfg: &LossConfig) -> Result<(f64, Matrix)> {
    check_shapes(pred, target)?;
    let n = pred.rows();
    if n == 0 {
        return Ok((0.0, Matrix::zeros(0, pred.cols())));
    }
    let s = cfg.dice_smooth;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(n, pred.cols());
    for i in 0..n {
        let prow = pred.row(i);
        let trow = target.row(i);
        let inter: f64 = prow.iter().zip(trow).map(|(p, t)| p * t).sum();
        let psum: f64 = prow.iter().sum();
        let tsum: f64 = trow.iter().sum();
        let num = 2.0 * inter + s;
        let den = psum + tsum + s;
        value += 1.0 - num / den;
        for j in 0..pred.cols() {
            let g = -(2.0 * trow[j] * den - num) / (den * den) / n as f64;
            grad.set(i, j, g);
        }
    }
    Ok((value / n as f64, grad))
}

/// Component values and the gradient of their weighted sum. Components with
/// zero weight are skipped entirely (value recorded as 0).
pub struct LossBreakdown {
    pub mse: f64,
    pub focal: f64,
    pub dice: f64,
    pub total: f64,
    pub grad: Matrix,
}

pub fn loss_breakdown(pred: &Matrix, target: &Matrix, cfg: &LossConfig) -> Result<LossBreakdown> {
    check_shapes(pred, target)?;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut parts = [0.0_f64; 3];
    let weights = [cfg.mse_weight, cfg.focal_weight, cfg.dice_weight];
    for (slot, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let (v, g) = match slot {
            0 => mse_loss(pred, target)?,
            1 => focal_loss(pred, target, cfg)?,
            _ => dice_loss(pred, target, cfg)?,
        };
        parts[slot] = v;
        grad = grad.add(&g.scale(*w))?;
    }
    let total = weights[0] * parts[0] + weights[1] * parts[1] + weights[2] * parts[2];
    Ok(LossBreakdown {
        mse: parts[0],
        focal: parts[1],
        dice: parts[2],
        total,
        grad,
    })
}

/// Weighted total loss and its gradient with respect to the predictions.
pub fn total_loss(pred: &Matrix, target: &Matrix, cfg: &LossConfig) -> Result<(f64, Matrix)> {
    let b = loss_breakdown(pred, target, cfg)?;
    Ok((b.total, b.grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: u32,
    pub step: u64,
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_focal: f64,
    pub loss_dice: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The trained model; adapters and biases moved, everything else frozen.
    pub model: ToyModel,
    /// One Gram per adapted linear layer from a single full forward pass
    /// over the training inputs of the final model.
    pub grams: BTreeMap<String, GramMatrix>,
    pub history: Vec<LossRecord>,
}

/// Gradients for one block's trainable parameters.
pub(crate) struct BlockGrads {
    pub(crate) bias: Matrix,
    pub(crate) adapter: Option<(Matrix, Matrix)>,
}

/// Analytic gradients of the total loss for every trainable parameter, plus
/// the loss breakdown at the current parameters.
pub(crate) fn compute_grads(
    model: &ToyModel,
    x: &Matrix,
    target: &Matrix,
    lc: &LossConfig,
) -> Result<(LossBreakdown, Vec<BlockGrads>)> {
    let trace = model.forward_trace(x)?;
    let pred = model.head.apply(&trace.logits);
    let breakdown = loss_breakdown(&pred, target, lc)?;
    // dL/dlogits through the head.
    let mut g = breakdown.grad.zip_with(&pred, |dl, p| {
        dl * model.head.derivative_from_output(p)
    })?;

    let nblocks = model.adapted_layers.len();
    let mut grads: Vec<Option<BlockGrads>> = (0..nblocks).map(|_| None).collect();
    for i in (0..nblocks).rev() {
        let block = &model.adapted_layers[i];
        let a_in = &trace.block_inputs[i];
        let bias = column_sums(&g);
        let adapter = match &block.adapter {
            Some(ad) => {
                // grad_a = scaling * (G b)^T A_in, grad_b = scaling * G^T (A_in a^T)
                let gb = g.matmul(&ad.b)?;
                let grad_a = gb.transpose().matmul(a_in)?.scale(ad.scaling);
                let down = a_in.matmul(&ad.a.transpose())?;
                let grad_b = g.transpose().matmul(&down)?.scale(ad.scaling);
                Some((grad_a, grad_b))
            }
            None => None,
        };
        grads[i] = Some(BlockGrads { bias, adapter });
        if i > 0 {
            let upstream = g.matmul(&block.effective_weight().transpose())?;
            // Previous block output went through tanh; tanh' = 1 - a^2.
            g = upstream.zip_with(a_in, |u, a| u * (1.0 - a * a))?;
        }
    }
    Ok((
        breakdown,
        grads.into_iter().map(|bg| bg.unwrap()).collect(),
    ))
}

fn apply_grads(model: &mut ToyModel, grads: &[BlockGrads], lr: f64) -> Result<()> {
    for (block, bg) in model.adapted_layers.iter_mut().zip(grads) {
        block.bias.weight = block.bias.weight.sub(&bg.bias.scale(lr))?;
        if let (Some(ad), Some((ga, gb))) = (&mut block.adapter, &bg.adapter) {
            ad.a = ad.a.sub(&ga.scale(lr))?;
            ad.b = ad.b.sub(&gb.scale(lr))?;
        }
    }
    Ok(())
}

/// SGD fine-tuning from seeded shuffles, then one full capture pass to
/// compute per-layer Grams on the trained model.
pub fn train_task(
    model: &ToyModel,
    task: &TaskDataset,
    tc: &TrainConfig,
    lc: &LossConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    lc.validate()?;
    let n = task.inputs.rows();
    if n == 0 {
        return Err(Error::validation("training set is empty"));
    }
    if task.targets.rows() != n {
        return Err(Error::validation("inputs and targets disagree on rows"));
    }

    let mut model = model.clone();
    let steps_per_epoch = n.div_ceil(tc.batch_size) as u64;
    let total_steps = tc.epochs as u64 * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut history = Vec::new();
    let mut step: u64 = 0;

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size) {
            let xb = gather_rows(&task.inputs, chunk);
            let tb = gather_rows(&task.targets, chunk);
            let (breakdown, grads) = compute_grads(&model, &xb, &tb, lc)?;
            if !breakdown.total.is_finite() {
                return Err(Error::TrainingDiverged { step, task: None });
            }
            apply_grads(&mut model, &grads, tc.lr_at(step, total_steps))?;
            history.push(LossRecord {
                epoch,
                step,
                loss_total: breakdown.total,
                loss_mse: breakdown.mse,
                loss_focal: breakdown.focal,
                loss_dice: breakdown.dice,
            });
            step += 1;
        }
    }

    let (_, captures) = model.forward_capture(&task.inputs, true)?;
    let mut grams = BTreeMap::new();
    for (name, rows) in &captures {
        grams.insert(name.clone(), gram(rows)?);
    }
    Ok(TrainOutcome {
        model,
        grams,
        history,
    })
}

fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::from_raw(idx.len(), m.cols(), data)
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.set(0, j, out.get(0, j) + m.get(i, j));
        }
    }
    out
}

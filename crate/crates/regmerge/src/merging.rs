//! Merge algorithms: the closed-form Gram-weighted merge (pairwise and
//! K-way), the incremental step with its inner-product accumulator, the
//! running-mean fallback for non-linear parameters, and the two LoRA
//! strategies.
//!
//! Linear weights W (m x n) merge as (sum C_i)^-1 sum(C_i W_i) with
//! C_i = X_i^T X_i over each task's captured layer inputs. The incremental
//! form keeps P = sum of past Grams so neither past models nor past data are
//! needed: W_new = (P + C)^-1 (P W_prev + C W), then P += C.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, svd, GramMatrix, Matrix};
use crate::model::{fold_adapters, Checkpoint, LoraAdapter, ParamKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraStrategy {
    /// Fold host + delta into one effective weight and merge that with the
    /// layer-input Grams. Default: the common-input assumption behind the
    /// closed form holds exactly for this reading.
    Composite,
    /// Merge the down-projections `a` through the Gram path (their input is
    /// the captured layer input) and average the up-projections `b`.
    FactorMean,
}

impl std::fmt::Display for LoraStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LoraStrategy::Composite => "composite",
            LoraStrategy::FactorMean => "factor_mean",
        })
    }
}

impl std::str::FromStr for LoraStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "composite" => Ok(LoraStrategy::Composite),
            "factor_mean" => Ok(LoraStrategy::FactorMean),
            other => Err(Error::validation(format!(
                "unknown lora strategy '{other}' (expected composite|factor_mean)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub ridge_scale: f64,
    pub offdiag_scale: f64,
    pub lora_strategy: LoraStrategy,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            ridge_scale: 1e-8,
            offdiag_scale: 1.0,
            lora_strategy: LoraStrategy::Composite,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_scale >= 0.0) || !self.ridge_scale.is_finite() {
            return Err(Error::validation("ridge_scale must be >= 0 and finite"));
        }
        if !(0.0..=1.0).contains(&self.offdiag_scale) {
            return Err(Error::validation("offdiag_scale must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Running merge state: Gram accumulators per linear layer, the merged
/// checkpoint so far, and how many tasks have been folded in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeState {
    pub config: MergeConfig,
    pub task_count: u64,
    pub merge_history: Vec<String>,
    pub accumulators: BTreeMap<String, GramMatrix>,
    pub merged: Option<Checkpoint>,
}

impl MergeState {
    pub fn new(config: MergeConfig) -> Self {
        MergeState {
            config,
            task_count: 0,
            merge_history: Vec::new(),
            accumulators: BTreeMap::new(),
            merged: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if (self.task_count == 0) != self.merged.is_none() {
            return Err(Error::validation(
                "merge state: task_count and merged checkpoint disagree",
            ));
        }
        if self.task_count == 0 && !self.accumulators.is_empty() {
            return Err(Error::validation(
                "merge state: fresh state must have empty accumulators",
            ));
        }
        if self.merge_history.len() as u64 != self.task_count {
            return Err(Error::validation(
                "merge state: merge_history length must equal task_count",
            ));
        }
        if let Some(m) = &self.merged {
            m.validate()?;
            if m.meta.merge_history != self.merge_history {
                return Err(Error::validation(
                    "merge state: merged checkpoint history out of sync",
                ));
            }
        }
        Ok(())
    }

    /// Total floats held by the accumulators: sum of dim^2 over linear layers.
    pub fn accumulator_float_count(&self) -> usize {
        self.accumulators.values().map(|g| g.dim() * g.dim()).sum()
    }
}

/// Closed-form merge of two linear weights.
pub fn merge_pair(
    w1: &Matrix,
    c1: &GramMatrix,
    w2: &Matrix,
    c2: &GramMatrix,
    cfg: &MergeConfig,
) -> Result<Matrix> {
    merge_batch(&[(w1, c1), (w2, c2)], cfg)
}

/// K-way closed-form merge: (sum C_i)^-1 sum(C_i W_i). A single model is
/// returned unchanged rather than run through the solver, so merging one
/// model is exact.
pub fn merge_batch(models: &[(&Matrix, &GramMatrix)], cfg: &MergeConfig) -> Result<Matrix> {
    cfg.validate()?;
    let Some(((w0, c0), rest)) = models.split_first() else {
        return Err(Error::validation("merge_batch requires at least one model"));
    };
    let (m, n) = w0.shape();
    for (w, c) in models {
        if w.shape() != (m, n) {
            return Err(Error::validation("merge_batch: weight shapes differ"));
        }
        if c.dim() != m {
            return Err(Error::validation(format!(
                "merge_batch: gram dim {} does not match weight rows {}",
                c.dim(),
                m
            )));
        }
    }
    if rest.is_empty() {
        return Ok((*w0).clone());
    }
    let mut csum = c0.scale_offdiag(cfg.offdiag_scale).values().clone();
    let mut bsum = csum.matmul(w0)?;
    for (w, c) in rest {
        let cs = c.scale_offdiag(cfg.offdiag_scale);
        csum = csum.add(cs.values())?;
        bsum = bsum.add(&cs.values().matmul(w)?)?;
    }
    solve_spd(&csum, &bsum, cfg.ridge_scale)
}

/// Running arithmetic mean: ((t-1) * prev + w_t) / t for the t-th tensor,
/// computed as prev + (w_t - prev) / t so identical inputs are an exact
/// fixed point.
pub fn mean_step(prev: &Matrix, w_t: &Matrix, t: u64) -> Result<Matrix> {
    if t < 2 {
        return Err(Error::validation("mean_step requires t >= 2"));
    }
    if prev.shape() != w_t.shape() {
        return Err(Error::validation("mean_step: shapes differ"));
    }
    prev.add(&w_t.sub(prev)?.scale(1.0 / t as f64))
}

/// Gram-path merge of one linear tensor against the accumulator.
fn linear_merge(
    p: &GramMatrix,
    c: &GramMatrix,
    w_prev: &Matrix,
    w_t: &Matrix,
    ridge_scale: f64,
) -> Result<Matrix> {
    let a = p.values().add(c.values())?;
    let b = p.values().matmul(w_prev)?.add(&c.values().matmul(w_t)?)?;
    solve_spd(&a, &b, ridge_scale)
}

fn require_gram<'a>(
    c_t: &'a BTreeMap<String, GramMatrix>,
    name: &str,
    expected_dim: usize,
) -> Result<&'a GramMatrix> {
    let c = c_t.get(name).ok_or_else(|| {
        Error::validation(format!("missing gram for linear layer '{name}'"))
    })?;
    if c.dim() != expected_dim {
        return Err(Error::validation(format!(
            "gram for layer '{name}' has dim {}, expected {}",
            c.dim(),
            expected_dim
        )));
    }
    Ok(c)
}

fn task_label(w_t: &Checkpoint, next_count: u64) -> String {
    w_t.meta
        .task_id
        .clone()
        .unwrap_or_else(|| format!("task-{next_count}"))
}

fn check_topology(merged: &Checkpoint, w_t: &Checkpoint) -> Result<()> {
    if merged.topology() != w_t.topology() {
        return Err(Error::TopologyDrift(format!(
            "incoming checkpoint layers do not match merge state (state: {:?}, incoming: {:?})",
            merged.topology(),
            w_t.topology()
        )));
    }
    Ok(())
}

/// One incremental merge step for adapter-free checkpoints.
///
/// First task: the merged model is the task model itself, bitwise, and the
/// accumulator starts from its Grams. Later tasks: linear layers take the
/// Gram-weighted closed form against the accumulator, everything else takes
/// the running mean; the accumulator then absorbs the new Grams.
pub fn regcl_step(
    state: &MergeState,
    w_t: &Checkpoint,
    c_t: &BTreeMap<String, GramMatrix>,
) -> Result<MergeState> {
    state.validate()?;
    w_t.validate()?;
    if !w_t.adapters.is_empty() {
        return Err(Error::validation(
            "regcl_step expects adapter-free checkpoints; fold adapters first or use merge_adapters",
        ));
    }
    for layer in &w_t.layers {
        if layer.kind == ParamKind::Linear {
            require_gram(c_t, &layer.name, layer.weight.rows())?;
        }
    }

    let mut next = state.clone();
    let t_new = state.task_count + 1;
    let label = task_label(w_t, t_new);

    if state.task_count == 0 {
        let mut merged = w_t.clone();
        merged.meta.task_id = None;
        merged.meta.merge_history = vec![label.clone()];
        for layer in &w_t.layers {
            if layer.kind == ParamKind::Linear {
                let c = require_gram(c_t, &layer.name, layer.weight.rows())?;
                next.accumulators.insert(
                    layer.name.clone(),
                    c.scale_offdiag(state.config.offdiag_scale),
                );
            }
        }
        next.merged = Some(merged);
        next.task_count = 1;
        next.merge_history.push(label);
        return Ok(next);
    }

    let prev = state.merged.as_ref().expect("validated nonempty state");
    check_topology(prev, w_t)?;
    for name in state.accumulators.keys() {
        if w_t.layer(name).is_none() {
            return Err(Error::TopologyDrift(format!(
                "accumulator layer '{name}' missing from incoming checkpoint"
            )));
        }
    }

    let mut merged = prev.clone();
    for layer in merged.layers.iter_mut() {
        let incoming = w_t.layer(&layer.name).expect("topology checked");
        match layer.kind {
            ParamKind::Linear => {
                let c = require_gram(c_t, &layer.name, layer.weight.rows())?
                    .scale_offdiag(state.config.offdiag_scale);
                let p = state.accumulators.get(&layer.name).ok_or_else(|| {
                    Error::TopologyDrift(format!(
                        "no accumulator for linear layer '{}'",
                        layer.name
                    ))
                })?;
                layer.weight = linear_merge(
                    p,
                    &c,
                    &layer.weight,
                    &incoming.weight,
                    state.config.ridge_scale,
                )?;
                next.accumulators.insert(layer.name.clone(), p.add(&c)?);
            }
            ParamKind::Other => {
                layer.weight = mean_step(&layer.weight, &incoming.weight, t_new)?;
            }
        }
        if layer.aux.len() != incoming.aux.len() {
            return Err(Error::TopologyDrift(format!(
                "aux tensor count differs on layer '{}'",
                layer.name
            )));
        }
        for (prev_aux, new_aux) in layer.aux.iter_mut().zip(&incoming.aux) {
            *prev_aux = mean_step(prev_aux, new_aux, t_new)?;
        }
    }
    merged.meta.merge_history.push(label.clone());
    next.merged = Some(merged);
    next.task_count = t_new;
    next.merge_history.push(label);
    Ok(next)
}

/// Merge a task checkpoint that carries LoRA adapters, per the configured
/// strategy. Composite folds the adapters into the hosts and defers to
/// [`regcl_step`]; factor_mean keeps the factored form, Gram-merging `a`
/// and averaging `b`, hosts, and biases.
pub fn merge_adapters(
    state: &MergeState,
    w_t: &Checkpoint,
    c_t: &BTreeMap<String, GramMatrix>,
) -> Result<MergeState> {
    match state.config.lora_strategy {
        LoraStrategy::Composite => {
            let folded = fold_adapters(w_t)?;
            regcl_step(state, &folded, c_t)
        }
        LoraStrategy::FactorMean => factor_mean_step(state, w_t, c_t),
    }
}

fn factor_mean_step(
    state: &MergeState,
    w_t: &Checkpoint,
    c_t: &BTreeMap<String, GramMatrix>,
) -> Result<MergeState> {
    state.validate()?;
    w_t.validate()?;
    for ad in &w_t.adapters {
        require_gram(c_t, &ad.layer_name, ad.a.cols())?;
    }

    let mut next = state.clone();
    let t_new = state.task_count + 1;
    let label = task_label(w_t, t_new);

    if state.task_count == 0 {
        let mut merged = w_t.clone();
        merged.meta.task_id = None;
        merged.meta.merge_history = vec![label.clone()];
        for ad in &w_t.adapters {
            let c = require_gram(c_t, &ad.layer_name, ad.a.cols())?;
            next.accumulators.insert(
                ad.layer_name.clone(),
                c.scale_offdiag(state.config.offdiag_scale),
            );
        }
        next.merged = Some(merged);
        next.task_count = 1;
        next.merge_history.push(label);
        return Ok(next);
    }

    let prev = state.merged.as_ref().expect("validated nonempty state");
    check_topology(prev, w_t)?;

    let mut merged = prev.clone();
    for layer in merged.layers.iter_mut() {
        let incoming = w_t.layer(&layer.name).expect("topology checked");
        layer.weight = mean_step(&layer.weight, &incoming.weight, t_new)?;
        for (prev_aux, new_aux) in layer.aux.iter_mut().zip(&incoming.aux) {
            *prev_aux = mean_step(prev_aux, new_aux, t_new)?;
        }
    }
    let mut new_adapters = Vec::with_capacity(merged.adapters.len());
    for prev_ad in &merged.adapters {
        let inc_ad = w_t
            .adapter_for(&prev_ad.layer_name)
            .ok_or_else(|| {
                Error::TopologyDrift(format!(
                    "incoming checkpoint lacks adapter for '{}'",
                    prev_ad.layer_name
                ))
            })?;
        if inc_ad.scaling != prev_ad.scaling || inc_ad.rank != prev_ad.rank {
            return Err(Error::TopologyDrift(format!(
                "adapter '{}' rank/scaling drifted",
                prev_ad.layer_name
            )));
        }
        let c = require_gram(c_t, &prev_ad.layer_name, prev_ad.a.cols())?
            .scale_offdiag(state.config.offdiag_scale);
        let p = state.accumulators.get(&prev_ad.layer_name).ok_or_else(|| {
            Error::TopologyDrift(format!(
                "no accumulator for adapted layer '{}'",
                prev_ad.layer_name
            ))
        })?;
        // a maps the same layer input as the host, so its transpose merges
        // through the Gram path; b has no shared input and takes the mean.
        let a_merged = linear_merge(
            p,
            &c,
            &prev_ad.a.transpose(),
            &inc_ad.a.transpose(),
            state.config.ridge_scale,
        )?
        .transpose();
        let b_merged = mean_step(&prev_ad.b, &inc_ad.b, t_new)?;
        new_adapters.push(LoraAdapter {
            layer_name: prev_ad.layer_name.clone(),
            rank: prev_ad.rank,
            scaling: prev_ad.scaling,
            a: a_merged,
            b: b_merged,
        });
        next.accumulators
            .insert(prev_ad.layer_name.clone(), p.add(&c)?);
    }
    merged.adapters = new_adapters;
    merged.meta.merge_history.push(label.clone());
    next.merged = Some(merged);
    next.task_count = t_new;
    next.merge_history.push(label);
    Ok(next)
}

/// K-way closed-form merge of full checkpoints: adapters are folded first,
/// linear layers go through the Gram-weighted batch merge, everything else
/// (and aux tensors) through the running mean.
pub fn regmean_checkpoints(
    tasks: &[(Checkpoint, BTreeMap<String, GramMatrix>)],
    cfg: &MergeConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::validation("regmean needs at least one checkpoint"));
    }
    let folded: Vec<Checkpoint> = tasks
        .iter()
        .map(|(c, _)| fold_adapters(c))
        .collect::<Result<Vec<_>>>()?;
    for other in &folded[1..] {
        check_topology(&folded[0], other)?;
    }
    let mut out = folded[0].clone();
    out.meta.task_id = None;
    out.meta.merge_history = tasks
        .iter()
        .enumerate()
        .map(|(i, (c, _))| task_label(c, (i + 1) as u64))
        .collect();
    for layer in out.layers.iter_mut() {
        if layer.kind == ParamKind::Linear {
            let dim = layer.weight.rows();
            let mut pairs = Vec::with_capacity(folded.len());
            for (i, f) in folded.iter().enumerate() {
                let w = &f.layer(&layer.name).expect("topology checked").weight;
                let c = require_gram(&tasks[i].1, &layer.name, dim)?;
                pairs.push((w, c));
            }
            layer.weight = merge_batch(&pairs, cfg)?;
        }
        // Non-linear weights and all aux tensors take the mean path.
        for (i, f) in folded.iter().enumerate().skip(1) {
            let inc = f.layer(&layer.name).expect("topology checked");
            if layer.kind != ParamKind::Linear {
                layer.weight = mean_step(&layer.weight, &inc.weight, (i + 1) as u64)?;
            }
            for (pa, na) in layer.aux.iter_mut().zip(&inc.aux) {
                *pa = mean_step(pa, na, (i + 1) as u64)?;
            }
        }
    }
    Ok(out)
}

/// Arithmetic mean of K checkpoints across every parameter tensor, adapters
/// folded first.
pub fn mean_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    if ckpts.is_empty() {
        return Err(Error::validation("mean merge needs at least one checkpoint"));
    }
    let folded: Vec<Checkpoint> = ckpts.iter().map(fold_adapters).collect::<Result<Vec<_>>>()?;
    for other in &folded[1..] {
        check_topology(&folded[0], other)?;
    }
    let mut out = folded[0].clone();
    out.meta.task_id = None;
    out.meta.merge_history = ckpts
        .iter()
        .enumerate()
        .map(|(i, c)| task_label(c, (i + 1) as u64))
        .collect();
    for layer in out.layers.iter_mut() {
        for (i, f) in folded.iter().enumerate().skip(1) {
            let inc = f.layer(&layer.name).expect("topology checked");
            layer.weight = mean_step(&layer.weight, &inc.weight, (i + 1) as u64)?;
            for (pa, na) in layer.aux.iter_mut().zip(&inc.aux) {
                *pa = mean_step(pa, na, (i + 1) as u64)?;
            }
        }
    }
    Ok(out)
}

/// Export-only re-factorization of a merged checkpoint back into rank-r
/// adapters over a base checkpoint, via truncated SVD of each linear layer's
/// delta. Evaluation paths never call this; full effective weights stay the
/// source of truth.
pub fn export_low_rank(
    base: &Checkpoint,
    merged: &Checkpoint,
    rank: usize,
    scaling: f64,
) -> Result<Vec<LoraAdapter>> {
    check_topology(base, merged)?;
    if rank == 0 {
        return Err(Error::validation("export rank must be positive"));
    }
    if !(scaling.is_finite() && scaling != 0.0) {
        return Err(Error::validation("export scaling must be finite and nonzero"));
    }
    let mut adapters = Vec::new();
    for layer in &base.layers {
        if layer.kind != ParamKind::Linear {
            continue;
        }
        let (m, n) = layer.weight.shape();
        if rank > m.min(n) {
            return Err(Error::validation(format!(
                "export rank {} exceeds min({}, {}) for layer '{}'",
                rank, m, n, layer.name
            )));
        }
        let merged_layer = merged.layer(&layer.name).expect("topology checked");
        // delta^T = U diag(sigma) V^T, so b = U sqrt(sigma), a = sqrt(sigma) V^T
        // reproduces scaling * (b a)^T = truncated delta.
        let delta_t = merged_layer.weight.sub(&layer.weight)?.transpose();
        let (u, sigma, v) = svd(&delta_t);
        let mut b = Matrix::zeros(n, rank);
        let mut a = Matrix::zeros(rank, m);
        for j in 0..rank {
            let root = sigma[j].sqrt();
            for i in 0..n {
                b.set(i, j, u.get(i, j) * root);
            }
            for i in 0..m {
                a.set(j, i, v.get(i, j) * root / scaling);
            }
        }
        adapters.push(LoraAdapter::new(layer.name.clone(), a, b, scaling)?);
    }
    Ok(adapters)
}

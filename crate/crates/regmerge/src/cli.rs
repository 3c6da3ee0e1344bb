//! Command-line interface: dataset generation, model init, task training,
//! merging, evaluation, and full sequence runs. Every command is
//! deterministic given its inputs and seed, and re-runs overwrite outputs
//! byte-identically.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{
    default5_suite, evaluate_checkpoint, gen_domain, run_sequence, DomainSpec, SequenceOptions,
    Strategy, TaskDataset,
};
use crate::io;
use crate::merging::{
    mean_checkpoints, merge_adapters, regmean_checkpoints, LoraStrategy, MergeConfig, MergeState,
};
use crate::model::{CheckpointMeta, ModelConfig, ToyModel};
use crate::plot;
use crate::seed::subseed;
use crate::training::{train_task, LossConfig, TrainConfig};

/// Full description of a sequence run; stored as JSON and echoed into results.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub strategy: Strategy,
    /// Empty means the default5 suite derived from the seed.
    pub sequence: Vec<DomainSpec>,
    pub n_train: usize,
    pub n_test: usize,
    pub arch: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub merge: MergeConfig,
    pub replay_k: Option<usize>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            strategy: Strategy::Regcl,
            sequence: Vec::new(),
            n_train: 512,
            n_test: 128,
            arch: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            merge: MergeConfig::default(),
            replay_k: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// The domain sequence, falling back to the canonical suite.
    pub fn resolved_sequence(&self) -> Vec<DomainSpec> {
        if self.sequence.is_empty() {
            default5_suite(self.seed)
        } else {
            self.sequence.clone()
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "regmerge",
    about = "Closed-form continual model merging on a synthetic benchmark",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/test dataset files for a domain suite.
    Gen(GenArgs),
    /// Write a fresh seeded model checkpoint with zero-delta adapters.
    Init(InitArgs),
    /// Fine-tune a checkpoint on one task and capture its layer Grams.
    Train(TrainArgs),
    /// Merge checkpoints (closed-form batch, incremental, or plain mean).
    Merge(MergeArgs),
    /// Evaluate a checkpoint on a test split.
    Eval(EvalArgs),
    /// Run a full domain-incremental sequence under one strategy.
    Sequence(SequenceArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON RunConfig file; explicit flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Domain suite name.
    #[arg(long, default_value = "default5")]
    suite: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Output directory for the dataset files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Training split dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Starting checkpoint (usually from `init`).
    #[arg(long)]
    init: PathBuf,
    /// Output path for the trained checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Gram file path; defaults to a sibling of --out.
    #[arg(long)]
    grams: Option<PathBuf>,
    /// Loss history path; defaults to a sibling of --out.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MergeMode {
    Regmean,
    Regcl,
    Mean,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_enum)]
    mode: MergeMode,
    /// checkpoint:grams path pair; repeat for K-way regmean.
    #[arg(long = "pair", value_name = "CKPT:GRAMS")]
    pairs: Vec<String>,
    /// Checkpoint path (repeat for K-way mean).
    #[arg(long = "ckpt")]
    ckpts: Vec<PathBuf>,
    /// Gram file accompanying --ckpt in regcl mode.
    #[arg(long)]
    grams: Option<PathBuf>,
    /// Merge state file for regcl mode; created fresh when missing.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Output path: merged checkpoint (regmean/mean) or updated state (regcl,
    /// defaults to --state).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the regcl merged checkpoint here.
    #[arg(long)]
    merged_out: Option<PathBuf>,
    #[arg(long)]
    ridge_scale: Option<f64>,
    #[arg(long)]
    offdiag_scale: Option<f64>,
    #[arg(long)]
    lora_strategy: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    ckpt: PathBuf,
    /// Test split dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Metrics output path; omit to print to stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SequenceArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replay_k: Option<usize>,
    /// Emit R-matrix heatmaps and loss curves as PNG files.
    #[arg(long)]
    plot: bool,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    ridge_scale: Option<f64>,
    #[arg(long)]
    offdiag_scale: Option<f64>,
    #[arg(long)]
    lora_strategy: Option<String>,
}

pub fn run() -> Result<()> {
    let cli = Cli::parse();
    dispatch(cli)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Init(args) => cmd_init(args),
        Command::Train(args) => cmd_train(args),
        Command::Merge(args) => cmd_merge(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sequence(args) => cmd_sequence(args),
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(path) => io::load_json(path),
        None => Ok(RunConfig::default()),
    }
}

fn apply_merge_overrides(
    mc: &mut MergeConfig,
    ridge: Option<f64>,
    offdiag: Option<f64>,
    lora: Option<&str>,
) -> Result<()> {
    if let Some(r) = ridge {
        mc.ridge_scale = r;
    }
    if let Some(o) = offdiag {
        mc.offdiag_scale = o;
    }
    if let Some(l) = lora {
        mc.lora_strategy = l.parse::<LoraStrategy>().map_err(|_| {
            Error::validation(format!(
                "invalid --lora-strategy '{l}' (expected composite|factor_mean)"
            ))
        })?;
    }
    mc.validate()
}

fn dataset_paths(dir: &Path, spec: &DomainSpec) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{}.train.json", spec.name)),
        dir.join(format!("{}.test.json", spec.name)),
    )
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = args.n_test {
        cfg.n_test = n;
    }
    let sequence = match args.suite.as_str() {
        "default5" => default5_suite(cfg.seed),
        "config" => {
            let seq = cfg.resolved_sequence();
            if seq.is_empty() {
                return Err(Error::validation(
                    "--suite config requires a config file with a sequence",
                ));
            }
            seq
        }
        other => {
            return Err(Error::validation(format!(
                "unknown --suite '{other}' (expected default5 or config)"
            )))
        }
    };
    for spec in &sequence {
        let (train, test) = gen_domain(spec, cfg.n_train, cfg.n_test)?;
        let (train_path, test_path) = dataset_paths(&args.out, spec);
        io::save_dataset(&train_path, &train)?;
        io::save_dataset(&test_path, &test)?;
        println!("wrote {} and {}", train_path.display(), test_path.display());
    }
    Ok(())
}

fn cmd_init(args: InitArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let model = ToyModel::init(&cfg.arch, subseed(cfg.seed, "model"))?;
    let ckpt = model.to_checkpoint(CheckpointMeta::new(cfg.seed));
    io::save_checkpoint(&args.out, &ckpt)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    out.with_file_name(format!("{stem}.{suffix}.json"))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    let task = io::load_dataset(&args.data)?;
    let init = io::load_checkpoint(&args.init)?;
    let model = ToyModel::from_checkpoint(&init)?;
    let tc = TrainConfig {
        seed: subseed(cfg.seed, &format!("train.{}", task.task_id)),
        ..cfg.train.clone()
    };
    let outcome = train_task(&model, &task, &tc, &cfg.loss)?;
    let meta = CheckpointMeta {
        seed: cfg.seed,
        task_id: Some(task.task_id.clone()),
        merge_history: Vec::new(),
        arch: init.meta.arch.clone(),
    };
    let trained = outcome.model.to_checkpoint(meta);
    io::save_checkpoint(&args.out, &trained)?;
    let grams_path = args.grams.unwrap_or_else(|| sibling(&args.out, "grams"));
    io::save_grams(&grams_path, &outcome.grams)?;
    let history_path = args.history.unwrap_or_else(|| sibling(&args.out, "history"));
    io::save_json(&history_path, &outcome.history)?;
    println!(
        "wrote {}, {}, {}",
        args.out.display(),
        grams_path.display(),
        history_path.display()
    );
    Ok(())
}

fn parse_pair(raw: &str) -> Result<(PathBuf, PathBuf)> {
    let (ckpt, grams) = raw.rsplit_once(':').ok_or_else(|| {
        Error::validation(format!("--pair '{raw}' must look like ckpt.json:grams.json"))
    })?;
    Ok((PathBuf::from(ckpt), PathBuf::from(grams)))
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let mut mc = cfg.merge.clone();
    apply_merge_overrides(
        &mut mc,
        args.ridge_scale,
        args.offdiag_scale,
        args.lora_strategy.as_deref(),
    )?;
    match args.mode {
        MergeMode::Regmean => {
            if args.pairs.is_empty() {
                return Err(Error::validation(
                    "regmean mode needs at least one --pair ckpt.json:grams.json",
                ));
            }
            let out = args
                .out
                .ok_or_else(|| Error::validation("regmean mode requires --out"))?;
            let mut tasks = Vec::with_capacity(args.pairs.len());
            for raw in &args.pairs {
                let (ckpt_path, grams_path) = parse_pair(raw)?;
                tasks.push((
                    io::load_checkpoint(&ckpt_path)?,
                    io::load_grams(&grams_path)?,
                ));
            }
            let merged = regmean_checkpoints(&tasks, &mc)?;
            io::save_checkpoint(&out, &merged)?;
            println!("wrote {}", out.display());
        }
        MergeMode::Regcl => {
            let state_path = args
                .state
                .ok_or_else(|| Error::validation("regcl mode requires --state"))?;
            let (ckpt_path, grams_path) = match (args.pairs.as_slice(), args.ckpts.as_slice()) {
                ([raw], []) => parse_pair(raw)?,
                ([], [ckpt]) => {
                    let grams = args.grams.clone().ok_or_else(|| {
                        Error::validation("regcl mode requires --grams with --ckpt")
                    })?;
                    (ckpt.clone(), grams)
                }
                _ => {
                    return Err(Error::validation(
                        "regcl mode consumes exactly one checkpoint/grams pair",
                    ))
                }
            };
            let state = if state_path.exists() {
                io::load_state(&state_path)?
            } else {
                MergeState::new(mc)
            };
            let ckpt = io::load_checkpoint(&ckpt_path)?;
            let grams = io::load_grams(&grams_path)?;
            let next = merge_adapters(&state, &ckpt, &grams)?;
            let out = args.out.unwrap_or(state_path);
            io::save_state(&out, &next)?;
            println!("wrote {}", out.display());
            if let Some(merged_out) = args.merged_out {
                let merged = next
                    .merged
                    .as_ref()
                    .expect("state holds a merged checkpoint after a step");
                io::save_checkpoint(&merged_out, merged)?;
                println!("wrote {}", merged_out.display());
            }
        }
        MergeMode::Mean => {
            if args.ckpts.is_empty() {
                return Err(Error::validation("mean mode needs at least one --ckpt"));
            }
            let out = args
                .out
                .ok_or_else(|| Error::validation("mean mode requires --out"))?;
            let mut ckpts = Vec::with_capacity(args.ckpts.len());
            for path in &args.ckpts {
                ckpts.push(io::load_checkpoint(path)?);
            }
            let merged = mean_checkpoints(&ckpts)?;
            io::save_checkpoint(&out, &merged)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = io::load_checkpoint(&args.ckpt)?;
    let data = io::load_dataset(&args.data)?;
    let model = ToyModel::from_checkpoint(&ckpt)?;
    if model.input_dim() != data.inputs.cols() || model.output_dim() != data.targets.cols() {
        return Err(Error::TopologyDrift(format!(
            "checkpoint maps {} -> {} but dataset provides {} -> {}",
            model.input_dim(),
            model.output_dim(),
            data.inputs.cols(),
            data.targets.cols()
        )));
    }
    let metrics = evaluate_checkpoint(&ckpt, &data)?;
    let bytes = io::to_json_bytes(&metrics)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    if let Some(out) = &args.out {
        io::save_json(out, &metrics)?;
    }
    Ok(())
}

fn cmd_sequence(args: SequenceArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(strategy) = &args.strategy {
        cfg.strategy = strategy.parse()?;
    }
    if let Some(k) = args.replay_k {
        cfg.replay_k = Some(k);
    }
    if let Some(n) = args.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = args.n_test {
        cfg.n_test = n;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    apply_merge_overrides(
        &mut cfg.merge,
        args.ridge_scale,
        args.offdiag_scale,
        args.lora_strategy.as_deref(),
    )?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    run_sequence_to_dir(&cfg, args.plot)
}

/// Generate the configured domains, run the sequence, and write every
/// artifact under the output directory.
pub fn run_sequence_to_dir(cfg: &RunConfig, plot: bool) -> Result<()> {
    let sequence = cfg.resolved_sequence();
    let mut tasks: Vec<(TaskDataset, TaskDataset)> = Vec::with_capacity(sequence.len());
    for spec in &sequence {
        tasks.push(gen_domain(spec, cfg.n_train, cfg.n_test)?);
    }
    let opts = SequenceOptions {
        model: cfg.arch.clone(),
        train: cfg.train.clone(),
        loss: cfg.loss.clone(),
        merge: cfg.merge.clone(),
        replay_k: cfg.replay_k,
        seed: cfg.seed,
    };
    let outcome = run_sequence(tasks.as_slice(), cfg.strategy, &opts)?;

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    let results = io::ResultsFile {
        strategy: cfg.strategy,
        seed: cfg.seed,
        task_ids: outcome.task_ids.clone(),
        r: outcome
            .r_matrices
            .iter()
            .map(|(name, m)| (name.clone(), m.as_rows()))
            .collect(),
        metrics: outcome.metrics.clone(),
        config_echo: serde_json::to_value(cfg)?,
    };
    io::save_json(&dir.join("results.json"), &results)?;
    io::save_checkpoint(&dir.join("merged.json"), &outcome.final_checkpoint)?;
    if let Some(state) = &outcome.merge_state {
        io::save_state(&dir.join("state.json"), state)?;
    }
    for (ckpt, task_id) in outcome.step_checkpoints.iter().zip(&outcome.task_ids) {
        io::save_checkpoint(&dir.join(format!("step_{task_id}.json")), ckpt)?;
    }
    for (hist, task_id) in outcome.histories.iter().zip(&outcome.task_ids) {
        io::save_json(&dir.join(format!("loss_{task_id}.json")), hist)?;
    }
    if plot {
        for (name, rm) in &outcome.r_matrices {
            plot::save_heatmap(&dir.join(format!("r_{name}.png")), rm)?;
        }
        if outcome.histories.iter().any(|h| !h.is_empty()) {
            plot::save_loss_curves(&dir.join("loss_curves.png"), &outcome.histories)?;
        }
    }
    for (name, m) in &outcome.metrics {
        println!(
            "{} {}: acc {:.4} bwt {:+.4} fwt {:.4}",
            cfg.strategy, name, m.acc, m.bwt, m.fwt
        );
    }
    println!("wrote {}", dir.join("results.json").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_defaults_round_trip() {
        let cfg = RunConfig::default();
        let bytes = io::to_json_bytes(&cfg).unwrap();
        let back: RunConfig = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(cfg.seed, back.seed);
        assert_eq!(cfg.strategy, back.strategy);
        assert_eq!(cfg.n_train, back.n_train);
        // Empty sequence resolves to the canonical suite.
        assert_eq!(cfg.resolved_sequence().len(), 5);
    }

    #[test]
    fn pair_parsing() {
        let (c, g) = parse_pair("a/b.json:c/d.json").unwrap();
        assert_eq!(c, PathBuf::from("a/b.json"));
        assert_eq!(g, PathBuf::from("c/d.json"));
        assert!(parse_pair("no-colon").is_err());
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(
            sibling(Path::new("out/task1.json"), "grams"),
            PathBuf::from("out/task1.grams.json")
        );
    }
}

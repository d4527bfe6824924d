//! One function per subcommand. Each parses and validates its config,
//! then creates the output directory, writes the snapshot, and runs.

use std::path::{Path, PathBuf};

use adaptive_depth::baselines::FixedMaskParams;
use adaptive_depth::data::{generate_corpus, load_dataset, write_dataset, SyntheticSceneConfig};
use adaptive_depth::depth::{depth_histogram, DepthSequence, SamplingBudget};
use adaptive_depth::mask::Temperature;
use adaptive_depth::nn::checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, Checkpoint, Component, TrainingMetadata,
};
use adaptive_depth::nn::models::{PredNetModel, ReferenceCompletion, SamplerNet};
use adaptive_depth::pipeline::{
    evaluate_agnostic, evaluate_fixed, evaluate_sampler_trace, generate_pseudo_gt, mix_and_match_eval,
    run_end_to_end_all, stage1_pretrain_completion, stage2_train_sampler, stage3_joint_finetune,
    train_fixed_mask, train_prednet, AgnosticSampler, E2EConfig, E2EModels, PriorSource, Stage, StageReport,
    Trace, TrainConfig, Validation,
};
use adaptive_depth::priors::{PriorMode, ReconstructionStore};
use adaptive_depth::Error;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use toml::Table;

use crate::settings::{from_table, split_io, write_snapshot, Io};

type Result<T> = std::result::Result<T, Error>;

/// Flags shared by every run command.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    pub allow_fresh: bool,
}

pub const REPORT_FILE: &str = "report.json";
pub const HIST_BIN_WIDTH: f64 = 5.0;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Refuses to write into an input dataset directory.
fn prepare_out(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    for input in inputs {
        let dir = if input.is_file() { input.parent().unwrap_or(input) } else { input };
        if let (Some(a), Some(b)) = (canon(out), canon(dir)) {
            if a == b {
                return Err(config_err(format!(
                    "output directory {} is an input directory",
                    out.display()
                )));
            }
        }
    }
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn metadata<C: Serialize>(cfg: &C, epochs: usize, seed: u64) -> TrainingMetadata {
    TrainingMetadata {
        epoch: epochs,
        seed,
        config_hash: config_hash(cfg),
    }
}

fn load_tagged(path: &Path, component: Component) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.expect(component)?;
    Ok(ckpt)
}

fn load_completion(path: &Path) -> Result<ReferenceCompletion<f32>> {
    ReferenceCompletion::from_checkpoint(&load_tagged(path, Component::Completion)?)
}

fn load_sampler(path: &Path) -> Result<SamplerNet<f32>> {
    SamplerNet::from_checkpoint(&load_tagged(path, Component::Sampler)?)
}

fn load_prednet(path: &Path) -> Result<PredNetModel<f32>> {
    PredNetModel::from_checkpoint(&load_tagged(path, Component::PredNet)?)
}

fn load_fixed(path: &Path) -> Result<FixedMaskParams> {
    FixedMaskParams::from_checkpoint(&load_tagged(path, Component::FixedMask)?)
}

/// A checkpoint from the previous stage, or a fresh model with `--allow-fresh`.
fn previous<T>(
    path: Option<&PathBuf>,
    field: &str,
    allow_fresh: bool,
    load: impl FnOnce(&Path) -> Result<T>,
    fresh: impl FnOnce() -> Result<T>,
) -> Result<T> {
    match path {
        Some(p) => load(p),
        None if allow_fresh => {
            warn!("no `{field}` checkpoint; starting from a fresh model (--allow-fresh)");
            fresh()
        }
        None => Err(config_err(format!(
            "missing checkpoint field `{field}` (pass --allow-fresh to start from scratch)"
        ))),
    }
}

/// Checks up front that every earlier-stage checkpoint is named.
fn require_previous(fields: &[(&str, Option<&PathBuf>)], allow_fresh: bool) -> Result<()> {
    match fields.iter().find(|(_, p)| p.is_none()) {
        Some((field, _)) if !allow_fresh => Err(config_err(format!(
            "missing checkpoint field `{field}` (pass --allow-fresh to start from scratch)"
        ))),
        _ => Ok(()),
    }
}

fn load_data(path: &Path) -> Result<Vec<DepthSequence>> {
    let data = load_dataset(path)?;
    if data.is_empty() {
        return Err(Error::Data(format!("dataset {} has no sequences", path.display())));
    }
    Ok(data)
}

fn split_train(mut table: Table, stage_default: Stage) -> Result<(TrainConfig, Io)> {
    let io: Io = split_io(&mut table)?;
    if !table.contains_key("stage") {
        table.insert("stage".into(), toml::Value::String(stage_default.as_str().into()));
    }
    let stage: Stage = from_table::<StageOnly>(stage_table(&table), "config")?.stage;
    let base = TrainConfig::for_stage(stage);
    let merged = merge_defaults(&base, table)?;
    let cfg: TrainConfig = from_table(merged, "config")?;
    cfg.validate()?;
    Ok((cfg, io))
}

#[derive(Deserialize)]
struct StageOnly {
    stage: Stage,
}

fn stage_table(table: &Table) -> Table {
    let mut t = Table::new();
    t.insert("stage".into(), table["stage"].clone());
    t
}

/// Stage defaults overlaid with the keys the user set.
fn merge_defaults<T: Serialize>(base: &T, user: Table) -> Result<Table> {
    let mut merged = Table::try_from(base).map_err(|e| config_err(format!("defaults: {e}")))?;
    merge_into(&mut merged, user);
    Ok(merged)
}

fn merge_into(base: &mut Table, user: Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge_into(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn finish_report(out: &Path, report: &StageReport) -> Result<()> {
    write_json(&out.join(REPORT_FILE), report)
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub schema_version: u32,
    /// Master seed; replaces `scene.seed`.
    pub seed: u64,
    pub sequences: usize,
    pub frames: usize,
    pub split: String,
    pub scene: SyntheticSceneConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            seed: 0,
            sequences: 8,
            frames: 20,
            split: "train".into(),
            scene: SyntheticSceneConfig::default(),
        }
    }
}

pub fn gen_data(table: Table, opts: &RunOptions) -> Result<()> {
    let mut cfg: GenDataConfig = from_table(table, "config")?;
    cfg.scene.seed = cfg.seed;
    if cfg.schema_version != 1 {
        return Err(config_err(format!("unknown config schema_version {}", cfg.schema_version)));
    }
    if cfg.sequences == 0 || cfg.frames == 0 {
        return Err(config_err("sequences and frames must be >= 1"));
    }
    cfg.scene.validate()?;
    prepare_out(&opts.out, &[])?;
    write_snapshot(&opts.out, &cfg, None)?;
    let corpus = generate_corpus(&cfg.scene, cfg.sequences, cfg.frames)?;
    let manifest = write_dataset(&corpus, &opts.out, &cfg.split)?;
    info!("wrote {} sequences, {} frames", manifest.sequences.len(), manifest.total_frames());
    Ok(())
}

// ------------------------------------------------------- train-completion

pub fn train_completion(table: Table, opts: &RunOptions) -> Result<()> {
    let (cfg, io) = split_train(table, Stage::PretrainCompletion)?;
    if cfg.stage != Stage::PretrainCompletion {
        return Err(config_err(format!("train-completion runs stage pretrain_completion, not {}", cfg.stage)));
    }
    let data_path = io.require_data()?;
    prepare_out(&opts.out, &[data_path])?;
    write_snapshot(&opts.out, &cfg, Some(&io))?;
    let data = load_data(data_path)?;
    let mut completion = match &cfg.load_from.completion {
        Some(p) => load_completion(p)?,
        None => ReferenceCompletion::new(cfg.models.completion, cfg.seed)?,
    };
    let report = stage1_pretrain_completion(&cfg, &data, &mut completion, io.pattern)?;
    save_checkpoint(
        &completion.to_checkpoint(metadata(&cfg, cfg.epochs, cfg.seed)),
        opts.out.join("completion.safetensors"),
    )?;
    finish_report(&opts.out, &report)
}

// ---------------------------------------------------------- train-sampler

pub fn train_sampler(table: Table, opts: &RunOptions) -> Result<()> {
    let (cfg, io) = split_train(table, Stage::TrainSampler)?;
    if !matches!(cfg.stage, Stage::TrainSampler | Stage::JointFinetune | Stage::ImplicitPred) {
        return Err(config_err(format!(
            "train-sampler runs train_sampler, joint_finetune or implicitpred, not {}",
            cfg.stage
        )));
    }
    if cfg.stage == Stage::ImplicitPred && cfg.prior_mode != PriorMode::Implicit {
        return Err(config_err("stage implicitpred needs prior_mode implicit"));
    }
    let memory = cfg.memory();
    let needs_store = cfg.prior_mode.needs_history();
    if needs_store {
        io.require_store()?;
    }
    if cfg.prior_mode == PriorMode::Implicit && io.references.is_none() {
        return Err(config_err("missing field `io.references` (implicit mode)"));
    }
    let lf = &cfg.load_from;
    let mut earlier = vec![("load_from.completion", lf.completion.as_ref())];
    if cfg.stage == Stage::JointFinetune {
        earlier.push(("load_from.sampler", lf.sampler.as_ref()));
    }
    if cfg.prior_mode == PriorMode::PredNet {
        earlier.push(("load_from.prednet", lf.prednet.as_ref()));
    }
    require_previous(&earlier, opts.allow_fresh)?;
    let data_path = io.require_data()?;
    prepare_out(&opts.out, &[data_path])?;
    write_snapshot(&opts.out, &cfg, Some(&io))?;

    let data = load_data(data_path)?;
    let m = cfg.models;
    let mut completion = previous(
        cfg.load_from.completion.as_ref(),
        "load_from.completion",
        opts.allow_fresh,
        load_completion,
        || ReferenceCompletion::new(m.completion, cfg.seed),
    )?;
    let channels = cfg.prior_mode.sampler_channels(memory);
    let fresh_sampler = || -> Result<SamplerNet<f32>> {
        let mut s = SamplerNet::new(m.sampler.levels, m.sampler.base_channels, channels, cfg.seed)?;
        let (h, w) = data[0].shape().expect("frames");
        s.init_density(cfg.budget.k() as f64 / (h * w) as f64, cfg.temperature);
        Ok(s)
    };
    let mut sampler = if cfg.stage == Stage::JointFinetune {
        previous(cfg.load_from.sampler.as_ref(), "load_from.sampler", opts.allow_fresh, load_sampler, fresh_sampler)?
    } else {
        match &cfg.load_from.sampler {
            Some(p) => load_sampler(p)?,
            None => fresh_sampler()?,
        }
    };
    let prednet = match cfg.prior_mode {
        PriorMode::PredNet => Some(previous(
            cfg.load_from.prednet.as_ref(),
            "load_from.prednet",
            opts.allow_fresh,
            load_prednet,
            || PredNetModel::new(m.prednet.levels, m.prednet.base_channels, memory, m.prednet_residual, cfg.seed),
        )?),
        _ => None,
    };
    let store = io.store.as_ref().filter(|_| needs_store).map(ReconstructionStore::load).transpose()?;
    let references = io.references.as_ref().filter(|_| cfg.prior_mode == PriorMode::Implicit);
    let references = references.map(ReconstructionStore::load).transpose()?;
    let source = match (&store, cfg.prior_mode) {
        (_, PriorMode::LowerBound) => PriorSource::GroundTruth,
        (Some(store), mode) => PriorSource::Stored {
            mode,
            store,
            prednet: prednet.as_ref(),
            memory,
        },
        (None, mode) => return Err(config_err(format!("prior_mode {mode} is not trainable here"))),
    };

    let meta = metadata(&cfg, cfg.epochs, cfg.seed);
    if cfg.stage == Stage::JointFinetune {
        let val = io.val_data.as_deref().map(load_data).transpose()?;
        let val_store = io.val_store.as_ref().map(ReconstructionStore::load).transpose()?;
        let validation = match (&val, &source) {
            (Some(v), PriorSource::GroundTruth) => Some(Validation {
                data: v,
                source: PriorSource::GroundTruth,
            }),
            (Some(v), PriorSource::Stored { mode, prednet, memory, .. }) => {
                let store = val_store
                    .as_ref()
                    .ok_or_else(|| config_err("missing field `io.val_store` for a stored-prior guard"))?;
                Some(Validation {
                    data: v,
                    source: PriorSource::Stored {
                        mode: *mode,
                        store,
                        prednet: *prednet,
                        memory: *memory,
                    },
                })
            }
            (None, _) => None,
        };
        let report = stage3_joint_finetune(
            &cfg,
            &data,
            &mut sampler,
            &mut completion,
            &source,
            references.as_ref(),
            validation,
        )?;
        save_checkpoint(&completion.to_checkpoint(meta.clone()), opts.out.join("completion.safetensors"))?;
        save_checkpoint(&sampler.to_checkpoint(meta), opts.out.join("sampler.safetensors"))?;
        finish_report(&opts.out, &report)
    } else {
        let out = stage2_train_sampler(&cfg, &data, &mut completion, &mut sampler, &source, references.as_ref())?;
        save_checkpoint(&sampler.to_checkpoint(meta), opts.out.join("sampler.safetensors"))?;
        out.reconstructions.save(opts.out.join("store"))?;
        out.sampled_maps.save(opts.out.join("sampled_maps"))?;
        finish_report(&opts.out, &out.report)
    }
}

// ------------------------------------------------------------ train-fixed

pub fn train_fixed(table: Table, opts: &RunOptions) -> Result<()> {
    let (cfg, io) = split_train(table, Stage::FixedMask)?;
    if cfg.stage != Stage::FixedMask {
        return Err(config_err(format!("train-fixed runs stage fixed_mask, not {}", cfg.stage)));
    }
    require_previous(&[("load_from.completion", cfg.load_from.completion.as_ref())], opts.allow_fresh)?;
    let data_path = io.require_data()?;
    prepare_out(&opts.out, &[data_path])?;
    write_snapshot(&opts.out, &cfg, Some(&io))?;
    let data = load_data(data_path)?;
    let mut completion = previous(
        cfg.load_from.completion.as_ref(),
        "load_from.completion",
        opts.allow_fresh,
        load_completion,
        || ReferenceCompletion::new(cfg.models.completion, cfg.seed),
    )?;
    let init = cfg.load_from.fixed_mask.as_deref().map(load_fixed).transpose()?;
    let (mask, report) = train_fixed_mask(&cfg, &data, &mut completion, init)?;
    let meta = metadata(&cfg, cfg.epochs, cfg.seed);
    save_checkpoint(&mask.to_checkpoint(meta.clone()), opts.out.join("fixed_mask.safetensors"))?;
    if cfg.joint_completion {
        save_checkpoint(&completion.to_checkpoint(meta), opts.out.join("completion.safetensors"))?;
    }
    finish_report(&opts.out, &report)
}

// ---------------------------------------------------------- train-prednet

pub fn train_prednet_cmd(table: Table, opts: &RunOptions) -> Result<()> {
    let (cfg, io) = split_train(table, Stage::PredNet)?;
    if cfg.stage != Stage::PredNet {
        return Err(config_err(format!("train-prednet runs stage prednet, not {}", cfg.stage)));
    }
    let store_path = io.require_store()?;
    let data_path = io.require_data()?;
    prepare_out(&opts.out, &[data_path, store_path])?;
    write_snapshot(&opts.out, &cfg, Some(&io))?;
    let data = load_data(data_path)?;
    let store = ReconstructionStore::load(store_path)?;
    let m = cfg.models;
    let mut prednet = match &cfg.load_from.prednet {
        Some(p) => load_prednet(p)?,
        None => PredNetModel::new(m.prednet.levels, m.prednet.base_channels, cfg.memory(), m.prednet_residual, cfg.seed)?,
    };
    let report = train_prednet(&cfg, &data, &store, &mut prednet)?;
    save_checkpoint(
        &prednet.to_checkpoint(metadata(&cfg, cfg.epochs, cfg.seed)),
        opts.out.join("prednet.safetensors"),
    )?;
    finish_report(&opts.out, &report)
}

// ---------------------------------------------------------- gen-pseudo-gt

pub fn gen_pseudo_gt(table: Table, opts: &RunOptions) -> Result<()> {
    let (cfg, io) = split_train(table, Stage::PretrainCompletion)?;
    let data_path = io.require_data()?;
    prepare_out(&opts.out, &[data_path])?;
    write_snapshot(&opts.out, &cfg, Some(&io))?;
    let data = load_data(data_path)?;
    let mut completion = match &cfg.load_from.completion {
        Some(p) => load_completion(p)?,
        None => ReferenceCompletion::new(cfg.models.completion, cfg.seed)?,
    };
    let (dense, report) = generate_pseudo_gt(&cfg, &data, &mut completion)?;
    write_dataset(&dense, opts.out.join("dataset"), "pseudo_gt")?;
    save_checkpoint(
        &completion.to_checkpoint(metadata(&cfg, cfg.epochs, cfg.seed)),
        opts.out.join("completion.safetensors"),
    )?;
    finish_report(&opts.out, &report)
}

// --------------------------------------------------------------- traces

/// Writes `trace_<method>.csv` and `hist_<method>.csv`.
pub fn write_trace(out: &Path, method: &str, trace: &Trace, max_range: f64) -> Result<()> {
    trace.write_csv(out.join(format!("trace_{method}.csv")))?;
    let bins = (max_range / HIST_BIN_WIDTH).ceil().max(1.0) as usize;
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 * max_range / bins as f64).collect();
    let mut text = String::from("bin_lo,bin_hi,fraction\n");
    if !trace.sampled_depths.is_empty() {
        let fractions = depth_histogram(&trace.sampled_depths, &edges)?;
        for (i, f) in fractions.iter().enumerate() {
            text.push_str(&format!("{},{},{f}\n", edges[i], edges[i + 1]));
        }
    }
    let path = out.join(format!("hist_{method}.csv"));
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    method: &'a str,
    all_frames: Option<adaptive_depth::pipeline::Metrics>,
}

fn write_metrics(out: &Path, method: &str, trace: &Trace) -> Result<()> {
    let m = MetricsFile {
        method,
        all_frames: trace.metrics(0).ok(),
    };
    write_json(&out.join(format!("metrics_{method}.json")), &m)
}

// ---------------------------------------------------------------- run-e2e

pub fn run_e2e(mut table: Table, opts: &RunOptions) -> Result<()> {
    let io: Io = split_io(&mut table)?;
    let cfg: E2EConfig = from_table(table, "config")?;
    cfg.validate()?;
    cfg.require_checkpoints()?;
    let data_path = io.require_data()?;
    prepare_out(&opts.out, &[data_path])?;
    write_snapshot(&opts.out, &cfg, Some(&io))?;
    let data = load_data(data_path)?;
    let completion = load_completion(cfg.completion.as_deref().expect("checked"))?;
    let sampler = load_sampler(cfg.sampler.as_deref().expect("checked"))?;
    let prednet = cfg.prednet.as_deref().filter(|_| cfg.prior_mode == PriorMode::PredNet);
    let prednet = prednet.map(load_prednet).transpose()?;
    let models = E2EModels {
        sampler: &sampler,
        prednet: prednet.as_ref(),
        completion: &completion,
    };
    let trace = run_end_to_end_all(&data, models, &cfg)?;
    let method = cfg.prior_mode.as_str();
    write_trace(&opts.out, method, &trace, cfg.max_range)?;
    write_metrics(&opts.out, method, &trace)
}

// ------------------------------------------------------------------- eval

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    #[default]
    Agnostic,
    Scanline,
    Fixed,
    LowerBound,
}

impl EvalMethod {
    fn as_str(self) -> &'static str {
        match self {
            EvalMethod::Agnostic => "agnostic",
            EvalMethod::Scanline => "scanline",
            EvalMethod::Fixed => "fixed",
            EvalMethod::LowerBound => "lower_bound",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub schema_version: u32,
    pub method: EvalMethod,
    pub budget: SamplingBudget,
    pub seed: u64,
    pub temperature: Temperature,
    pub max_range: f64,
    pub completion: Option<PathBuf>,
    pub sampler: Option<PathBuf>,
    pub fixed_mask: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let e = E2EConfig::default();
        Self {
            schema_version: 1,
            method: EvalMethod::default(),
            budget: e.budget,
            seed: 0,
            temperature: e.temperature,
            max_range: e.max_range,
            completion: None,
            sampler: None,
            fixed_mask: None,
        }
    }
}

fn require<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| config_err(format!("missing checkpoint field `{field}`")))
}

pub fn eval(mut table: Table, opts: &RunOptions) -> Result<()> {
    let io: Io = split_io(&mut table)?;
    let cfg: EvalConfig = from_table(table, "config")?;
    if cfg.schema_version != 1 {
        return Err(config_err(format!("unknown config schema_version {}", cfg.schema_version)));
    }
    require(&cfg.completion, "completion")?;
    match cfg.method {
        EvalMethod::Fixed => drop(require(&cfg.fixed_mask, "fixed_mask")?),
        EvalMethod::LowerBound => drop(require(&cfg.sampler, "sampler")?),
        _ => {}
    }
    let data_path = io.require_data()?;
    prepare_out(&opts.out, &[data_path])?;
    write_snapshot(&opts.out, &cfg, Some(&io))?;
    let data = load_data(data_path)?;
    let completion = load_completion(require(&cfg.completion, "completion")?)?;
    let trace = match cfg.method {
        EvalMethod::Agnostic => {
            evaluate_agnostic(&data, &completion, AgnosticSampler::Random, cfg.budget, cfg.seed, cfg.max_range)?
        }
        EvalMethod::Scanline => {
            evaluate_agnostic(&data, &completion, AgnosticSampler::Scanline, cfg.budget, cfg.seed, cfg.max_range)?
        }
        EvalMethod::Fixed => {
            let mask = load_fixed(require(&cfg.fixed_mask, "fixed_mask")?)?;
            evaluate_fixed(&data, &completion, &mask, cfg.budget, cfg.temperature, cfg.max_range)?
        }
        EvalMethod::LowerBound => {
            let sampler = load_sampler(require(&cfg.sampler, "sampler")?)?;
            let source = PriorSource::GroundTruth;
            evaluate_sampler_trace(&data, &sampler, &completion, &source, cfg.budget, cfg.temperature, cfg.max_range)?
        }
    };
    write_trace(&opts.out, cfg.method.as_str(), &trace, cfg.max_range)?;
    write_metrics(&opts.out, cfg.method.as_str(), &trace)
}

// -------------------------------------------------------------- mix-match

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixMatchConfig {
    pub schema_version: u32,
    pub budget: SamplingBudget,
    pub seed: u64,
    pub temperature: Temperature,
    pub max_range: f64,
    /// Sampler trained against some completion network.
    pub sampler: Option<PathBuf>,
    /// Completion network to evaluate it with.
    pub completion: Option<PathBuf>,
}

impl Default for MixMatchConfig {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            schema_version: 1,
            budget: e.budget,
            seed: 0,
            temperature: e.temperature,
            max_range: e.max_range,
            sampler: None,
            completion: None,
        }
    }
}

pub fn mix_match(mut table: Table, opts: &RunOptions) -> Result<()> {
    let io: Io = split_io(&mut table)?;
    let cfg: MixMatchConfig = from_table(table, "config")?;
    if cfg.schema_version != 1 {
        return Err(config_err(format!("unknown config schema_version {}", cfg.schema_version)));
    }
    require(&cfg.sampler, "sampler")?;
    require(&cfg.completion, "completion")?;
    let data_path = io.require_data()?;
    prepare_out(&opts.out, &[data_path])?;
    write_snapshot(&opts.out, &cfg, Some(&io))?;
    let data = load_data(data_path)?;
    let sampler = load_sampler(require(&cfg.sampler, "sampler")?)?;
    let completion = load_completion(require(&cfg.completion, "completion")?)?;
    let trace = mix_and_match_eval(
        &data,
        &sampler,
        &completion,
        &PriorSource::GroundTruth,
        cfg.budget,
        cfg.temperature,
        cfg.max_range,
    )?;
    write_trace(&opts.out, "mix_match", &trace, cfg.max_range)?;
    write_metrics(&opts.out, "mix_match", &trace)
}

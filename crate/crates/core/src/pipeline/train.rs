//! Training stages.
//!
//! Every trainer works on in-memory sequences, visits frames in a seeded
//! shuffled order each epoch, and returns a [`StageReport`] with per-epoch
//! mean losses. Frames whose ground truth has no valid pixel are skipped and
//! counted.

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{random_valid_mask, scanline_mask, FixedMaskParams};
use crate::depth::{denormalize_depth, DepthMap, DepthSequence, SamplingBudget};
use crate::error::{Error, Result};
use crate::mask::{harden_topk, ProbabilityMap, SampleMask};
use crate::nn::graph::Graph;
use crate::nn::models::{
    complete, depth_channels, image_tensor, mask_tensor, masked_l1, soft_argmax_var, validity_channel,
    CompletionTask, PredNetModel, SamplerNet,
};
use crate::nn::params::{Adam, ParamSet};
use crate::nn::tensor::Tensor;
use crate::pipeline::config::{Stage, TrainConfig};
use crate::pipeline::eval::evaluate_sampler;
use crate::pipeline::losses::{sample_loss_var, sampled_maps_loss_var};
use crate::priors::{make_prior, Prior, PriorMode, PriorStack, ReconstructionStore};
use crate::rng;

/// Position of a frame inside a slice of sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct FrameIndex {
    pub seq: usize,
    pub t: usize,
}

/// Outcome of the validation guard of the joint stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GuardOutcome {
    pub start_rmse: f64,
    pub epoch_rmse: Vec<f64>,
    /// Validation RMSE of the returned parameters.
    pub final_rmse: f64,
    pub reverted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub frames_used: usize,
    /// Frames with no valid ground truth or no usable history.
    pub skipped_frames: usize,
    /// Sequences too short to provide any usable frame.
    pub skipped_sequences: usize,
    pub guard: Option<GuardOutcome>,
}

impl StageReport {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            epoch_losses: Vec::new(),
            steps: 0,
            frames_used: 0,
            skipped_frames: 0,
            skipped_sequences: 0,
            guard: None,
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Scene-independent pattern used to pretrain the completion network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgnosticSampler {
    #[default]
    Random,
    Scanline,
}

/// Where the sampler's input comes from during training and evaluation.
#[derive(Clone, Copy, Debug)]
pub enum PriorSource<'a> {
    /// The frame's own ground truth (lower bound).
    GroundTruth,
    /// Past reconstructions from a store, optionally passed through PredNet.
    Stored {
        mode: PriorMode,
        store: &'a ReconstructionStore,
        prednet: Option<&'a PredNetModel<f32>>,
        memory: usize,
    },
}

impl PriorSource<'_> {
    pub fn mode(&self) -> PriorMode {
        match self {
            PriorSource::GroundTruth => PriorMode::LowerBound,
            PriorSource::Stored { mode, .. } => *mode,
        }
    }

    /// Sampler input channels.
    pub fn channels(&self) -> usize {
        match self {
            PriorSource::GroundTruth => 1,
            PriorSource::Stored { mode, memory, .. } => mode.sampler_channels(*memory),
        }
    }

    /// `None` when the required history is not stored.
    pub fn prior(&self, seq: &DepthSequence, t: usize, max_range: f64) -> Result<Option<Prior>> {
        match *self {
            PriorSource::GroundTruth => {
                let stack = PriorStack::new(1)?;
                let gt = &seq.frames()[t].depth;
                make_prior(PriorMode::LowerBound, &stack, None, Some(gt), max_range).map(Some)
            }
            PriorSource::Stored {
                mode,
                store,
                prednet,
                memory,
            } => {
                let Some(past) = store.history(seq.id(), t, memory) else {
                    return Ok(None);
                };
                let stack = PriorStack::from_newest_first(memory, past.into_iter().cloned().collect())?;
                make_prior(mode, &stack, prednet, None, max_range).map(Some)
            }
        }
    }
}

/// Data for the validation guard of the joint stage.
#[derive(Clone, Copy, Debug)]
pub struct Validation<'a> {
    pub data: &'a [DepthSequence],
    pub source: PriorSource<'a>,
}

struct FrameBatch {
    target: Tensor<f32>,
    valid: Tensor<f32>,
    image: Tensor<f32>,
}

fn check_dataset(data: &[DepthSequence]) -> Result<(usize, usize)> {
    let shape = data
        .iter()
        .find_map(|s| s.shape())
        .ok_or_else(|| Error::Config("the training dataset is empty".into()))?;
    if let Some(s) = data.iter().find(|s| s.shape().is_some_and(|sh| sh != shape)) {
        return Err(Error::Dimension(format!(
            "sequence {} is {:?}, expected {shape:?}",
            s.id(),
            s.shape()
        )));
    }
    Ok(shape)
}

fn usable_frames(data: &[DepthSequence], report: &mut StageReport) -> Vec<FrameIndex> {
    let mut out = Vec::new();
    for (s, seq) in data.iter().enumerate() {
        for (t, f) in seq.frames().iter().enumerate() {
            if f.depth.valid_count() == 0 {
                report.skipped_frames += 1;
            } else {
                out.push(FrameIndex { seq: s, t });
            }
        }
    }
    out
}

fn shuffled<X: Clone>(items: &[X], seed: u64, epoch: usize) -> Vec<X> {
    let mut v = items.to_vec();
    v.shuffle(&mut rng::seeded(rng::derive_seed_path(seed, &[1, epoch as u64])));
    v
}

fn frame_batch(data: &[DepthSequence], idx: &[FrameIndex], max_range: f64) -> Result<FrameBatch> {
    let mut target = Vec::with_capacity(idx.len());
    let mut valid = Vec::with_capacity(idx.len());
    let mut image = Vec::with_capacity(idx.len());
    for f in idx {
        let frame = &data[f.seq].frames()[f.t];
        target.push(depth_channels(&[&frame.depth], max_range)?);
        valid.push(validity_channel(&frame.depth));
        image.push(image_tensor(&frame.image));
    }
    Ok(FrameBatch {
        target: Tensor::stack(&target)?,
        valid: Tensor::stack(&valid)?,
        image: Tensor::stack(&image)?,
    })
}

fn hadamard(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape(), data).expect("matching shapes")
}

fn check_finite(value: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Training(format!(
            "{what} diverged to {value} at epoch {epoch}, step {step}"
        )));
    }
    Ok(())
}

fn ensure_frozen(before: &str, params: &ParamSet<f32>, what: &str) -> Result<()> {
    if params.fingerprint() != before {
        return Err(Error::Invariant(format!("{what} parameters changed while frozen")));
    }
    Ok(())
}

/// Per-frame budget of the agnostic pretraining masks.
#[derive(Clone, Copy, Debug)]
enum BudgetRule {
    Fixed(SamplingBudget),
    Fraction(f64),
}

impl BudgetRule {
    fn for_frame(self, depth: &DepthMap) -> Result<SamplingBudget> {
        match self {
            BudgetRule::Fixed(k) => Ok(k),
            BudgetRule::Fraction(f) => SamplingBudget::from_fraction(f, depth.valid_count()),
        }
    }
}

fn agnostic_mask(
    pattern: AgnosticSampler,
    depth: &DepthMap,
    budget: SamplingBudget,
    seed: u64,
) -> Result<SampleMask> {
    match pattern {
        AgnosticSampler::Random => random_valid_mask(depth, budget, seed),
        AgnosticSampler::Scanline => scanline_mask(depth.height(), depth.width(), budget),
    }
}

fn completion_epochs<C: CompletionTask<f32> + ?Sized>(
    cfg: &TrainConfig,
    data: &[DepthSequence],
    completion: &mut C,
    pattern: AgnosticSampler,
    rule: BudgetRule,
    report: &mut StageReport,
) -> Result<()> {
    cfg.validate()?;
    check_dataset(data)?;
    let frames = usable_frames(data, report);
    if frames.is_empty() {
        return Err(Error::Config("no frame with valid ground truth".into()));
    }
    report.frames_used = frames.len();
    completion.set_frozen(false);
    let mut opt = Adam::new(cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        let order = shuffled(&frames, cfg.seed, epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = frame_batch(data, chunk, cfg.max_range)?;
            let masks = chunk
                .iter()
                .map(|f| {
                    let depth = &data[f.seq].frames()[f.t].depth;
                    let seed = rng::derive_seed_path(cfg.seed, &[2, epoch as u64, f.seq as u64, f.t as u64]);
                    let m = agnostic_mask(pattern, depth, rule.for_frame(depth)?, seed)?;
                    Ok(mask_tensor(&m))
                })
                .collect::<Result<Vec<_>>>()?;
            let masks = Tensor::stack(&masks)?;
            let mut g = Graph::new();
            let vars = completion.params().bind(&mut g, true);
            let sparse = g.constant(hadamard(&masks, &batch.target));
            let weights = g.constant(hadamard(&masks, &batch.valid));
            let image = g.constant(batch.image);
            let pred = completion.forward(&mut g, &vars, sparse, weights, image)?;
            let target = g.constant(batch.target);
            let valid = g.constant(batch.valid);
            let loss = completion.loss(&mut g, pred, target, valid)?;
            let value = g.value(loss).item() as f64;
            check_finite(value, "completion loss", epoch, report.steps)?;
            let mut grads = g.backward(loss)?;
            let gs = completion.params().gradients(&mut grads, &vars);
            opt.step(completion.params_mut(), &gs)?;
            report.steps += 1;
            sum += value * chunk.len() as f64;
        }
        let mean = sum / frames.len() as f64;
        info!("{}: epoch {} loss {mean:.6}", report.stage, epoch + 1);
        report.epoch_losses.push(mean);
    }
    Ok(())
}

/// Trains the completion network on scene-independent masks of exactly `k`
/// points (`min(k, valid)` on sparse ground truth).
pub fn stage1_pretrain_completion<C: CompletionTask<f32> + ?Sized>(
    cfg: &TrainConfig,
    data: &[DepthSequence],
    completion: &mut C,
    pattern: AgnosticSampler,
) -> Result<StageReport> {
    let mut report = StageReport::new(Stage::PretrainCompletion);
    completion_epochs(cfg, data, completion, pattern, BudgetRule::Fixed(cfg.budget), &mut report)?;
    Ok(report)
}

/// Sampler inputs for every frame with available history.
fn prior_table(
    data: &[DepthSequence],
    frames: &[FrameIndex],
    source: &PriorSource,
    max_range: f64,
    report: &mut StageReport,
) -> Result<Vec<(FrameIndex, Tensor<f32>)>> {
    let mut out = Vec::with_capacity(frames.len());
    for &f in frames {
        match source.prior(&data[f.seq], f.t, max_range)? {
            Some(p) => out.push((f, p.to_tensor(max_range)?)),
            None => report.skipped_frames += 1,
        }
    }
    let with_frames: std::collections::BTreeSet<usize> = out.iter().map(|(f, _)| f.seq).collect();
    report.skipped_sequences += data.len() - with_frames.len();
    Ok(out)
}

/// Per-sample union of a reference validity map with the top-`k` pixels of
/// the current soft mask.
fn union_with_topk(mask: &Tensor<f32>, reference_valid: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let [n, _, h, w] = mask.shape();
    let mut out = reference_valid.clone();
    for i in 0..n {
        let soft = SampleMask::soft(h, w, mask.plane(i, 0).to_vec(), k).expect("mask in [0,1]");
        let hard = harden_topk(&soft, k);
        let plane = &mut out.data_mut()[i * h * w..(i + 1) * h * w];
        for (u, &m) in plane.iter_mut().zip(hard.values()) {
            if m > 0.0 {
                *u = 1.0;
            }
        }
    }
    out
}

struct SamplerOptim<'a, C: ?Sized> {
    sampler: &'a mut SamplerNet<f32>,
    sampler_opt: Adam<f32>,
    completion: &'a mut C,
    completion_opt: Option<Adam<f32>>,
}

/// Top-k of the soft mask among valid pixels, per batch item.
fn hardened_batch(mask: &Tensor<f32>, valid: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let [n, _, h, w] = mask.shape();
    let mut out = Tensor::zeros([n, 1, h, w]);
    for i in 0..n {
        let v = valid.plane(i, 0);
        let masked = mask.plane(i, 0).iter().zip(v).map(|(&m, &ok)| m * ok).collect();
        let hard = harden_topk(&SampleMask::soft(h, w, masked, k).expect("mask in [0,1]"), k);
        let plane = &mut out.data_mut()[i * h * w..(i + 1) * h * w];
        for ((o, &m), &ok) in plane.iter_mut().zip(hard.values()).zip(v) {
            *o = m * ok;
        }
    }
    out
}

/// The sampler learns through the soft mask. A jointly trained completion
/// net only sees the hardened mask, so it cannot learn to read depth off
/// the small soft weights that every pixel carries.
fn sampler_step<C: CompletionTask<f32> + ?Sized>(
    cfg: &TrainConfig,
    o: &mut SamplerOptim<'_, C>,
    prior: Tensor<f32>,
    batch: FrameBatch,
    reference: Option<(Tensor<f32>, Tensor<f32>)>,
) -> Result<f64> {
    let mut g = Graph::new();
    let svars = o.sampler.params().bind(&mut g, true);
    let cvars = o.completion.params().bind(&mut g, false);
    let p = g.constant(prior);
    let logits = o.sampler.forward(&mut g, &svars, p)?;
    let m = soft_argmax_var(&mut g, logits, cfg.temperature)?;
    let d = g.constant(batch.target.clone());
    let v = g.constant(batch.valid.clone());
    let ds = g.mul(m, d)?;
    let w = g.mul(m, v)?;
    let img = g.constant(batch.image.clone());
    let pred = o.completion.forward(&mut g, &cvars, ds, w, img)?;
    let task = o.completion.loss(&mut g, pred, d, v)?;
    let sample = sample_loss_var(&mut g, m, cfg.budget);
    let weighted = g.scale(sample, cfg.alpha.alpha as f32);
    let mut total = g.add(task, weighted)?;
    if let Some((ref_sparse, ref_valid)) = reference {
        let union = union_with_topk(g.value(m), &ref_valid, cfg.budget.k());
        let r = g.constant(ref_sparse);
        let u = g.constant(union);
        let maps = sampled_maps_loss_var(&mut g, ds, r, u)?;
        let wm = g.scale(maps, cfg.sampled_maps_weight as f32);
        total = g.add(total, wm)?;
    }
    let value = g.value(total).item() as f64;
    if !value.is_finite() {
        return Ok(f64::NAN);
    }
    let hard = o
        .completion_opt
        .is_some()
        .then(|| hardened_batch(g.value(m), &batch.valid, cfg.budget.k()));
    let mut grads = g.backward(total)?;
    let sg = o.sampler.params().gradients(&mut grads, &svars);
    o.sampler_opt.step(o.sampler.params_mut(), &sg)?;
    if let (Some(opt), Some(hard)) = (o.completion_opt.as_mut(), hard) {
        let mut g = Graph::new();
        let cvars = o.completion.params().bind(&mut g, true);
        let hm = g.constant(hard);
        let d = g.constant(batch.target);
        let v = g.constant(batch.valid);
        let ds = g.mul(hm, d)?;
        let w = g.mul(hm, v)?;
        let img = g.constant(batch.image);
        let pred = o.completion.forward(&mut g, &cvars, ds, w, img)?;
        let task = o.completion.loss(&mut g, pred, d, v)?;
        if g.value(task).item().is_finite() {
            let mut grads = g.backward(task)?;
            let cg = o.completion.params().gradients(&mut grads, &cvars);
            opt.step(o.completion.params_mut(), &cg)?;
        }
    }
    Ok(value)
}

fn reference_batch(
    data: &[DepthSequence],
    chunk: &[FrameIndex],
    store: &ReconstructionStore,
    max_range: f64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut sparse = Vec::with_capacity(chunk.len());
    let mut valid = Vec::with_capacity(chunk.len());
    for f in chunk {
        let id = data[f.seq].id();
        let map = store.get(id, f.t).ok_or_else(|| {
            Error::Data(format!("no reference sampled map for ({id}, {})", f.t))
        })?;
        sparse.push(depth_channels(&[map], max_range)?);
        valid.push(validity_channel(map));
    }
    Ok((Tensor::stack(&sparse)?, Tensor::stack(&valid)?))
}

#[allow(clippy::too_many_arguments)]
fn sampler_epochs<C: CompletionTask<f32> + ?Sized>(
    cfg: &TrainConfig,
    data: &[DepthSequence],
    table: &[(FrameIndex, Tensor<f32>)],
    references: Option<&ReconstructionStore>,
    o: &mut SamplerOptim<'_, C>,
    report: &mut StageReport,
    mut after_epoch: impl FnMut(&SamplerOptim<'_, C>, usize) -> Result<()>,
) -> Result<()> {
    if table.is_empty() {
        return Err(Error::Data("no frame has the history required by the prior".into()));
    }
    report.frames_used = table.len();
    let positions: Vec<usize> = (0..table.len()).collect();
    for epoch in 0..cfg.epochs {
        let order = shuffled(&positions, cfg.seed, epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let idx: Vec<FrameIndex> = chunk.iter().map(|&i| table[i].0).collect();
            let prior = Tensor::stack(&chunk.iter().map(|&i| table[i].1.clone()).collect::<Vec<_>>())?;
            let batch = frame_batch(data, &idx, cfg.max_range)?;
            let reference = references
                .map(|s| reference_batch(data, &idx, s, cfg.max_range))
                .transpose()?;
            let value = sampler_step(cfg, o, prior, batch, reference)?;
            check_finite(value, "sampler loss", epoch, report.steps)?;
            report.steps += 1;
            sum += value * chunk.len() as f64;
        }
        let mean = sum / table.len() as f64;
        info!("{}: epoch {} loss {mean:.6}", report.stage, epoch + 1);
        report.epoch_losses.push(mean);
        after_epoch(o, epoch)?;
    }
    Ok(())
}

fn check_sampler_source(sampler: &SamplerNet<f32>, source: &PriorSource, cfg: &TrainConfig) -> Result<()> {
    if source.mode() != cfg.prior_mode {
        return Err(Error::Config(format!(
            "config prior_mode {} does not match the prior source ({})",
            cfg.prior_mode,
            source.mode()
        )));
    }
    if sampler.prior_channels() != source.channels() {
        return Err(Error::Config(format!(
            "sampler takes {} prior channels, {} prior provides {}",
            sampler.prior_channels(),
            source.mode(),
            source.channels()
        )));
    }
    Ok(())
}

/// Result of the frozen-task sampler stage.
#[derive(Debug)]
pub struct SamplerStageOutput {
    pub report: StageReport,
    /// Dense reconstructions of every trained frame.
    pub reconstructions: ReconstructionStore,
    /// The hardened sparse maps those reconstructions were computed from.
    pub sampled_maps: ReconstructionStore,
}

/// Trains the sampler against a frozen completion network. Implicit mode
/// adds the sampled-maps term and needs `references`.
///
/// Afterwards every trained frame is reconstructed once with hardened masks
/// and stored, providing the past maps that PredNet trains on.
pub fn stage2_train_sampler<C: CompletionTask<f32> + ?Sized>(
    cfg: &TrainConfig,
    data: &[DepthSequence],
    completion: &mut C,
    sampler: &mut SamplerNet<f32>,
    source: &PriorSource,
    references: Option<&ReconstructionStore>,
) -> Result<SamplerStageOutput> {
    cfg.validate()?;
    if cfg.prior_mode == PriorMode::None {
        return Err(Error::Config("the sampler stage needs prior_mode lower_bound, prednet or implicit".into()));
    }
    check_sampler_source(sampler, source, cfg)?;
    if cfg.prior_mode == PriorMode::Implicit && references.is_none() {
        return Err(Error::Config("implicit mode needs reference sampled maps".into()));
    }
    check_dataset(data)?;
    let stage = if cfg.prior_mode == PriorMode::Implicit {
        Stage::ImplicitPred
    } else {
        Stage::TrainSampler
    };
    let mut report = StageReport::new(stage);
    let frames = usable_frames(data, &mut report);
    let table = prior_table(data, &frames, source, cfg.max_range, &mut report)?;
    completion.set_frozen(true);
    let frozen = completion.params().fingerprint();
    let mut o = SamplerOptim {
        sampler,
        sampler_opt: Adam::new(cfg.learning_rate),
        completion,
        completion_opt: None,
    };
    sampler_epochs(cfg, data, &table, references, &mut o, &mut report, |_, _| Ok(()))?;
    ensure_frozen(&frozen, o.completion.params(), "completion")?;
    let (reconstructions, sampled_maps) = collect_reconstructions(
        data,
        o.sampler,
        &*o.completion,
        source,
        cfg.budget,
        cfg.temperature,
        cfg.max_range,
    )?;
    Ok(SamplerStageOutput {
        report,
        reconstructions,
        sampled_maps,
    })
}

/// Runs sampler and completion with hardened masks over every frame that
/// has a prior and stores `(D̂_t, D_s)` per frame.
pub fn collect_reconstructions<C: CompletionTask<f32> + ?Sized>(
    data: &[DepthSequence],
    sampler: &SamplerNet<f32>,
    completion: &C,
    source: &PriorSource,
    budget: SamplingBudget,
    temperature: crate::mask::Temperature,
    max_range: f64,
) -> Result<(ReconstructionStore, ReconstructionStore)> {
    let mut recon = ReconstructionStore::new();
    let mut sampled = ReconstructionStore::new();
    for seq in data {
        for (t, frame) in seq.frames().iter().enumerate() {
            if frame.depth.valid_count() == 0 {
                continue;
            }
            let Some(prior) = source.prior(seq, t, max_range)? else {
                continue;
            };
            let probs = sampler.probability_map(prior.to_tensor(max_range)?)?;
            let soft = crate::mask::soft_argmax(&probs, temperature)?;
            let hard = crate::mask::harden_for_signal(&frame.depth, &soft, budget.k())?;
            let sparse = crate::depth::apply_mask(&frame.depth, &hard)?;
            let dense = complete(completion, &sparse, &hard, &frame.image, max_range)?;
            recon.insert(seq.id(), t, &dense)?;
            sampled.insert(seq.id(), t, &sparse)?;
        }
    }
    Ok((recon, sampled))
}

/// Fine-tunes sampler and completion together.
///
/// With `validation`, the mean hardened-mask RMSE is measured before
/// training and after every epoch. The stage ends on the best epoch, or on
/// the starting parameters if even that epoch is more than 5% worse.
#[allow(clippy::too_many_arguments)]
pub fn stage3_joint_finetune<C: CompletionTask<f32> + Clone + Sync + ?Sized>(
    cfg: &TrainConfig,
    data: &[DepthSequence],
    sampler: &mut SamplerNet<f32>,
    completion: &mut C,
    source: &PriorSource,
    references: Option<&ReconstructionStore>,
    validation: Option<Validation>,
) -> Result<StageReport> {
    cfg.validate()?;
    if cfg.prior_mode == PriorMode::None {
        return Err(Error::Config("the joint stage needs a sampler prior mode".into()));
    }
    check_sampler_source(sampler, source, cfg)?;
    if cfg.prior_mode == PriorMode::Implicit && references.is_none() {
        return Err(Error::Config("implicit mode needs reference sampled maps".into()));
    }
    check_dataset(data)?;
    let mut report = StageReport::new(Stage::JointFinetune);
    let frames = usable_frames(data, &mut report);
    let table = prior_table(data, &frames, source, cfg.max_range, &mut report)?;
    completion.set_frozen(false);

    let measure = |s: &SamplerNet<f32>, c: &C| -> Result<f64> {
        let v = validation.expect("validation present");
        evaluate_sampler(v.data, s, c, &v.source, cfg.budget, cfg.temperature, cfg.max_range)
            .map(|m| m.rmse)
    };
    let start_rmse = validation.map(|_| measure(sampler, completion)).transpose()?;
    let start = start_rmse.map(|r| (r, sampler.clone(), completion.clone()));
    let mut best: Option<(f64, SamplerNet<f32>, C)> = None;
    let mut epoch_rmse = Vec::new();

    let mut o = SamplerOptim {
        sampler,
        sampler_opt: Adam::new(cfg.learning_rate),
        completion,
        completion_opt: Some(Adam::new(cfg.completion_lr())),
    };
    sampler_epochs(cfg, data, &table, references, &mut o, &mut report, |o, epoch| {
        if validation.is_some() {
            let r = measure(o.sampler, o.completion)?;
            info!("joint_finetune: epoch {} validation rmse {r:.4}", epoch + 1);
            epoch_rmse.push(r);
            if best.as_ref().map_or(true, |(b, _, _)| r < *b) {
                best = Some((r, o.sampler.clone(), o.completion.clone()));
            }
        }
        Ok(())
    })?;
    if let (Some((start, s0, c0)), Some((r, s, c))) = (start, best) {
        let last = *epoch_rmse.last().expect("at least one epoch");
        let mut outcome = GuardOutcome {
            start_rmse: start,
            epoch_rmse: epoch_rmse.clone(),
            final_rmse: last,
            reverted: false,
        };
        let (r, s, c) = if r > start * 1.05 {
            warn!("joint_finetune: best validation rmse {r:.4} exceeds start {start:.4} by >5%; restoring start");
            (start, s0, c0)
        } else {
            (r, s, c)
        };
        if r != last {
            info!("joint_finetune: keeping the snapshot with validation rmse {r:.4}");
            *o.sampler = s;
            *o.completion = c;
            outcome.final_rmse = r;
            outcome.reverted = true;
        }
        report.guard = Some(outcome);
    }
    Ok(report)
}

/// Learns one mask for the whole dataset. Gradients are accumulated over
/// `batch_size` frames per update. With `joint_completion` the completion
/// network is updated too; otherwise it must stay bit-identical.
pub fn train_fixed_mask<C: CompletionTask<f32> + ?Sized>(
    cfg: &TrainConfig,
    data: &[DepthSequence],
    completion: &mut C,
    init: Option<FixedMaskParams>,
) -> Result<(FixedMaskParams, StageReport)> {
    cfg.validate()?;
    let (h, w) = check_dataset(data)?;
    cfg.budget.check_fits(h * w)?;
    let mut params = match init {
        Some(p) if p.shape() != (h, w) => {
            return Err(Error::Dimension(format!("fixed mask {:?} for {h}x{w} frames", p.shape())))
        }
        Some(p) => p,
        None => FixedMaskParams::kaiming(h, w, cfg.seed)?,
    };
    let mut report = StageReport::new(Stage::FixedMask);
    let frames = usable_frames(data, &mut report);
    if frames.is_empty() {
        return Err(Error::Config("no frame with valid ground truth".into()));
    }
    report.frames_used = frames.len();
    let joint = cfg.joint_completion;
    completion.set_frozen(!joint);
    let frozen = completion.params().fingerprint();
    let mut logits = ParamSet::new();
    logits.push("logits", Tensor::from_vec([1, 2, h, w], params.logits.logits().to_vec())?);
    let mut mask_opt = Adam::new(cfg.learning_rate);
    let mut comp_opt = Adam::new(cfg.completion_lr());
    for epoch in 0..cfg.epochs {
        let order = shuffled(&frames, cfg.seed, epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut mask_grad: Option<Vec<Tensor<f32>>> = None;
            let mut comp_grad: Option<Vec<Tensor<f32>>> = None;
            let scale = 1.0 / chunk.len() as f32;
            for f in chunk {
                let batch = frame_batch(data, std::slice::from_ref(f), cfg.max_range)?;
                let mut g = Graph::new();
                let lv = logits.bind(&mut g, true);
                let cvars = completion.params().bind(&mut g, joint);
                let m = soft_argmax_var(&mut g, lv[0], cfg.temperature)?;
                let d = g.constant(batch.target);
                let v = g.constant(batch.valid);
                let ds = g.mul(m, d)?;
                let wv = g.mul(m, v)?;
                let img = g.constant(batch.image);
                let pred = completion.forward(&mut g, &cvars, ds, wv, img)?;
                let task = completion.loss(&mut g, pred, d, v)?;
                let sample = sample_loss_var(&mut g, m, cfg.budget);
                let ws = g.scale(sample, cfg.alpha.alpha as f32);
                let total = g.add(task, ws)?;
                let value = g.value(total).item() as f64;
                check_finite(value, "fixed mask loss", epoch, report.steps)?;
                sum += value;
                let mut grads = g.backward(total)?;
                accumulate(&mut mask_grad, logits.gradients(&mut grads, &lv), scale);
                if joint {
                    accumulate(&mut comp_grad, completion.params().gradients(&mut grads, &cvars), scale);
                }
            }
            mask_opt.step(&mut logits, &mask_grad.expect("non-empty chunk"))?;
            if let Some(cg) = comp_grad {
                comp_opt.step(completion.params_mut(), &cg)?;
            }
            report.steps += 1;
        }
        let mean = sum / frames.len() as f64;
        info!("fixed_mask: epoch {} loss {mean:.6}", epoch + 1);
        report.epoch_losses.push(mean);
    }
    if !joint {
        ensure_frozen(&frozen, completion.params(), "completion")?;
    }
    params.logits = ProbabilityMap::new(h, w, logits.get(0).data().to_vec())?;
    Ok((params, report))
}

fn accumulate(acc: &mut Option<Vec<Tensor<f32>>>, grads: Vec<Tensor<f32>>, scale: f32) {
    match acc {
        None => {
            *acc = Some(
                grads
                    .into_iter()
                    .map(|mut g| {
                        g.data_mut().iter_mut().for_each(|v| *v *= scale);
                        g
                    })
                    .collect(),
            )
        }
        Some(a) => {
            for (x, g) in a.iter_mut().zip(grads) {
                for (xv, gv) in x.data_mut().iter_mut().zip(g.data()) {
                    *xv += gv * scale;
                }
            }
        }
    }
}

/// Trains PredNet to predict frame `t` from the stored reconstructions of
/// frames `t-1 .. t-b` with an L1 loss against the ground truth.
pub fn train_prednet(
    cfg: &TrainConfig,
    data: &[DepthSequence],
    store: &ReconstructionStore,
    prednet: &mut PredNetModel<f32>,
) -> Result<StageReport> {
    cfg.validate()?;
    check_dataset(data)?;
    let b = prednet.past_frames();
    let mut report = StageReport::new(Stage::PredNet);
    let mut frames = Vec::new();
    for (s, seq) in data.iter().enumerate() {
        if seq.len() < b + 1 {
            warn!("prednet: sequence {} has {} frames, needs {}; skipped", seq.id(), seq.len(), b + 1);
            report.skipped_sequences += 1;
            continue;
        }
        for t in b..seq.len() {
            if seq.frames()[t].depth.valid_count() > 0 && store.history(seq.id(), t, b).is_some() {
                frames.push(FrameIndex { seq: s, t });
            } else {
                report.skipped_frames += 1;
            }
        }
    }
    if frames.is_empty() {
        return Err(Error::Data(format!(
            "no sequence provides {} consecutive stored reconstructions",
            b + 1
        )));
    }
    report.frames_used = frames.len();
    let mut opt = Adam::new(cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        let order = shuffled(&frames, cfg.seed, epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let stacks = chunk
                .iter()
                .map(|f| {
                    let past = store.history(data[f.seq].id(), f.t, b).expect("checked above");
                    depth_channels(&past, cfg.max_range)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = frame_batch(data, chunk, cfg.max_range)?;
            let mut g = Graph::new();
            let vars = prednet.params().bind(&mut g, true);
            let x = g.constant(Tensor::stack(&stacks)?);
            let y = prednet.forward(&mut g, &vars, x)?;
            let target = g.constant(batch.target);
            let valid = g.constant(batch.valid);
            let loss = masked_l1(&mut g, y, target, valid)?;
            let value = g.value(loss).item() as f64;
            check_finite(value, "PredNet loss", epoch, report.steps)?;
            let mut grads = g.backward(loss)?;
            let gs = prednet.params().gradients(&mut grads, &vars);
            opt.step(prednet.params_mut(), &gs)?;
            report.steps += 1;
            sum += value * chunk.len() as f64;
        }
        let mean = sum / frames.len() as f64;
        info!("prednet: epoch {} loss {mean:.6}", epoch + 1);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Trains `completion` on random samples of `pseudo_gt_fraction` of each
/// frame's valid ground truth, then replaces every depth map by the dense
/// completion of a fresh random sample of the same fraction.
pub fn generate_pseudo_gt<C: CompletionTask<f32> + ?Sized>(
    cfg: &TrainConfig,
    data: &[DepthSequence],
    completion: &mut C,
) -> Result<(Vec<DepthSequence>, StageReport)> {
    let mut report = StageReport::new(Stage::PretrainCompletion);
    let rule = BudgetRule::Fraction(cfg.pseudo_gt_fraction);
    completion_epochs(cfg, data, completion, AgnosticSampler::Random, rule, &mut report)?;
    let mut out = Vec::with_capacity(data.len());
    for (s, seq) in data.iter().enumerate() {
        let mut frames = Vec::with_capacity(seq.len());
        for (t, f) in seq.frames().iter().enumerate() {
            let depth = if f.depth.valid_count() == 0 {
                f.depth.clone()
            } else {
                let seed = rng::derive_seed_path(cfg.seed, &[3, s as u64, t as u64]);
                let mask = random_valid_mask(&f.depth, rule.for_frame(&f.depth)?, seed)?;
                let sparse = crate::depth::apply_mask(&f.depth, &mask)?;
                let dense = complete(&*completion, &sparse, &mask, &f.image, cfg.max_range)?;
                let floor = 1.0 / 256.0;
                let values: Vec<f64> = dense
                    .values()
                    .iter()
                    .map(|&v| (v as f64).max(floor) / cfg.max_range)
                    .collect();
                denormalize_depth(&values, dense.height(), dense.width(), cfg.max_range)?
            };
            frames.push(crate::depth::SequenceFrame::new(f.image.clone(), depth, t)?);
        }
        out.push(DepthSequence::new(seq.id(), frames)?);
    }
    Ok((out, report))
}

//! Evaluation of sampling methods and the online loop.
//!
//! Every evaluator returns a [`Trace`]: one record per frame with valid
//! ground truth, plus the ground-truth depths at every sampled pixel.
//! Evaluation never updates parameters.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fixed_mask_forward, random_valid_mask, scanline_mask, FixedMaskParams};
use crate::depth::{apply_mask, mae, rmse, DepthSequence, SamplingBudget, SequenceFrame};
use crate::error::{Error, Result};
use crate::mask::{harden_for_signal, mask_cardinality, soft_argmax, SampleMask, Temperature};
use crate::nn::models::{complete, CompletionTask, PredNetModel, SamplerNet};
use crate::pipeline::config::E2EConfig;
use crate::pipeline::train::{AgnosticSampler, PriorSource};
use crate::priors::{make_prior, PriorMode, PriorStack};
use crate::rng;

/// How a frame's mask was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Random,
    Scanline,
    Fixed,
    LowerBound,
    #[serde(rename = "prednet")]
    PredNet,
    Implicit,
}

impl Branch {
    pub const ALL: [Branch; 6] = [
        Branch::Random,
        Branch::Scanline,
        Branch::Fixed,
        Branch::LowerBound,
        Branch::PredNet,
        Branch::Implicit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Random => "random",
            Branch::Scanline => "scanline",
            Branch::Fixed => "fixed",
            Branch::LowerBound => "lower_bound",
            Branch::PredNet => "prednet",
            Branch::Implicit => "implicit",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown branch `{s}`")))
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub sequence_id: String,
    pub t: usize,
    pub branch: Branch,
    /// Sum of the soft mask; `None` for masks that never had a soft form.
    pub soft_count: Option<f64>,
    pub hard_count: usize,
    pub rmse: f64,
    pub mae: f64,
}

pub const TRACE_HEADER: &str = "sequence_id,t,branch,soft_count,hard_count,rmse,mae";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<FrameRecord>,
    /// Ground-truth depth at every sampled pixel, in meters.
    pub sampled_depths: Vec<f64>,
}

/// Averages over a set of trace records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub frames: usize,
    pub mean_soft_count: Option<f64>,
    pub mean_hard_count: f64,
}

impl Trace {
    pub fn extend(&mut self, other: Trace) {
        self.records.extend(other.records);
        self.sampled_depths.extend(other.sampled_depths);
    }

    /// Means of per-frame values over records with `t >= min_t`.
    pub fn metrics(&self, min_t: usize) -> Result<Metrics> {
        let rs: Vec<&FrameRecord> = self.records.iter().filter(|r| r.t >= min_t).collect();
        if rs.is_empty() {
            return Err(Error::UndefinedMetric(format!("no trace record with t >= {min_t}")));
        }
        let n = rs.len() as f64;
        let softs: Vec<f64> = rs.iter().filter_map(|r| r.soft_count).collect();
        Ok(Metrics {
            rmse: rs.iter().map(|r| r.rmse).sum::<f64>() / n,
            mae: rs.iter().map(|r| r.mae).sum::<f64>() / n,
            frames: rs.len(),
            mean_soft_count: (!softs.is_empty()).then(|| softs.iter().sum::<f64>() / softs.len() as f64),
            mean_hard_count: rs.iter().map(|r| r.hard_count as f64).sum::<f64>() / n,
        })
    }

    /// Mean RMSE per frame index, ascending in `t`.
    pub fn per_frame_rmse(&self) -> Vec<(usize, f64, usize)> {
        let mut acc: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for r in &self.records {
            let e = acc.entry(r.t).or_default();
            e.0 += r.rmse;
            e.1 += 1;
        }
        acc.into_iter().map(|(t, (s, n))| (t, s / n as f64, n)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_HEADER);
        out.push('\n');
        for r in &self.records {
            let soft = r.soft_count.map(|s| s.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{soft},{},{},{}",
                r.sequence_id, r.t, r.branch, r.hard_count, r.rmse, r.mae
            )
            .expect("write to string");
        }
        out
    }

    /// Parses [`Trace::to_csv`] output. Sampled depths are not part of the
    /// CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<Trace> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRACE_HEADER) {
            return Err(Error::Format(format!("trace CSV must start with `{TRACE_HEADER}`")));
        }
        let bad = |n: usize, what: &str| Error::Format(format!("trace line {}: bad {what}", n + 2));
        let mut records = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 7 {
                return Err(bad(n, "field count"));
            }
            records.push(FrameRecord {
                sequence_id: f[0].to_string(),
                t: f[1].parse().map_err(|_| bad(n, "t"))?,
                branch: Branch::parse(f[2])?,
                soft_count: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad(n, "soft_count"))?)
                },
                hard_count: f[4].parse().map_err(|_| bad(n, "hard_count"))?,
                rmse: f[5].parse().map_err(|_| bad(n, "rmse"))?,
                mae: f[6].parse().map_err(|_| bad(n, "mae"))?,
            });
        }
        Ok(Trace {
            records,
            sampled_depths: Vec::new(),
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Trace> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Trace::from_csv(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Seed of the random mask for frame `t` of sequence `id`. Depends only on
/// the id, so every method sees the same random masks.
pub fn frame_seed(seed: u64, sequence_id: &str, t: usize) -> u64 {
    // FNV-1a
    let h = sequence_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    rng::derive_seed_path(seed, &[h, t as u64])
}

/// Completes one frame from `hard` and scores it. Returns the dense map and
/// the record, or no record when the frame has no valid ground truth.
#[allow(clippy::too_many_arguments)]
fn score_frame<C: CompletionTask<f32> + ?Sized>(
    completion: &C,
    sequence_id: &str,
    t: usize,
    frame: &SequenceFrame,
    branch: Branch,
    soft_count: Option<f64>,
    hard: &SampleMask,
    max_range: f64,
    trace: &mut Trace,
) -> Result<crate::depth::DepthMap> {
    let sparse = apply_mask(&frame.depth, hard)?;
    let dense = complete(completion, &sparse, hard, &frame.image, max_range)?;
    if frame.depth.valid_count() > 0 {
        trace.records.push(FrameRecord {
            sequence_id: sequence_id.to_string(),
            t,
            branch,
            soft_count,
            hard_count: hard.count_ones(),
            rmse: rmse(&dense, &frame.depth)?,
            mae: mae(&dense, &frame.depth)?,
        });
        trace.sampled_depths.extend(
            sparse
                .values()
                .iter()
                .zip(sparse.valid())
                .filter(|(_, &v)| v)
                .map(|(&d, _)| d as f64),
        );
    }
    Ok(dense)
}

fn per_sequence<F>(data: &[DepthSequence], f: F) -> Result<Trace>
where
    F: Fn(&DepthSequence) -> Result<Trace> + Sync + Send,
{
    let parts = data.par_iter().map(f).collect::<Result<Vec<_>>>()?;
    let mut out = Trace::default();
    for p in parts {
        out.extend(p);
    }
    Ok(out)
}

/// Scene-independent masks: random valid pixels or scan lines.
pub fn evaluate_agnostic<C: CompletionTask<f32> + Sync + ?Sized>(
    data: &[DepthSequence],
    completion: &C,
    pattern: AgnosticSampler,
    budget: SamplingBudget,
    seed: u64,
    max_range: f64,
) -> Result<Trace> {
    per_sequence(data, |seq| {
        let mut trace = Trace::default();
        for (t, frame) in seq.frames().iter().enumerate() {
            let (branch, mask) = match pattern {
                AgnosticSampler::Random => (
                    Branch::Random,
                    random_valid_mask(&frame.depth, budget, frame_seed(seed, seq.id(), t))?,
                ),
                AgnosticSampler::Scanline => {
                    let lines = scanline_mask(frame.depth.height(), frame.depth.width(), budget)?;
                    let valid = lines.selected().into_iter().filter(|&i| frame.depth.valid()[i]);
                    let (h, w) = frame.depth.shape();
                    (Branch::Scanline, SampleMask::from_indices(h, w, valid, budget.k())?)
                }
            };
            score_frame(completion, seq.id(), t, frame, branch, None, &mask, max_range, &mut trace)?;
        }
        Ok(trace)
    })
}

/// One learned mask for every frame, hardened against each frame's validity.
pub fn evaluate_fixed<C: CompletionTask<f32> + Sync + ?Sized>(
    data: &[DepthSequence],
    completion: &C,
    params: &FixedMaskParams,
    budget: SamplingBudget,
    temperature: Temperature,
    max_range: f64,
) -> Result<Trace> {
    let soft = fixed_mask_forward(params, temperature)?;
    let soft_count = mask_cardinality(&soft);
    per_sequence(data, |seq| {
        let mut trace = Trace::default();
        for (t, frame) in seq.frames().iter().enumerate() {
            if frame.shape() != soft.shape() {
                return Err(Error::Dimension(format!(
                    "fixed mask {:?} for frame {:?}",
                    soft.shape(),
                    frame.shape()
                )));
            }
            let hard = harden_for_signal(&frame.depth, &soft, budget.k())?;
            score_frame(completion, seq.id(), t, frame, Branch::Fixed, Some(soft_count), &hard, max_range, &mut trace)?;
        }
        Ok(trace)
    })
}

fn source_branch(mode: PriorMode) -> Branch {
    match mode {
        PriorMode::PredNet => Branch::PredNet,
        PriorMode::Implicit => Branch::Implicit,
        _ => Branch::LowerBound,
    }
}

/// Sampler driven by per-frame priors from `source`. Frames without a prior
/// are left out of the trace.
pub fn evaluate_sampler_trace<C: CompletionTask<f32> + Sync + ?Sized>(
    data: &[DepthSequence],
    sampler: &SamplerNet<f32>,
    completion: &C,
    source: &PriorSource,
    budget: SamplingBudget,
    temperature: Temperature,
    max_range: f64,
) -> Result<Trace> {
    let branch = source_branch(source.mode());
    per_sequence(data, |seq| {
        let mut trace = Trace::default();
        for (t, frame) in seq.frames().iter().enumerate() {
            let Some(prior) = source.prior(seq, t, max_range)? else {
                continue;
            };
            let probs = sampler.probability_map(prior.to_tensor(max_range)?)?;
            let soft = soft_argmax(&probs, temperature)?;
            let hard = harden_for_signal(&frame.depth, &soft, budget.k())?;
            let count = mask_cardinality(&soft);
            score_frame(completion, seq.id(), t, frame, branch, Some(count), &hard, max_range, &mut trace)?;
        }
        Ok(trace)
    })
}

/// Mean metrics of [`evaluate_sampler_trace`].
pub fn evaluate_sampler<C: CompletionTask<f32> + Sync + ?Sized>(
    data: &[DepthSequence],
    sampler: &SamplerNet<f32>,
    completion: &C,
    source: &PriorSource,
    budget: SamplingBudget,
    temperature: Temperature,
    max_range: f64,
) -> Result<Metrics> {
    evaluate_sampler_trace(data, sampler, completion, source, budget, temperature, max_range)?.metrics(0)
}

/// Trained models for the online loop.
pub struct E2EModels<'a, C: ?Sized> {
    pub sampler: &'a SamplerNet<f32>,
    pub prednet: Option<&'a PredNetModel<f32>>,
    pub completion: &'a C,
}

impl<C: ?Sized> Clone for E2EModels<'_, C> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<C: ?Sized> Copy for E2EModels<'_, C> {}

fn check_e2e<C: ?Sized>(models: &E2EModels<'_, C>, cfg: &E2EConfig) -> Result<usize> {
    cfg.validate()?;
    let b = cfg.history_len();
    match cfg.prior_mode {
        PriorMode::PredNet => {
            let net = models
                .prednet
                .ok_or_else(|| Error::Config("missing checkpoint field `prednet`".into()))?;
            if net.past_frames() != b {
                return Err(Error::Config(format!(
                    "PredNet takes {} past frames but the history length is {b}",
                    net.past_frames()
                )));
            }
        }
        PriorMode::Implicit => {}
        other => {
            return Err(Error::Config(format!(
                "the online loop needs prior_mode prednet or implicit, got {other}"
            )))
        }
    }
    let want = cfg.prior_mode.sampler_channels(b);
    if models.sampler.prior_channels() != want {
        return Err(Error::Config(format!(
            "sampler takes {} prior channels, {} mode with history {b} provides {want}",
            models.sampler.prior_channels(),
            cfg.prior_mode
        )));
    }
    Ok(b)
}

/// Online loop over one sequence. The first `S` frames use random masks;
/// afterwards the prior comes from the last `b` reconstructions. Every
/// reconstruction is pushed onto the history.
pub fn run_end_to_end<C: CompletionTask<f32> + ?Sized>(
    seq: &DepthSequence,
    models: E2EModels<'_, C>,
    cfg: &E2EConfig,
) -> Result<Trace> {
    let b = check_e2e(&models, cfg)?;
    let warmup = cfg.memory_size;
    let mut stack = PriorStack::new(b)?;
    let mut trace = Trace::default();
    for (t, frame) in seq.frames().iter().enumerate() {
        let dense = if t < warmup || !stack.is_full() {
            let mask = random_valid_mask(&frame.depth, cfg.budget, frame_seed(cfg.seed, seq.id(), t))?;
            score_frame(models.completion, seq.id(), t, frame, Branch::Random, None, &mask, cfg.max_range, &mut trace)?
        } else {
            let prior = make_prior(cfg.prior_mode, &stack, models.prednet, None, cfg.max_range)?;
            let probs = models.sampler.probability_map(prior.to_tensor(cfg.max_range)?)?;
            let soft = soft_argmax(&probs, cfg.temperature)?;
            let hard = harden_for_signal(&frame.depth, &soft, cfg.budget.k())?;
            let branch = source_branch(cfg.prior_mode);
            let count = mask_cardinality(&soft);
            score_frame(models.completion, seq.id(), t, frame, branch, Some(count), &hard, cfg.max_range, &mut trace)?
        };
        stack = stack.push(dense)?;
    }
    Ok(trace)
}

/// [`run_end_to_end`] over every sequence.
pub fn run_end_to_end_all<C: CompletionTask<f32> + Sync + ?Sized>(
    data: &[DepthSequence],
    models: E2EModels<'_, C>,
    cfg: &E2EConfig,
) -> Result<Trace> {
    check_e2e(&models, cfg)?;
    per_sequence(data, |seq| run_end_to_end(seq, models, cfg))
}

/// Evaluates a sampler with a completion network it was not trained with.
/// Both networks must accept the frames and the sampler must accept the
/// prior; parameters are checked unchanged afterwards.
pub fn mix_and_match_eval<C: CompletionTask<f32> + Sync + ?Sized>(
    data: &[DepthSequence],
    sampler: &SamplerNet<f32>,
    completion: &C,
    source: &PriorSource,
    budget: SamplingBudget,
    temperature: Temperature,
    max_range: f64,
) -> Result<Trace> {
    let component = |e: Error| Error::Component {
        expected: "networks accepting the dataset's frames".into(),
        found: e.to_string(),
    };
    if sampler.prior_channels() != source.channels() {
        return Err(Error::Component {
            expected: format!("sampler with {} prior channels", source.channels()),
            found: format!("{} prior channels", sampler.prior_channels()),
        });
    }
    for seq in data {
        if let Some((h, w)) = seq.shape() {
            sampler.unet().config().check_input(h, w).map_err(component)?;
            completion.check_input(h, w).map_err(component)?;
        }
    }
    let before = (sampler.params().fingerprint(), completion.params().fingerprint());
    let trace = evaluate_sampler_trace(data, sampler, completion, source, budget, temperature, max_range)?;
    let after = (sampler.params().fingerprint(), completion.params().fingerprint());
    if before != after {
        return Err(Error::Invariant("parameters changed during evaluation".into()));
    }
    Ok(trace)
}

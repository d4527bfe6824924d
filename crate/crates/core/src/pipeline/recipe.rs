//! The desk-scale recipe: synthetic corpus, every training stage, and the
//! evaluation of each sampling method on held-out sequences.
//!
//! Order of stages:
//!
//! 1. completion A pretrained on random masks (and B, same data, other seed)
//! 2. lower-bound sampler against frozen A
//! 3. joint fine-tune of sampler and A, validation guarded
//! 4. reconstructions of the training frames with the stage-3 models
//! 5. PredNet on those reconstructions
//! 6. PredNet-prior sampler, initialized from stage 3, against the frozen
//!    stage-3 completion
//! 7. fixed mask, joint with a copy of completion A
//! 8. optionally the implicit sampler on stacks of past reconstructions
//!
//! Agnostic frames use completion A. PredNet and implicit methods run
//! through the online loop.

use std::collections::BTreeMap;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::baselines::FixedMaskParams;
use crate::data::synth::{generate_corpus, SyntheticSceneConfig};
use crate::depth::{DepthSequence, SamplingBudget};
use crate::error::Result;
use crate::mask::Temperature;
use crate::nn::models::{CompletionConfig, PredNetModel, ReferenceCompletion, SamplerNet};
use crate::pipeline::config::{E2EConfig, LossWeights, NetConfig, Stage, TrainConfig};
use crate::pipeline::eval::{
    evaluate_agnostic, evaluate_fixed, evaluate_sampler_trace, mix_and_match_eval, run_end_to_end_all, E2EModels,
    Trace,
};
use crate::pipeline::train::{
    collect_reconstructions, stage1_pretrain_completion, stage2_train_sampler, stage3_joint_finetune,
    train_fixed_mask, train_prednet, AgnosticSampler, PriorSource, StageReport, Validation,
};
use crate::priors::PriorMode;
use crate::rng::derive_seed;

/// Epochs and learning rates per stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    pub learning_rate: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeConfig {
    pub scene: SyntheticSceneConfig,
    pub train_sequences: usize,
    pub train_frames: usize,
    pub val_sequences: usize,
    pub test_sequences: usize,
    pub test_frames: usize,
    pub budget: SamplingBudget,
    pub memory_size: usize,
    pub batch_size: usize,
    pub net: NetConfig,
    pub pretrain: StageSchedule,
    pub sampler: StageSchedule,
    pub joint: StageSchedule,
    pub prednet: StageSchedule,
    pub prednet_sampler: StageSchedule,
    pub fixed: StageSchedule,
    pub implicit: Option<StageSchedule>,
    pub temperature: Temperature,
    pub seed: u64,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        let s = |epochs, learning_rate, alpha| StageSchedule {
            epochs,
            learning_rate,
            alpha,
        };
        Self {
            scene: SyntheticSceneConfig::default(),
            train_sequences: 100,
            train_frames: 20,
            val_sequences: 4,
            test_sequences: 8,
            test_frames: 30,
            budget: SamplingBudget::new(410).expect("positive"),
            memory_size: 4,
            batch_size: 8,
            net: NetConfig {
                levels: 3,
                base_channels: 8,
            },
            pretrain: s(6, 2e-3, 0.0),
            sampler: s(2, 1e-3, 4.0),
            joint: s(6, 3e-4, 50.0),
            prednet: s(3, 1e-3, 0.0),
            prednet_sampler: s(1, 5e-4, 4.0),
            fixed: s(1, 5e-2, 20.0),
            implicit: None,
            // near-uniform soft masks at beta 1 carry depth everywhere
            temperature: Temperature::new(4.0).expect("positive"),
            seed: 0,
        }
    }
}

/// Everything the recipe trains and measures.
#[derive(Debug)]
pub struct RecipeOutcome {
    pub train: Vec<DepthSequence>,
    pub test: Vec<DepthSequence>,
    pub completion_a: ReferenceCompletion<f32>,
    pub completion_b: ReferenceCompletion<f32>,
    /// Lower-bound sampler after the frozen stage.
    pub sampler_frozen: SamplerNet<f32>,
    pub sampler_lb: SamplerNet<f32>,
    pub completion_lb: ReferenceCompletion<f32>,
    pub prednet: PredNetModel<f32>,
    pub sampler_prednet: SamplerNet<f32>,
    pub completion_prednet: ReferenceCompletion<f32>,
    pub fixed_mask: FixedMaskParams,
    pub completion_fixed: ReferenceCompletion<f32>,
    pub reports: Vec<StageReport>,
    /// Test traces keyed by method name.
    pub traces: BTreeMap<String, Trace>,
    /// Frozen lower-bound sampler with completion A (matched) and B (mixed).
    pub matched: Trace,
    pub mixed: Trace,
    pub seconds: f64,
}

impl RecipeConfig {
    fn train_config(&self, stage: Stage, s: StageSchedule) -> TrainConfig {
        TrainConfig {
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            alpha: LossWeights { alpha: s.alpha },
            batch_size: if stage == Stage::FixedMask { 1 } else { self.batch_size },
            budget: self.budget,
            seed: derive_seed(self.seed, 100 + stage as u64),
            max_range: self.scene.max_range,
            temperature: self.temperature,
            ..TrainConfig::for_stage(stage)
        }
    }

    fn e2e_config(&self, mode: PriorMode) -> E2EConfig {
        E2EConfig {
            memory_size: self.memory_size,
            history: (mode == PriorMode::Implicit).then_some(mode.default_memory()),
            budget: self.budget,
            prior_mode: mode,
            seed: derive_seed(self.seed, 7),
            max_range: self.scene.max_range,
            temperature: self.temperature,
            ..E2EConfig::default()
        }
    }

    fn corpus(&self, salt: u64, count: usize, frames: usize) -> Result<Vec<DepthSequence>> {
        let scene = SyntheticSceneConfig {
            seed: derive_seed(self.seed, salt),
            ..self.scene.clone()
        };
        let mut seqs = generate_corpus(&scene, count, frames)?;
        let prefix = ["train", "val", "test"][salt as usize];
        for s in &mut seqs {
            *s = DepthSequence::new(format!("{prefix}_{}", s.id()), s.frames().to_vec())?;
        }
        Ok(seqs)
    }
}

fn stage_done(what: &str, report: &StageReport, clock: &Instant) {
    info!(
        "{what}: {} steps, losses {:?}, {:.0}s elapsed",
        report.steps,
        report.epoch_losses,
        clock.elapsed().as_secs_f64()
    );
}

pub fn run_recipe(cfg: &RecipeConfig) -> Result<RecipeOutcome> {
    let clock = Instant::now();
    let temp = cfg.temperature;
    let max_range = cfg.scene.max_range;
    let train = cfg.corpus(0, cfg.train_sequences, cfg.train_frames)?;
    let val = cfg.corpus(1, cfg.val_sequences, cfg.train_frames)?;
    let test = cfg.corpus(2, cfg.test_sequences, cfg.test_frames)?;
    let (h, w) = train[0].shape().expect("non-empty frames");
    let density = cfg.budget.k() as f64 / (h * w) as f64;
    let ccfg = CompletionConfig {
        levels: cfg.net.levels,
        base_channels: cfg.net.base_channels,
    };
    let mut reports = Vec::new();

    let pre = cfg.train_config(Stage::PretrainCompletion, cfg.pretrain);
    let mut completion_a = ReferenceCompletion::new(ccfg, derive_seed(cfg.seed, 1))?;
    let r = stage1_pretrain_completion(&pre, &train, &mut completion_a, AgnosticSampler::Random)?;
    stage_done("completion A", &r, &clock);
    reports.push(r);
    let mut completion_b = ReferenceCompletion::new(ccfg, derive_seed(cfg.seed, 2))?;
    let pre_b = TrainConfig {
        seed: derive_seed(pre.seed, 1),
        ..pre.clone()
    };
    let r = stage1_pretrain_completion(&pre_b, &train, &mut completion_b, AgnosticSampler::Random)?;
    stage_done("completion B", &r, &clock);
    reports.push(r);

    let s2 = cfg.train_config(Stage::TrainSampler, cfg.sampler);
    let mut sampler = SamplerNet::new(cfg.net.levels, cfg.net.base_channels, 1, derive_seed(cfg.seed, 3))?;
    sampler.init_density(density, temp);
    let mut frozen_a = completion_a.clone();
    let out = stage2_train_sampler(&s2, &train, &mut frozen_a, &mut sampler, &PriorSource::GroundTruth, None)?;
    stage_done("lower-bound sampler", &out.report, &clock);
    reports.push(out.report);
    let sampler_frozen = sampler.clone();

    let s3 = cfg.train_config(Stage::JointFinetune, cfg.joint);
    let mut completion_lb = completion_a.clone();
    let validation = Validation {
        data: &val,
        source: PriorSource::GroundTruth,
    };
    let r = stage3_joint_finetune(
        &s3,
        &train,
        &mut sampler,
        &mut completion_lb,
        &PriorSource::GroundTruth,
        None,
        Some(validation),
    )?;
    stage_done("joint fine-tune", &r, &clock);
    reports.push(r);
    let sampler_lb = sampler;

    let (store, sampled_maps) = collect_reconstructions(
        &train,
        &sampler_lb,
        &completion_lb,
        &PriorSource::GroundTruth,
        cfg.budget,
        temp,
        max_range,
    )?;
    info!("stored {} reconstructions, {:.0}s elapsed", store.len(), clock.elapsed().as_secs_f64());

    let pcfg = TrainConfig {
        memory_size: cfg.memory_size,
        ..cfg.train_config(Stage::PredNet, cfg.prednet)
    };
    let mut prednet = PredNetModel::new(
        cfg.net.levels,
        cfg.net.base_channels,
        cfg.memory_size,
        true,
        derive_seed(cfg.seed, 4),
    )?;
    let r = train_prednet(&pcfg, &train, &store, &mut prednet)?;
    stage_done("PredNet", &r, &clock);
    reports.push(r);

    let ps = TrainConfig {
        prior_mode: PriorMode::PredNet,
        memory_size: cfg.memory_size,
        ..cfg.train_config(Stage::TrainSampler, cfg.prednet_sampler)
    };
    let source = PriorSource::Stored {
        mode: PriorMode::PredNet,
        store: &store,
        prednet: Some(&prednet),
        memory: cfg.memory_size,
    };
    let mut sampler_prednet = sampler_lb.clone();
    let mut completion_prednet = completion_lb.clone();
    let out = stage2_train_sampler(&ps, &train, &mut completion_prednet, &mut sampler_prednet, &source, None)?;
    stage_done("PredNet-prior sampler", &out.report, &clock);
    reports.push(out.report);

    let fcfg = TrainConfig {
        joint_completion: true,
        ..cfg.train_config(Stage::FixedMask, cfg.fixed)
    };
    let mut completion_fixed = completion_a.clone();
    let (fixed_mask, r) = train_fixed_mask(&fcfg, &train, &mut completion_fixed, None)?;
    stage_done("fixed mask", &r, &clock);
    reports.push(r);

    let mut implicit_models = None;
    if let Some(schedule) = cfg.implicit {
        let b = PriorMode::Implicit.default_memory();
        let icfg = TrainConfig {
            memory_size: b,
            ..cfg.train_config(Stage::ImplicitPred, schedule)
        };
        let source = PriorSource::Stored {
            mode: PriorMode::Implicit,
            store: &store,
            prednet: None,
            memory: b,
        };
        let mut s = SamplerNet::new(cfg.net.levels, cfg.net.base_channels, b, derive_seed(cfg.seed, 5))?;
        s.init_density(density, temp);
        let mut c = completion_lb.clone();
        let out = stage2_train_sampler(&icfg, &train, &mut c, &mut s, &source, Some(&sampled_maps))?;
        stage_done("implicit sampler", &out.report, &clock);
        reports.push(out.report);
        implicit_models = Some((s, c));
    }

    let mut traces = BTreeMap::new();
    let e2e_seed = cfg.e2e_config(PriorMode::PredNet).seed;
    traces.insert(
        "agnostic".to_string(),
        evaluate_agnostic(&test, &completion_a, AgnosticSampler::Random, cfg.budget, e2e_seed, max_range)?,
    );
    traces.insert(
        "fixed".to_string(),
        evaluate_fixed(&test, &completion_fixed, &fixed_mask, cfg.budget, temp, max_range)?,
    );
    traces.insert(
        "lower_bound".to_string(),
        evaluate_sampler_trace(&test, &sampler_lb, &completion_lb, &PriorSource::GroundTruth, cfg.budget, temp, max_range)?,
    );
    let models = E2EModels {
        sampler: &sampler_prednet,
        prednet: Some(&prednet),
        completion: &completion_prednet,
    };
    traces.insert(
        "prednet".to_string(),
        run_end_to_end_all(&test, models, &cfg.e2e_config(PriorMode::PredNet))?,
    );
    if let Some((s, c)) = &implicit_models {
        let models = E2EModels {
            sampler: s,
            prednet: None,
            completion: c,
        };
        traces.insert(
            "implicit".to_string(),
            run_end_to_end_all(&test, models, &cfg.e2e_config(PriorMode::Implicit))?,
        );
    }
    let gt = PriorSource::GroundTruth;
    let matched = mix_and_match_eval(&test, &sampler_frozen, &completion_a, &gt, cfg.budget, temp, max_range)?;
    let mixed = mix_and_match_eval(&test, &sampler_frozen, &completion_b, &gt, cfg.budget, temp, max_range)?;
    let seconds = clock.elapsed().as_secs_f64();
    info!("recipe finished in {seconds:.0}s");
    Ok(RecipeOutcome {
        train,
        test,
        completion_a,
        completion_b,
        sampler_frozen,
        sampler_lb,
        completion_lb,
        prednet,
        sampler_prednet,
        completion_prednet,
        fixed_mask,
        completion_fixed,
        reports,
        traces,
        matched,
        mixed,
        seconds,
    })
}

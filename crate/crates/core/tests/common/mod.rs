#![allow(dead_code)]

use adaptive_depth::data::{generate_corpus, SyntheticSceneConfig};
use adaptive_depth::nn::models::{CompletionConfig, PredNetModel, ReferenceCompletion, SamplerNet};
use adaptive_depth::pipeline::{ModelConfig, NetConfig, Stage, TrainConfig};
use adaptive_depth::{DepthSequence, SamplingBudget};

pub const H: usize = 16;
pub const W: usize = 32;
pub const K: usize = 26;

pub fn scene(seed: u64) -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        height: H,
        width: W,
        horizon_row: 6,
        num_boxes: 3,
        focal: 30.0,
        seed,
        ..Default::default()
    }
}

pub fn corpus(sequences: usize, frames: usize, seed: u64) -> Vec<DepthSequence> {
    generate_corpus(&scene(seed), sequences, frames).unwrap()
}

pub fn tiny_net() -> NetConfig {
    NetConfig {
        levels: 3,
        base_channels: 4,
    }
}

pub fn tiny_models() -> ModelConfig {
    ModelConfig {
        sampler: tiny_net(),
        completion: CompletionConfig {
            levels: 3,
            base_channels: 4,
        },
        prednet: tiny_net(),
        prednet_residual: true,
    }
}

pub fn train_config(stage: Stage) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 2,
        budget: SamplingBudget::new(K).unwrap(),
        models: tiny_models(),
        ..TrainConfig::for_stage(stage)
    }
}

pub fn completion(seed: u64) -> ReferenceCompletion<f32> {
    ReferenceCompletion::new(tiny_models().completion, seed).unwrap()
}

pub fn sampler(channels: usize, seed: u64) -> SamplerNet<f32> {
    SamplerNet::new(3, 4, channels, seed).unwrap()
}

pub fn prednet(past: usize, seed: u64) -> PredNetModel<f32> {
    PredNetModel::new(3, 4, past, true, seed).unwrap()
}

use adaptive_depth::nn::graph::Graph;
use adaptive_depth::nn::models::{depth_channels, image_tensor, soft_argmax_var, CompletionTask};
use adaptive_depth::nn::tensor::Tensor;
use adaptive_depth::pipeline::losses::sample_loss_var;
use adaptive_depth::{SequenceFrame, Temperature};

/// `task_loss(completion(M * D, M, I), D) + alpha * sample_loss(M)` with
/// `M = soft_argmax(logits)`, plus its gradient w.r.t. the logits. The
/// completion network takes no gradient.
pub fn logits_objective<C: CompletionTask<f64>>(
    completion: &C,
    frame: &SequenceFrame,
    logits: Tensor<f64>,
    alpha: f64,
) -> (f64, Tensor<f64>) {
    let (h, w) = frame.shape();
    let mut g = Graph::new();
    let cvars = completion.params().bind(&mut g, false);
    let l = g.leaf(logits, true);
    let m = soft_argmax_var(&mut g, l, Temperature::default()).unwrap();
    let d = g.constant(depth_channels(&[&frame.depth], 100.0).unwrap());
    let v = g.constant(Tensor::full([1, 1, h, w], 1.0));
    let ds = g.mul(m, d).unwrap();
    let wts = g.mul(m, v).unwrap();
    let img = g.constant(image_tensor(&frame.image));
    let pred = completion.forward(&mut g, &cvars, ds, wts, img).unwrap();
    let task = completion.loss(&mut g, pred, d, v).unwrap();
    let sample = sample_loss_var(&mut g, m, SamplingBudget::new(K).unwrap());
    let weighted = g.scale(sample, alpha);
    let total = g.add(task, weighted).unwrap();
    let value = g.value(total).item();
    let mut grads = g.backward(total).unwrap();
    (value, grads.take(l).unwrap())
}

//! The three networks of the pipeline and the pluggable completion interface.

use serde::{Deserialize, Serialize};

use crate::depth::{normalize_depth, DepthMap, RgbImage};
use crate::error::{Error, Result};
use crate::mask::{logistic, ProbabilityMap, SampleMask, Temperature};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::ParamSet;
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::unet::{UNet, UNetConfig};

/// Normalized depth maps as a `[1, maps, H, W]` tensor (one channel per map).
pub fn depth_channels<T: Scalar>(maps: &[&DepthMap], max_range: f64) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Shape("no depth maps to stack".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        m.ensure_same_shape((h, w), "depth channels")?;
        data.extend(normalize_depth(m, max_range)?.into_iter().map(T::of));
    }
    Tensor::from_vec([1, maps.len(), h, w], data)
}

/// Validity flags as a `[1, 1, H, W]` 0/1 tensor.
pub fn validity_channel<T: Scalar>(map: &DepthMap) -> Tensor<T> {
    let data = map
        .valid()
        .iter()
        .map(|&ok| if ok { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec([1, 1, map.height(), map.width()], data).expect("validity shape")
}

pub fn image_tensor<T: Scalar>(image: &RgbImage) -> Tensor<T> {
    Tensor::from_f32([1, 3, image.height(), image.width()], image.planar()).expect("image shape")
}

pub fn mask_tensor<T: Scalar>(mask: &SampleMask) -> Tensor<T> {
    Tensor::from_f32([1, 1, mask.height(), mask.width()], mask.values()).expect("mask shape")
}

/// Dense depth map from a `[1, 1, H, W]` normalized prediction.
pub fn tensor_to_depth<T: Scalar>(t: &Tensor<T>, max_range: f64) -> Result<DepthMap> {
    let [_, _, h, w] = t.shape();
    let grid: Vec<f64> = t.plane(0, 0).iter().map(|v| v.as_f64()).collect();
    crate::depth::denormalize_depth(&grid, h, w, max_range)
}

/// `sigmoid(beta * (logits[1] - logits[0]))` inside a graph.
pub fn soft_argmax_var<T: Scalar>(g: &mut Graph<T>, logits: Var, temp: Temperature) -> Result<Var> {
    let skip = g.channel(logits, 0)?;
    let sample = g.channel(logits, 1)?;
    let diff = g.sub(sample, skip)?;
    let scaled = g.scale(diff, T::of(temp.beta()));
    Ok(g.sigmoid(scaled))
}

/// SampleDepth: a U-Net mapping priors to two-channel sampling logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerNet<T> {
    net: UNet<T>,
}

impl<T: Scalar> SamplerNet<T> {
    pub fn new(levels: usize, base_channels: usize, prior_channels: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            net: UNet::new(UNetConfig::new(levels, base_channels, prior_channels, 2), seed)?,
        })
    }

    pub fn from_unet(net: UNet<T>) -> Result<Self> {
        if net.config().out_channels != 2 {
            return Err(Error::Config("sampler backbone must emit 2 channels".into()));
        }
        Ok(Self { net })
    }

    pub fn unet(&self) -> &UNet<T> {
        &self.net
    }

    pub fn prior_channels(&self) -> usize {
        self.net.config().in_channels
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.net.params_mut()
    }

    /// Shifts the head bias so the initial soft mask averages `density`.
    pub fn init_density(&mut self, density: f64, temp: Temperature) {
        let p = density.clamp(1e-6, 1.0 - 1e-6);
        let target = (p / (1.0 - p)).ln() / temp.beta();
        let n = self.net.params().len();
        let bias = self.net.params_mut().get_mut(n - 1);
        bias.data_mut()[0] = T::zero();
        bias.data_mut()[1] = T::of(target);
    }

    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], prior: Var) -> Result<Var> {
        self.net.forward(g, vars, prior)
    }

    /// Logits for a `[1, b, H, W]` normalized prior.
    pub fn probability_map(&self, prior: Tensor<T>) -> Result<ProbabilityMap> {
        let [_, _, h, w] = prior.shape();
        let out = self.net.infer(prior)?;
        ProbabilityMap::new(h, w, out.to_f32())
    }
}

/// Next-frame depth predictor fed with the `b` most recent reconstructions.
#[derive(Clone, Debug, PartialEq)]
pub struct PredNetModel<T> {
    net: UNet<T>,
    residual: bool,
}

impl<T: Scalar> PredNetModel<T> {
    /// With `residual`, the network output is added to the newest input map.
    pub fn new(levels: usize, base_channels: usize, past_frames: usize, residual: bool, seed: u64) -> Result<Self> {
        let mut net = UNet::new(UNetConfig::new(levels, base_channels, past_frames, 1), seed)?;
        if residual {
            shrink_head(&mut net, 0.1, 0.0);
        }
        Ok(Self { net, residual })
    }

    pub fn from_unet(net: UNet<T>, residual: bool) -> Result<Self> {
        if net.config().out_channels != 1 {
            return Err(Error::Config("PredNet backbone must emit 1 channel".into()));
        }
        Ok(Self { net, residual })
    }

    pub fn unet(&self) -> &UNet<T> {
        &self.net
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn past_frames(&self) -> usize {
        self.net.config().in_channels
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.net.params_mut()
    }

    /// Normalized prediction from a `[N, b, H, W]` stack (newest first).
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], stack: Var) -> Result<Var> {
        let out = self.net.forward(g, vars, stack)?;
        if self.residual {
            let newest = g.channel(stack, 0)?;
            g.add(out, newest)
        } else {
            Ok(out)
        }
    }

    /// Dense predicted map; negative outputs clamp to 0.
    pub fn predict(&self, past: &[&DepthMap], max_range: f64) -> Result<DepthMap> {
        if past.len() != self.past_frames() {
            return Err(Error::Shape(format!(
                "PredNet expects {} past maps, got {}",
                self.past_frames(),
                past.len()
            )));
        }
        let mut g = Graph::new();
        let vars = self.params().bind(&mut g, false);
        let x = g.constant(depth_channels(past, max_range)?);
        let y = self.forward(&mut g, &vars, x)?;
        tensor_to_depth(g.value(y), max_range)
    }
}

/// Scales the output head's weights and sets its bias.
fn shrink_head<T: Scalar>(net: &mut UNet<T>, weight_scale: f64, bias: f64) {
    let n = net.params().len();
    let p = net.params_mut();
    p.get_mut(n - 2).data_mut().iter_mut().for_each(|v| *v *= T::of(weight_scale));
    p.get_mut(n - 1).data_mut().fill(T::of(bias));
}

/// Downstream depth completion `f(D_s, I)`.
///
/// All depth tensors are normalized to `[0, 1]` by the pipeline's range.
pub trait CompletionTask<T: Scalar> {
    fn name(&self) -> &str;

    fn params(&self) -> &ParamSet<T>;

    fn params_mut(&mut self) -> &mut ParamSet<T>;

    fn is_frozen(&self) -> bool;

    fn set_frozen(&mut self, frozen: bool);

    /// Rejects frame sizes the network cannot process.
    fn check_input(&self, _height: usize, _width: usize) -> Result<()> {
        Ok(())
    }

    /// Dense `[N, 1, H, W]` prediction from sampled depth, per-pixel
    /// sampling weights, and the `[N, 3, H, W]` image.
    fn forward(&self, g: &mut Graph<T>, vars: &[Var], sparse: Var, weights: Var, image: Var) -> Result<Var>;

    /// Training loss against `target`, counted where `valid` is 1.
    /// Defaults to masked mean squared error.
    fn loss(&self, g: &mut Graph<T>, pred: Var, target: Var, valid: Var) -> Result<Var> {
        masked_mse(g, pred, target, valid)
    }
}

/// `sum(valid * (pred - target)^2) / sum(valid)` with `valid` a constant.
pub fn masked_mse<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, valid: Var) -> Result<Var> {
    let count: f64 = g.value(valid).data().iter().map(|v| v.as_f64()).sum();
    if count == 0.0 {
        return Err(Error::UndefinedMetric("no valid target pixels".into()));
    }
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    let w = g.mul(sq, valid)?;
    let s = g.sum(w);
    Ok(g.scale(s, T::of(1.0 / count)))
}

/// `sum(valid * |pred - target|) / sum(valid)` with `valid` a constant.
pub fn masked_l1<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, valid: Var) -> Result<Var> {
    let count: f64 = g.value(valid).data().iter().map(|v| v.as_f64()).sum();
    if count == 0.0 {
        return Err(Error::UndefinedMetric("no valid target pixels".into()));
    }
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    let w = g.mul(a, valid)?;
    let s = g.sum(w);
    Ok(g.scale(s, T::of(1.0 / count)))
}

/// Architecture of the bundled completion network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionConfig {
    pub levels: usize,
    pub base_channels: usize,
}

impl CompletionConfig {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig::new(self.levels, self.base_channels, ReferenceCompletion::<f32>::INPUTS, 1)
    }
}

/// Small U-Net completion network over four planes: sampled depth,
/// sampling weights, grayscale image and a constant bias plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCompletion<T> {
    net: UNet<T>,
    frozen: bool,
}

impl<T: Scalar> ReferenceCompletion<T> {
    pub const INPUTS: usize = 4;

    /// The head starts near a constant mid-range prediction; narrow nets
    /// otherwise stall on some seeds.
    pub fn new(config: CompletionConfig, seed: u64) -> Result<Self> {
        let mut net = UNet::new(config.unet(), seed)?;
        shrink_head(&mut net, 0.1, 0.5);
        Ok(Self { net, frozen: false })
    }

    pub fn from_unet(net: UNet<T>) -> Result<Self> {
        let c = net.config();
        if c.in_channels != Self::INPUTS || c.out_channels != 1 {
            return Err(Error::Config(format!(
                "completion backbone must map {} channels to 1, got {}->{}",
                Self::INPUTS,
                c.in_channels,
                c.out_channels
            )));
        }
        Ok(Self { net, frozen: false })
    }

    pub fn unet(&self) -> &UNet<T> {
        &self.net
    }

    pub fn config(&self) -> CompletionConfig {
        CompletionConfig {
            levels: self.net.config().levels,
            base_channels: self.net.config().base_channels,
        }
    }
}

impl<T: Scalar> CompletionTask<T> for ReferenceCompletion<T> {
    fn name(&self) -> &str {
        "reference-unet"
    }

    fn params(&self) -> &ParamSet<T> {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.net.params_mut()
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn check_input(&self, height: usize, width: usize) -> Result<()> {
        self.net.config().check_input(height, width)
    }

    fn forward(&self, g: &mut Graph<T>, vars: &[Var], sparse: Var, weights: Var, image: Var) -> Result<Var> {
        let [n, c, h, w] = g.shape(image);
        if c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
        }
        if g.shape(sparse) != [n, 1, h, w] || g.shape(weights) != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "sparse {:?} / weights {:?} do not match image {:?}",
                g.shape(sparse),
                g.shape(weights),
                g.shape(image)
            )));
        }
        let r = g.channel(image, 0)?;
        let gr = g.channel(image, 1)?;
        let b = g.channel(image, 2)?;
        let rg = g.add(r, gr)?;
        let rgb = g.add(rg, b)?;
        let gray = g.scale(rgb, T::of(1.0 / 3.0));
        let ones = g.constant(Tensor::full([n, 1, h, w], T::one()));
        let input = g.concat(&[sparse, weights, gray, ones])?;
        self.net.forward(g, vars, input)
    }
}

/// Runs a completion network on one hardened sample.
pub fn complete<T: Scalar, C: CompletionTask<T> + ?Sized>(
    task: &C,
    sparse: &DepthMap,
    mask: &SampleMask,
    image: &RgbImage,
    max_range: f64,
) -> Result<DepthMap> {
    if sparse.shape() != image.shape() || mask.shape() != image.shape() {
        return Err(Error::Shape(format!(
            "sparse {:?}, mask {:?} and image {:?} must match",
            sparse.shape(),
            mask.shape(),
            image.shape()
        )));
    }
    let mut g = Graph::new();
    let vars = task.params().bind(&mut g, false);
    let s = g.constant(depth_channels(&[sparse], max_range)?);
    let m = g.constant(mask_tensor(mask));
    let i = g.constant(image_tensor(image));
    let y = task.forward(&mut g, &vars, s, m, i)?;
    tensor_to_depth(g.value(y), max_range)
}

/// Soft sampling-weight statistics of a logit map under a temperature.
pub fn soft_density(p: &ProbabilityMap, temp: Temperature) -> f64 {
    let n = p.skip_channel().len() as f64;
    p.skip_channel()
        .iter()
        .zip(p.sample_channel())
        .map(|(&a, &b)| logistic(temp.beta() * (b as f64 - a as f64)))
        .sum::<f64>()
        / n
}

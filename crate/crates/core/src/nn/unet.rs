use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{kaiming_conv, ParamSet};
use crate::nn::tensor::{Scalar, Tensor};
use crate::rng;

/// Encoder-decoder shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Number of 2× contractions; inputs must be divisible by `2^levels`.
    pub levels: usize,
    /// Channels at full resolution; doubled at every level.
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl UNetConfig {
    pub fn new(levels: usize, base_channels: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            levels,
            base_channels,
            in_channels,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=5).contains(&self.levels) {
            return Err(Error::Config(format!(
                "U-Net levels must be 3, 4 or 5, got {}",
                self.levels
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("U-Net channel counts must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Checks that an `h × w` input survives every contraction.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << self.levels;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} input is not divisible by 2^{} = {f}",
                self.levels
            )));
        }
        Ok(())
    }
}

/// U-Net with two 3×3 conv + ReLU layers per block, max-pool contraction,
/// nearest-neighbour expansion with skip concatenation, and a linear 1×1
/// output head.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> UNet<T> {
    /// Deterministic He-normal initialization with zero biases.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = ParamSet::new();
        let mut block = |params: &mut ParamSet<T>, name: String, cin: usize, cout: usize| {
            params.push(format!("{name}.conv1.weight"), kaiming_conv(cout, cin, 3, &mut rng));
            params.push(format!("{name}.conv1.bias"), Tensor::zeros([1, cout, 1, 1]));
            params.push(format!("{name}.conv2.weight"), kaiming_conv(cout, cout, 3, &mut rng));
            params.push(format!("{name}.conv2.bias"), Tensor::zeros([1, cout, 1, 1]));
        };
        let mut cin = config.in_channels;
        for l in 0..=config.levels {
            let cout = config.channels_at(l);
            block(&mut params, format!("enc{l}"), cin, cout);
            cin = cout;
        }
        for l in (0..config.levels).rev() {
            let cout = config.channels_at(l);
            block(&mut params, format!("dec{l}"), cin + cout, cout);
            cin = cout;
        }
        // the head is not followed by a ReLU, so use unit-gain fan-in scaling
        let mut head: Tensor<T> = kaiming_conv(config.out_channels, cin, 1, &mut rng);
        let rescale = T::of(0.5f64.sqrt());
        head.data_mut().iter_mut().for_each(|v| *v *= rescale);
        params.push("head.weight", head);
        params.push("head.bias", Tensor::zeros([1, config.out_channels, 1, 1]));
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against a
    /// fresh network of the same configuration.
    pub fn from_params(config: UNetConfig, params: ParamSet<T>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        net.params.assign(&params)?;
        Ok(net)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Forward pass with parameters already bound into `g`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(x);
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.check_input(h, w)?;
        if vars.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} bound parameters for a {}-parameter network",
                vars.len(),
                self.params.len()
            )));
        }
        let mut next = vars.iter().copied();
        let mut conv_relu = |g: &mut Graph<T>, h: Var| -> Result<Var> {
            let w = next.next().expect("weight bound");
            let b = next.next().expect("bias bound");
            let y = g.conv2d(h, w, b, 1)?;
            Ok(g.relu(y))
        };
        let mut h = x;
        let mut skips = Vec::with_capacity(self.config.levels);
        for l in 0..=self.config.levels {
            h = conv_relu(g, h)?;
            h = conv_relu(g, h)?;
            if l < self.config.levels {
                skips.push(h);
                h = g.max_pool2(h)?;
            }
        }
        while let Some(skip) = skips.pop() {
            let up = g.upsample2(h);
            h = g.concat(&[up, skip])?;
            h = conv_relu(g, h)?;
            h = conv_relu(g, h)?;
        }
        let hw = vars[vars.len() - 2];
        let hb = vars[vars.len() - 1];
        g.conv2d(h, hw, hb, 0)
    }

    /// Inference on a batch without recording gradients for parameters.
    pub fn infer(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(input);
        let y = self.forward(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}

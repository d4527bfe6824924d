//! Checkpoint container.
//!
//! A checkpoint is a safetensors file. Every parameter is stored as a
//! little-endian `F32` tensor with its 4-d shape under its parameter name.
//! The header metadata map carries:
//!
//! | key              | value                                           |
//! |------------------|-------------------------------------------------|
//! | `schema_version` | decimal integer, currently `1`                  |
//! | `component`      | `sampler`, `prednet`, `completion`, `fixed_mask` |
//! | `architecture`   | JSON describing the network shape               |
//! | `param_order`    | JSON array of parameter names in network order  |
//! | `epoch`          | decimal integer                                 |
//! | `seed`           | decimal integer                                 |
//! | `config_hash`    | hex SHA-256 of the training configuration       |

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::FixedMaskParams;
use crate::error::{Error, Result};
use crate::mask::ProbabilityMap;
use crate::nn::models::{CompletionConfig, PredNetModel, ReferenceCompletion, SamplerNet};
use crate::nn::params::ParamSet;
use crate::nn::tensor::Tensor;
use crate::nn::unet::{UNet, UNetConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Which pipeline slot a checkpoint belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Sampler,
    #[serde(rename = "prednet")]
    PredNet,
    Completion,
    FixedMask,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Sampler => "sampler",
            Component::PredNet => "prednet",
            Component::Completion => "completion",
            Component::FixedMask => "fixed_mask",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampler" => Ok(Component::Sampler),
            "prednet" => Ok(Component::PredNet),
            "completion" => Ok(Component::Completion),
            "fixed_mask" => Ok(Component::FixedMask),
            other => Err(Error::Format(format!("unknown component tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub component: Component,
    pub architecture: serde_json::Value,
    pub metadata: TrainingMetadata,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(
        component: Component,
        architecture: serde_json::Value,
        metadata: TrainingMetadata,
        params: ParamSet<f32>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            component,
            architecture,
            metadata,
            params,
        }
    }

    /// Fails with a component error unless the tag is `expected`.
    pub fn expect(&self, expected: Component) -> Result<()> {
        if self.component != expected {
            return Err(Error::Component {
                expected: expected.to_string(),
                found: self.component.to_string(),
            });
        }
        Ok(())
    }

    fn architecture_as<A: for<'de> Deserialize<'de>>(&self) -> Result<A> {
        serde_json::from_value(self.architecture.clone())
            .map_err(|e| Error::Format(format!("bad {} architecture: {e}", self.component)))
    }
}

/// Hex SHA-256 of the JSON serialization of a configuration.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let json = serde_json::to_vec(config).expect("configuration serializes");
    format!("{:x}", Sha256::digest(json))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<(String, Vec<u8>, [usize; 4])> = ckpt
        .params
        .iter()
        .map(|p| {
            let raw = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (p.name.clone(), raw, p.value.shape())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, raw, shape)| {
            TensorView::new(Dtype::F32, shape.to_vec(), raw)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let order: Vec<&str> = ckpt.params.iter().map(|p| p.name.as_str()).collect();
    let meta = HashMap::from([
        ("schema_version".to_string(), ckpt.schema_version.to_string()),
        ("component".to_string(), ckpt.component.to_string()),
        ("architecture".to_string(), ckpt.architecture.to_string()),
        ("param_order".to_string(), serde_json::to_string(&order).expect("names serialize")),
        ("epoch".to_string(), ckpt.metadata.epoch.to_string()),
        ("seed".to_string(), ckpt.metadata.seed.to_string()),
        ("config_hash".to_string(), ckpt.metadata.config_hash.clone()),
    ]);
    let buf = safetensors::serialize(views, Some(meta))
        .map_err(|e| Error::Format(format!("serializing checkpoint: {e}")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let st = SafeTensors::deserialize(buf).map_err(|e| Error::Format(e.to_string()))?;
    let (_, header) = SafeTensors::read_metadata(buf).map_err(|e| Error::Format(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Format("missing checkpoint metadata".into()))?;
    let field = |key: &str| {
        meta.get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing metadata field `{key}`")))
    };
    let number = |key: &str| -> Result<u64> {
        field(key)?
            .parse()
            .map_err(|_| Error::Format(format!("metadata field `{key}` is not an integer")))
    };
    let schema_version = number("schema_version")? as u32;
    if schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported schema_version {schema_version} (this build reads {SCHEMA_VERSION})"
        )));
    }
    let component: Component = field("component")?.parse()?;
    let architecture = serde_json::from_str(field("architecture")?)
        .map_err(|e| Error::Format(format!("architecture: {e}")))?;
    let order: Vec<String> = serde_json::from_str(field("param_order")?)
        .map_err(|e| Error::Format(format!("param_order: {e}")))?;
    if order.len() != st.len() {
        return Err(Error::Format(format!(
            "param_order lists {} tensors, file holds {}",
            order.len(),
            st.len()
        )));
    }
    let mut params = ParamSet::new();
    for name in order {
        let view = st
            .tensor(&name)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        if view.dtype() != Dtype::F32 || view.shape().len() != 4 {
            return Err(Error::Format(format!(
                "tensor {name} must be 4-d F32, found {:?} {:?}",
                view.dtype(),
                view.shape()
            )));
        }
        let shape = [view.shape()[0], view.shape()[1], view.shape()[2], view.shape()[3]];
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(name, Tensor::from_vec(shape, data)?);
    }
    Ok(Checkpoint {
        schema_version,
        component,
        architecture,
        metadata: TrainingMetadata {
            epoch: number("epoch")? as usize,
            seed: number("seed")?,
            config_hash: field("config_hash")?.to_string(),
        },
        params,
    })
}

#[derive(Serialize, Deserialize)]
struct PredNetArchitecture {
    unet: UNetConfig,
    residual: bool,
}

#[derive(Serialize, Deserialize)]
struct CompletionArchitecture {
    kind: String,
    config: CompletionConfig,
}

#[derive(Serialize, Deserialize)]
struct FixedMaskArchitecture {
    height: usize,
    width: usize,
    seed: u64,
}

impl SamplerNet<f32> {
    pub fn to_checkpoint(&self, metadata: TrainingMetadata) -> Checkpoint {
        Checkpoint::new(
            Component::Sampler,
            serde_json::to_value(self.unet().config()).expect("config serializes"),
            metadata,
            self.params().clone(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect(Component::Sampler)?;
        let config: UNetConfig = ckpt.architecture_as()?;
        SamplerNet::from_unet(UNet::from_params(config, ckpt.params.clone())?)
    }
}

impl PredNetModel<f32> {
    pub fn to_checkpoint(&self, metadata: TrainingMetadata) -> Checkpoint {
        let arch = PredNetArchitecture {
            unet: *self.unet().config(),
            residual: self.residual(),
        };
        Checkpoint::new(
            Component::PredNet,
            serde_json::to_value(arch).expect("config serializes"),
            metadata,
            self.params().clone(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect(Component::PredNet)?;
        let arch: PredNetArchitecture = ckpt.architecture_as()?;
        PredNetModel::from_unet(UNet::from_params(arch.unet, ckpt.params.clone())?, arch.residual)
    }
}

impl ReferenceCompletion<f32> {
    pub fn to_checkpoint(&self, metadata: TrainingMetadata) -> Checkpoint {
        let arch = CompletionArchitecture {
            kind: "reference-unet".into(),
            config: self.config(),
        };
        Checkpoint::new(
            Component::Completion,
            serde_json::to_value(arch).expect("config serializes"),
            metadata,
            crate::nn::models::CompletionTask::params(self).clone(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect(Component::Completion)?;
        let arch: CompletionArchitecture = ckpt.architecture_as()?;
        if arch.kind != "reference-unet" {
            return Err(Error::Format(format!("unknown completion kind `{}`", arch.kind)));
        }
        ReferenceCompletion::from_unet(UNet::from_params(arch.config.unet(), ckpt.params.clone())?)
    }
}

impl FixedMaskParams {
    pub fn to_checkpoint(&self, metadata: TrainingMetadata) -> Checkpoint {
        let (h, w) = self.shape();
        let mut params = ParamSet::new();
        params.push(
            "logits",
            Tensor::from_vec([1, 2, h, w], self.logits.logits().to_vec()).expect("logit shape"),
        );
        let arch = FixedMaskArchitecture {
            height: h,
            width: w,
            seed: self.seed,
        };
        Checkpoint::new(
            Component::FixedMask,
            serde_json::to_value(arch).expect("config serializes"),
            metadata,
            params,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect(Component::FixedMask)?;
        let arch: FixedMaskArchitecture = ckpt.architecture_as()?;
        let t = ckpt
            .params
            .by_name("logits")
            .ok_or_else(|| Error::Format("fixed mask checkpoint lacks `logits`".into()))?;
        if t.shape() != [1, 2, arch.height, arch.width] {
            return Err(Error::Format(format!(
                "fixed mask logits {:?} do not match {}x{}",
                t.shape(),
                arch.height,
                arch.width
            )));
        }
        Ok(FixedMaskParams {
            logits: ProbabilityMap::new(arch.height, arch.width, t.data().to_vec())?,
            seed: arch.seed,
        })
    }
}

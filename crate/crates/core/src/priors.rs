//! Past reconstructions and the priors built from them.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::codec::{read_depth_png, write_depth_png, KITTI_MAX_DEPTH};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::nn::models::{depth_channels, PredNetModel};
use crate::nn::tensor::{Scalar, Tensor};

/// What the sampler sees before choosing where to sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Fixed mask: no prior, the sampler network is bypassed.
    #[default]
    None,
    /// The ground truth itself.
    LowerBound,
    /// PredNet's prediction of the current frame.
    #[serde(rename = "prednet")]
    PredNet,
    /// The raw stack of past reconstructions.
    Implicit,
}

impl PriorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorMode::None => "none",
            PriorMode::LowerBound => "lower_bound",
            PriorMode::PredNet => "prednet",
            PriorMode::Implicit => "implicit",
        }
    }

    /// Default number of past reconstructions kept.
    pub fn default_memory(self) -> usize {
        match self {
            PriorMode::PredNet => 4,
            PriorMode::Implicit => 2,
            _ => 1,
        }
    }

    /// Sampler input channels for a memory of `b` maps.
    pub fn sampler_channels(self, b: usize) -> usize {
        match self {
            PriorMode::Implicit => b,
            _ => 1,
        }
    }

    pub fn needs_history(self) -> bool {
        matches!(self, PriorMode::PredNet | PriorMode::Implicit)
    }
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PriorMode::None),
            "lower_bound" => Ok(PriorMode::LowerBound),
            "prednet" => Ok(PriorMode::PredNet),
            "implicit" => Ok(PriorMode::Implicit),
            other => Err(Error::Config(format!("unknown prior mode `{other}`"))),
        }
    }
}

/// The `b` most recent reconstructions, newest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStack {
    capacity: usize,
    maps: VecDeque<DepthMap>,
}

impl PriorStack {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("prior memory must hold at least one map".into()));
        }
        Ok(Self {
            capacity,
            maps: VecDeque::with_capacity(capacity),
        })
    }

    /// Builds a stack from maps given newest first.
    pub fn from_newest_first(capacity: usize, maps: Vec<DepthMap>) -> Result<Self> {
        let mut s = Self::new(capacity)?;
        for m in maps.into_iter().rev() {
            s = s.push(m)?;
        }
        Ok(s)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.maps.len() == self.capacity
    }

    pub fn newest(&self) -> Option<&DepthMap> {
        self.maps.front()
    }

    /// Maps ordered newest first.
    pub fn maps(&self) -> impl Iterator<Item = &DepthMap> {
        self.maps.iter()
    }

    /// A new stack with `recon` as newest entry, evicting the oldest when
    /// full. `self` is left untouched.
    pub fn push(&self, recon: DepthMap) -> Result<PriorStack> {
        if let Some(first) = self.maps.front() {
            recon.ensure_same_shape(first.shape(), "prior stack")?;
        }
        let mut next = self.clone();
        if next.maps.len() == next.capacity {
            next.maps.pop_back();
        }
        next.maps.push_front(recon);
        Ok(next)
    }

    fn require_full(&self) -> Result<()> {
        if !self.is_full() {
            return Err(Error::InsufficientHistory {
                needed: self.capacity,
                available: self.maps.len(),
            });
        }
        Ok(())
    }
}

/// Sampler input: one or more depth maps, one channel each.
#[derive(Clone, Debug, PartialEq)]
pub struct Prior {
    pub maps: Vec<DepthMap>,
}

impl Prior {
    pub fn channels(&self) -> usize {
        self.maps.len()
    }

    /// Normalized `[1, channels, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self, max_range: f64) -> Result<Tensor<T>> {
        depth_channels(&self.maps.iter().collect::<Vec<_>>(), max_range)
    }
}

/// Builds the sampler input for `mode`. Never mutates the stack.
pub fn make_prior(
    mode: PriorMode,
    stack: &PriorStack,
    prednet: Option<&PredNetModel<f32>>,
    gt: Option<&DepthMap>,
    max_range: f64,
) -> Result<Prior> {
    match mode {
        PriorMode::None => Err(Error::Config(
            "prior mode `none` has no sampler input; the fixed mask bypasses the sampler".into(),
        )),
        PriorMode::LowerBound => {
            let gt = gt.ok_or_else(|| Error::Config("lower_bound prior needs the ground truth".into()))?;
            Ok(Prior { maps: vec![gt.clone()] })
        }
        PriorMode::PredNet => {
            let net = prednet.ok_or_else(|| Error::Config("prednet prior needs a PredNet model".into()))?;
            stack.require_full()?;
            let past: Vec<&DepthMap> = stack.maps().collect();
            Ok(Prior {
                maps: vec![net.predict(&past, max_range)?],
            })
        }
        PriorMode::Implicit => {
            stack.require_full()?;
            Ok(Prior {
                maps: stack.maps().cloned().collect(),
            })
        }
    }
}

/// Reconstructions keyed by `(sequence_id, t)`; each key is written once.
///
/// Values are snapped to the 1/256 m grid of the on-disk encoding when
/// inserted, so a saved store reloads bit-identically.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconstructionStore {
    entries: BTreeMap<(String, usize), DepthMap>,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    schema_version: u32,
    entries: Vec<StoreEntry>,
}

#[derive(Serialize, Deserialize)]
struct StoreEntry {
    sequence_id: String,
    t: usize,
    path: String,
}

const STORE_SCHEMA_VERSION: u32 = 1;
pub const STORE_MANIFEST: &str = "store.json";

fn snap(map: &DepthMap) -> Result<DepthMap> {
    let lo = 1.0 / 256.0;
    let values = map
        .values()
        .iter()
        .zip(map.valid())
        .map(|(&v, &ok)| {
            if ok {
                ((v as f64).clamp(lo, KITTI_MAX_DEPTH) * 256.0).round() as f32 / 256.0
            } else {
                0.0
            }
        })
        .collect();
    DepthMap::from_parts(map.height(), map.width(), values, map.valid().to_vec())
}

impl ReconstructionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, sequence_id: &str, t: usize, map: &DepthMap) -> Result<()> {
        let key = (sequence_id.to_string(), t);
        if self.entries.contains_key(&key) {
            return Err(Error::Invariant(format!(
                "reconstruction ({sequence_id}, {t}) already stored"
            )));
        }
        self.entries.insert(key, snap(map)?);
        Ok(())
    }

    pub fn get(&self, sequence_id: &str, t: usize) -> Option<&DepthMap> {
        self.entries.get(&(sequence_id.to_string(), t))
    }

    pub fn keys(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries.keys().map(|(s, t)| (s.as_str(), *t))
    }

    pub fn sequence_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.entries.keys().map(|(s, _)| s.as_str()).collect();
        ids.dedup();
        ids
    }

    /// Reconstructions `t-1, ..., t-b` (newest first) if all are stored.
    pub fn history(&self, sequence_id: &str, t: usize, b: usize) -> Option<Vec<&DepthMap>> {
        if t < b {
            return None;
        }
        (1..=b).map(|d| self.get(sequence_id, t - d)).collect()
    }

    /// Writes one KITTI PNG per entry under `dir/<sequence_id>/` plus
    /// `dir/store.json` listing keys and paths.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut manifest = StoreManifest {
            schema_version: STORE_SCHEMA_VERSION,
            entries: Vec::with_capacity(self.entries.len()),
        };
        for ((seq, t), map) in &self.entries {
            let sub = dir.join(seq);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let rel = format!("{seq}/recon_{t:04}.png");
            write_depth_png(dir.join(&rel), map)?;
            manifest.entries.push(StoreEntry {
                sequence_id: seq.clone(),
                t: *t,
                path: rel,
            });
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(STORE_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("store manifest serializes");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(STORE_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: StoreManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if manifest.schema_version != STORE_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "{}: unknown store schema_version {}",
                path.display(),
                manifest.schema_version
            )));
        }
        let mut store = Self::new();
        for e in manifest.entries {
            let map = read_depth_png(dir.join(&e.path))?;
            store.insert(&e.sequence_id, e.t, &map)?;
        }
        Ok(store)
    }
}

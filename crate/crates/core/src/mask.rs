//! The differentiable sampling head: two-channel logits, SoftArgmax, the
//! budget loss, and the hardening rules that turn a soft mask into an exact
//! k-point sampling pattern.

use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, SamplingBudget};
use crate::error::{Error, Result};

/// Pre-softmax sampling scores, channel 0 = "skip", channel 1 = "sample".
///
/// Stored channel-major (`[2][H][W]`), matching the network output layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    logits: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, logits: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || logits.len() != 2 * height * width {
            return Err(Error::Dimension(format!(
                "probability map {height}x{width}x2 needs {} logits, got {}",
                2 * height * width,
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("logit {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            logits,
        })
    }

    /// Builds a map from separate per-channel planes.
    pub fn from_channels(height: usize, width: usize, skip: &[f32], sample: &[f32]) -> Result<Self> {
        let mut logits = Vec::with_capacity(skip.len() + sample.len());
        logits.extend_from_slice(skip);
        logits.extend_from_slice(sample);
        Self::new(height, width, logits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn skip_channel(&self) -> &[f32] {
        &self.logits[..self.height * self.width]
    }

    pub fn sample_channel(&self) -> &[f32] {
        &self.logits[self.height * self.width..]
    }
}

/// SoftArgmax sharpness β.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!(
                "temperature beta must be positive, got {beta}"
            )));
        }
        Ok(Self(beta))
    }

    pub fn beta(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(1.0)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(beta: f64) -> Result<Self> {
        Self::new(beta)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// Per-pixel sampling weights in `[0, 1]`, soft or hardened to `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
    hardened: bool,
    budget: usize,
}

impl SampleMask {
    /// Soft mask; every value must lie in `[0, 1]`.
    pub fn soft(height: usize, width: usize, values: Vec<f32>, budget: usize) -> Result<Self> {
        Self::build(height, width, values, budget, false)
    }

    /// Binary mask; every value must be exactly 0 or 1.
    pub fn hardened(height: usize, width: usize, values: Vec<f32>, budget: usize) -> Result<Self> {
        Self::build(height, width, values, budget, true)
    }

    fn build(
        height: usize,
        width: usize,
        values: Vec<f32>,
        budget: usize,
        hardened: bool,
    ) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("mask value {v} outside [0,1]")));
        }
        if hardened {
            if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::Range(format!("hardened mask holds {v}")));
            }
        }
        Ok(Self {
            height,
            width,
            values,
            hardened,
            budget,
        })
    }

    /// Hardened mask with ones at `indices`.
    pub fn from_indices(
        height: usize,
        width: usize,
        indices: impl IntoIterator<Item = usize>,
        budget: usize,
    ) -> Result<Self> {
        let mut values = vec![0.0; height * width];
        for i in indices {
            let slot = values.get_mut(i).ok_or_else(|| {
                Error::Dimension(format!("index {i} outside {height}x{width} mask"))
            })?;
            *slot = 1.0;
        }
        Self::hardened(height, width, values, budget)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_hardened(&self) -> bool {
        self.hardened
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Number of pixels with value exactly 1.
    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    /// Linear indices of the selected pixels of a hardened mask.
    pub fn selected(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Expected channel index under a tempered softmax over the two channels.
///
/// For two channels this is `logistic(beta * (sample - skip))`.
pub fn soft_argmax(p: &ProbabilityMap, temp: Temperature) -> Result<SampleMask> {
    let beta = temp.beta();
    let values = p
        .skip_channel()
        .iter()
        .zip(p.sample_channel())
        .map(|(&l0, &l1)| {
            if !(l0.is_finite() && l1.is_finite()) {
                return Err(Error::Numeric("non-finite logit".into()));
            }
            Ok(logistic(beta * (l1 as f64 - l0 as f64)) as f32)
        })
        .collect::<Result<Vec<_>>>()?;
    SampleMask::soft(p.height, p.width, values, 0)
}

/// Differentiable sample count: the sum of all mask values.
pub fn mask_cardinality(m: &SampleMask) -> f64 {
    m.values.iter().map(|&v| v as f64).sum()
}

/// Relative deviation of the mask cardinality from the budget.
pub fn sample_loss(m: &SampleMask, budget: SamplingBudget) -> f64 {
    let k = budget.k() as f64;
    (mask_cardinality(m) - k).abs() / k
}

/// Gradient of [`sample_loss`] with respect to each mask value.
///
/// Every pixel receives `sign(|M| - k) / k`; the subgradient at `|M| = k`
/// is taken as 0.
pub fn sample_loss_grad(m: &SampleMask, budget: SamplingBudget) -> Vec<f64> {
    let k = budget.k() as f64;
    let diff = mask_cardinality(m) - k;
    let g = if diff > 0.0 {
        1.0 / k
    } else if diff < 0.0 {
        -1.0 / k
    } else {
        0.0
    };
    vec![g; m.values.len()]
}

/// Pixel indices ordered by descending value, smaller index first on ties.
pub fn ranking(values: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Keeps the `k` largest soft values as ones.
pub fn harden_topk(m: &SampleMask, k: usize) -> SampleMask {
    let take = k.min(m.values.len());
    let mut values = vec![0.0; m.values.len()];
    for i in ranking(&m.values).into_iter().take(take) {
        values[i] = 1.0;
    }
    SampleMask {
        height: m.height,
        width: m.width,
        values,
        hardened: true,
        budget: k,
    }
}

/// Top-k selection restricted to pixels that carry a measurement.
///
/// Walks pixels in descending soft-value order and skips invalid ones until
/// `k` valid pixels are chosen or none remain.
pub fn sparse_budget_select(sparse_gt: &DepthMap, m: &SampleMask, k: usize) -> Result<SampleMask> {
    sparse_gt.ensure_same_shape(m.shape(), "sparse_budget_select")?;
    let valid = sparse_gt.valid();
    let mut values = vec![0.0; m.values.len()];
    let mut chosen = 0;
    for i in ranking(&m.values) {
        if chosen == k {
            break;
        }
        if valid[i] {
            values[i] = 1.0;
            chosen += 1;
        }
    }
    Ok(SampleMask {
        height: m.height,
        width: m.width,
        values,
        hardened: true,
        budget: k,
    })
}

/// Hardens with [`harden_topk`] on dense signals and [`sparse_budget_select`]
/// when the signal has holes.
pub fn harden_for_signal(signal: &DepthMap, m: &SampleMask, k: usize) -> Result<SampleMask> {
    if signal.is_fully_valid() {
        signal.ensure_same_shape(m.shape(), "harden")?;
        Ok(harden_topk(m, k))
    } else {
        sparse_budget_select(signal, m, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_logits(h: usize, w: usize, l0: f32, l1: f32) -> ProbabilityMap {
        ProbabilityMap::from_channels(h, w, &vec![l0; h * w], &vec![l1; h * w]).unwrap()
    }

    #[test]
    fn soft_argmax_symmetry() {
        let m = soft_argmax(&uniform_logits(3, 4, 1.25, 1.25), Temperature::default()).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.5));
        assert!(!m.is_hardened());
    }

    #[test]
    fn soft_argmax_two_term_value() {
        let m = soft_argmax(&uniform_logits(1, 1, 0.0, 2.0), Temperature::new(1.0).unwrap()).unwrap();
        let e2 = 2.0f64.exp();
        assert!((m.values()[0] as f64 - e2 / (1.0 + e2)).abs() < 1e-7);
        assert!((m.values()[0] as f64 - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn soft_argmax_saturates() {
        let m = soft_argmax(&uniform_logits(1, 1, 0.0, 2.0), Temperature::new(100.0).unwrap()).unwrap();
        assert!((m.values()[0] as f64 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let err = ProbabilityMap::new(1, 1, vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
    }

    #[test]
    fn cardinality_examples() {
        let zeros = SampleMask::soft(2, 2, vec![0.0; 4], 1).unwrap();
        assert_eq!(mask_cardinality(&zeros), 0.0);
        let hard = SampleMask::from_indices(3, 3, [0, 4, 8], 3).unwrap();
        assert_eq!(mask_cardinality(&hard), 3.0);
        let soft = SampleMask::soft(2, 2, vec![0.5, 0.5, 0.25, 0.75], 2).unwrap();
        assert_eq!(mask_cardinality(&soft), 2.0);
    }

    #[test]
    fn sample_loss_examples() {
        let k = SamplingBudget::new(4).unwrap();
        let exact = SampleMask::soft(2, 4, vec![0.5; 8], 4).unwrap();
        assert_eq!(sample_loss(&exact, k), 0.0);
        let double = SampleMask::soft(2, 4, vec![1.0; 8], 4).unwrap();
        assert_eq!(sample_loss(&double, k), 1.0);
        let empty = SampleMask::soft(2, 4, vec![0.0; 8], 4).unwrap();
        assert_eq!(sample_loss(&empty, k), 1.0);
        assert!(sample_loss_grad(&exact, k).iter().all(|&g| g == 0.0));
        assert!(sample_loss_grad(&double, k).iter().all(|&g| g == 0.25));
        assert!(sample_loss_grad(&empty, k).iter().all(|&g| g == -0.25));
    }

    #[test]
    fn harden_examples() {
        let m = SampleMask::soft(2, 2, vec![0.9, 0.1, 0.4, 0.6], 2).unwrap();
        let h = harden_topk(&m, 2);
        assert_eq!(h.values(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(h.is_hardened());
        assert_eq!(harden_topk(&m, 0).count_ones(), 0);
        assert_eq!(harden_topk(&m, 10).count_ones(), 4);
        let binary = SampleMask::from_indices(2, 3, [1, 5], 2).unwrap();
        assert_eq!(harden_topk(&binary, 2).values(), binary.values());
    }

    #[test]
    fn harden_breaks_ties_row_major() {
        let m = SampleMask::soft(2, 2, vec![0.5; 4], 2).unwrap();
        assert_eq!(harden_topk(&m, 3).selected(), vec![0, 1, 2]);
    }

    #[test]
    fn sparse_select_examples() {
        let gt = DepthMap::sparse(1, 4, vec![0.0, 3.0, 0.0, 7.0]).unwrap();
        let m = SampleMask::soft(1, 4, vec![0.9, 0.8, 0.7, 0.6], 2).unwrap();
        assert_eq!(sparse_budget_select(&gt, &m, 2).unwrap().selected(), vec![1, 3]);

        let empty = DepthMap::empty(1, 4).unwrap();
        assert_eq!(sparse_budget_select(&empty, &m, 2).unwrap().count_ones(), 0);

        let dense = DepthMap::dense(1, 4, vec![1.0; 4]).unwrap();
        assert_eq!(
            sparse_budget_select(&dense, &m, 3).unwrap(),
            harden_topk(&m, 3)
        );
    }

    #[test]
    fn mask_value_range_enforced() {
        assert!(SampleMask::soft(1, 2, vec![0.5, 1.5], 1).is_err());
        assert!(SampleMask::hardened(1, 2, vec![0.5, 1.0], 1).is_err());
    }
}

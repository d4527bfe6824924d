//! Scene-independent sampling patterns: uniform random, evenly spaced
//! scanlines, and a single learned mask shared by every frame.

use rand_distr::{Distribution, StandardNormal};

use crate::depth::{DepthMap, SamplingBudget};
use crate::error::Result;
use crate::mask::{soft_argmax, ProbabilityMap, SampleMask, Temperature};
use crate::rng;

/// Exactly `k` pixels chosen uniformly without replacement.
pub fn random_mask(height: usize, width: usize, budget: SamplingBudget, seed: u64) -> Result<SampleMask> {
    let n = height * width;
    budget.check_fits(n)?;
    let mut rng = rng::seeded(seed);
    let picks = rand::seq::index::sample(&mut rng, n, budget.k());
    SampleMask::from_indices(height, width, picks.into_iter(), budget.k())
}

/// Uniform random choice among the valid pixels of `signal`.
///
/// On a fully valid signal this is [`random_mask`]; otherwise it picks
/// `min(k, #valid)` measured pixels.
pub fn random_valid_mask(signal: &DepthMap, budget: SamplingBudget, seed: u64) -> Result<SampleMask> {
    let (h, w) = signal.shape();
    if signal.is_fully_valid() {
        return random_mask(h, w, budget, seed);
    }
    let valid: Vec<usize> = signal
        .valid()
        .iter()
        .enumerate()
        .filter(|(_, &ok)| ok)
        .map(|(i, _)| i)
        .collect();
    let take = budget.k().min(valid.len());
    let mut rng = rng::seeded(seed);
    let picks = rand::seq::index::sample(&mut rng, valid.len(), take);
    SampleMask::from_indices(h, w, picks.into_iter().map(|j| valid[j]), budget.k())
}

/// Evenly spaced full rows plus a partial row, `k` pixels in total.
///
/// `floor(k / width)` full rows are used, and the remaining pixels fill the
/// leading columns of one more row. The occupied rows sit at
/// `floor(i * height / rows)`.
pub fn scanline_mask(height: usize, width: usize, budget: SamplingBudget) -> Result<SampleMask> {
    budget.check_fits(height * width)?;
    let k = budget.k();
    let full = k / width;
    let partial = k - full * width;
    let rows = full + usize::from(partial > 0);
    let mut values = vec![0.0; height * width];
    for i in 0..rows {
        let r = i * height / rows;
        let cols = if i < full { width } else { partial };
        values[r * width..r * width + cols].fill(1.0);
    }
    SampleMask::hardened(height, width, values, k)
}

/// Free two-channel logit grid of the learned fixed mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedMaskParams {
    pub logits: ProbabilityMap,
    pub seed: u64,
}

impl FixedMaskParams {
    /// Kaiming-normal draws with fan 2 (the channel dimension) and gain 1,
    /// i.e. standard deviation `1/sqrt(2)`.
    pub fn kaiming(height: usize, width: usize, seed: u64) -> Result<Self> {
        let std = 1.0 / 2f64.sqrt();
        let mut rng = rng::seeded(seed);
        let logits = (0..2 * height * width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * std) as f32
            })
            .collect();
        Ok(Self {
            logits: ProbabilityMap::new(height, width, logits)?,
            seed,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.logits.shape()
    }
}

/// SoftArgmax of the free logits. The frame is not an input: every frame
/// gets the same mask.
pub fn fixed_mask_forward(params: &FixedMaskParams, temp: Temperature) -> Result<SampleMask> {
    soft_argmax(&params.logits, temp)
}

/// Fraction of selected pixels lying in the upper half of the mask.
pub fn upper_half_fraction(mask: &SampleMask) -> Option<f64> {
    let total = mask.count_ones();
    if total == 0 {
        return None;
    }
    let half = mask.height() / 2 * mask.width();
    let upper = mask.values()[..half].iter().filter(|&&v| v == 1.0).count();
    Some(upper as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn k(n: usize) -> SamplingBudget {
        SamplingBudget::new(n).unwrap()
    }

    #[test]
    fn random_mask_exact_budget() {
        let m = random_mask(4, 4, k(5), 11).unwrap();
        assert_eq!(m.count_ones(), 5);
        assert!(m.is_hardened());
        assert_eq!(random_mask(4, 4, k(16), 3).unwrap().count_ones(), 16);
    }

    #[test]
    fn random_mask_deterministic() {
        assert_eq!(random_mask(8, 8, k(9), 42).unwrap(), random_mask(8, 8, k(9), 42).unwrap());
        assert_ne!(random_mask(8, 8, k(9), 42).unwrap(), random_mask(8, 8, k(9), 43).unwrap());
    }

    #[test]
    fn budget_overflow_rejected() {
        assert!(matches!(random_mask(2, 2, k(5), 0), Err(Error::Budget(_))));
        assert!(matches!(scanline_mask(2, 2, k(5)), Err(Error::Budget(_))));
    }

    #[test]
    fn scanline_layouts() {
        let m = scanline_mask(4, 4, k(8)).unwrap();
        let rows: Vec<usize> = m.selected().iter().map(|i| i / 4).collect();
        assert_eq!(rows, vec![0, 0, 0, 0, 2, 2, 2, 2]);
        assert_eq!(scanline_mask(4, 4, k(16)).unwrap().count_ones(), 16);
        let one = scanline_mask(4, 4, k(4)).unwrap();
        assert_eq!(one.selected(), vec![0, 1, 2, 3]);
        let partial = scanline_mask(4, 4, k(7)).unwrap();
        assert_eq!(partial.selected(), vec![0, 1, 2, 3, 8, 9, 10]);
    }

    #[test]
    fn random_valid_mask_stays_on_valid_pixels() {
        let gt = DepthMap::sparse(2, 4, vec![0.0, 1.0, 0.0, 2.0, 3.0, 0.0, 0.0, 4.0]).unwrap();
        let m = random_valid_mask(&gt, k(3), 5).unwrap();
        assert_eq!(m.count_ones(), 3);
        assert!(m.selected().iter().all(|&i| gt.valid()[i]));
        assert_eq!(random_valid_mask(&gt, k(6), 5).unwrap().count_ones(), 4);
    }

    #[test]
    fn fixed_mask_is_input_free_and_symmetric() {
        let p = FixedMaskParams::kaiming(4, 8, 9).unwrap();
        let t = Temperature::default();
        assert_eq!(fixed_mask_forward(&p, t).unwrap(), fixed_mask_forward(&p, t).unwrap());
        let flat = FixedMaskParams {
            logits: ProbabilityMap::new(2, 2, vec![0.3; 8]).unwrap(),
            seed: 0,
        };
        assert!(fixed_mask_forward(&flat, t).unwrap().values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn kaiming_spread() {
        let p = FixedMaskParams::kaiming(64, 64, 1).unwrap();
        let n = p.logits.logits().len() as f64;
        let mean = p.logits.logits().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = p.logits.logits().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.03);
        assert!((var - 0.5).abs() < 0.03);
    }
}

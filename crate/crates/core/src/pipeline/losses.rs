//! Training objectives.
//!
//! The map-based functions are unit-agnostic: callers pass depth maps in
//! whatever units the loss should be measured in (the trainers use maps
//! normalized by `max_range`). The `*_var` functions build the same
//! objectives inside a graph.

use crate::depth::{DepthMap, SamplingBudget};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::Scalar;
use crate::pipeline::config::LossWeights;

fn gt_residuals<'a>(pred: &'a DepthMap, gt: &'a DepthMap) -> Result<impl Iterator<Item = f64> + 'a> {
    pred.ensure_same_shape(gt.shape(), "loss")?;
    if gt.valid_count() == 0 {
        return Err(Error::UndefinedMetric("ground truth has no valid pixels".into()));
    }
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .zip(gt.valid())
        .filter(|(_, &ok)| ok)
        .map(|((&p, &g), _)| p as f64 - g as f64))
}

/// Mean squared error over pixels valid in `gt`.
pub fn task_loss(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let n = gt.valid_count() as f64;
    Ok(gt_residuals(pred, gt)?.map(|r| r * r).sum::<f64>() / n)
}

/// `task + alpha * sample`.
pub fn total_loss(task: f64, sample: f64, weights: LossWeights) -> f64 {
    task + weights.alpha * sample
}

/// Mean absolute difference over the union of both maps' valid pixels;
/// 0 when the union is empty.
pub fn sampled_maps_loss(new_sparse: &DepthMap, reference: &DepthMap) -> Result<f64> {
    new_sparse.ensure_same_shape(reference.shape(), "sampled maps loss")?;
    let (sum, n) = new_sparse
        .values()
        .iter()
        .zip(new_sparse.valid())
        .zip(reference.values().iter().zip(reference.valid()))
        .filter(|((_, &a), (_, &b))| a || b)
        .fold((0.0, 0usize), |(s, n), ((&x, &a), (&y, &b))| {
            let x = if a { x as f64 } else { 0.0 };
            let y = if b { y as f64 } else { 0.0 };
            (s + (x - y).abs(), n + 1)
        });
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean absolute error over pixels valid in `gt`.
pub fn prednet_loss(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let n = gt.valid_count() as f64;
    Ok(gt_residuals(pred, gt)?.map(f64::abs).sum::<f64>() / n)
}

/// Batch mean of `| sum(M_i) - k | / k` for a `[N, 1, H, W]` soft mask.
pub fn sample_loss_var<T: Scalar>(g: &mut Graph<T>, mask: Var, budget: SamplingBudget) -> Var {
    let k = budget.k() as f64;
    let counts = g.sum_per_sample(mask);
    let diff = g.offset(counts, T::of(-k));
    let dev = g.abs(diff);
    let per = g.scale(dev, T::of(1.0 / k));
    g.mean(per)
}

/// `sum(union * |a - b|) / sum(union)` with a constant 0/1 `union`; 0 when
/// the union is empty.
pub fn sampled_maps_loss_var<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, union: Var) -> Result<Var> {
    let count: f64 = g.value(union).data().iter().map(|v| v.as_f64()).sum();
    let d = g.sub(a, b)?;
    let ad = g.abs(d);
    let w = g.mul(ad, union)?;
    let s = g.sum(w);
    Ok(g.scale(s, T::of(if count > 0.0 { 1.0 / count } else { 0.0 })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn row(v: &[f32]) -> DepthMap {
        DepthMap::dense(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn task_loss_examples() {
        let gt = row(&[0.1, 0.4]);
        assert_eq!(task_loss(&gt, &gt).unwrap(), 0.0);
        let l = task_loss(&row(&[0.1, 0.2]), &gt).unwrap();
        assert!((l - 0.02).abs() < 1e-6, "{l}");
        let off = task_loss(&row(&[0.6, 0.9]), &gt).unwrap();
        assert!((off - 0.25).abs() < 1e-6);
        let empty = DepthMap::empty(1, 2).unwrap();
        assert!(matches!(task_loss(&gt, &empty), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.3, 9.0, LossWeights { alpha: 0.0 }), 0.3);
        assert_eq!(total_loss(0.0, 1.0, LossWeights { alpha: 50.0 }), 50.0);
        assert!((total_loss(0.02, 0.5, LossWeights { alpha: 4.0 }) - 2.02).abs() < 1e-12);
    }

    #[test]
    fn sampled_maps_examples() {
        let a = DepthMap::sparse(1, 3, vec![3.0, 0.0, 0.0]).unwrap();
        let b = DepthMap::sparse(1, 3, vec![0.0, 5.0, 0.0]).unwrap();
        assert_eq!(sampled_maps_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(sampled_maps_loss(&a, &b).unwrap(), 4.0);
        let e = DepthMap::empty(1, 3).unwrap();
        assert_eq!(sampled_maps_loss(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn prednet_loss_examples() {
        let gt = row(&[0.1, 0.4]);
        let l = prednet_loss(&row(&[0.2, 0.6]), &gt).unwrap();
        assert!((l - 0.15).abs() < 1e-6, "{l}");
        let off = prednet_loss(&row(&[0.05, 0.35]), &gt).unwrap();
        assert!((off - 0.05).abs() < 1e-7);
    }

    #[test]
    fn graph_sample_loss_matches_plain() {
        let mut g = Graph::<f64>::new();
        let m = g.leaf(Tensor::from_vec([2, 1, 1, 4], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap(), true);
        let k = SamplingBudget::new(2).unwrap();
        let l = sample_loss_var(&mut g, m, k);
        // first sample on budget (0), second twice over (1)
        assert!((g.value(l).item() - 0.5).abs() < 1e-12);
    }
}

//! Depth grids, RGB frames, sequences, and the metrics computed over them.
//!
//! Invalid pixels are stored as value `0` with a cleared validity flag, the
//! same convention KITTI uses for "no measurement".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SampleMask;

/// Default normalization range in meters.
pub const DEFAULT_MAX_RANGE: f64 = 100.0;

/// H×W depth grid in meters with per-pixel validity.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// All-invalid map.
    pub fn empty(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Self {
            height,
            width,
            values: vec![0.0; height * width],
            valid: vec![false; height * width],
        })
    }

    /// Builds a map from explicit values and validity flags.
    pub fn from_parts(
        height: usize,
        width: usize,
        values: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        check_dims(height, width)?;
        let n = height * width;
        if values.len() != n || valid.len() != n {
            return Err(Error::Dimension(format!(
                "expected {n} values and flags for {height}x{width}, got {} and {}",
                values.len(),
                valid.len()
            )));
        }
        for (i, (&v, &ok)) in values.iter().zip(&valid).enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Range(format!("pixel {i} has depth {v}")));
            }
            if !ok && v != 0.0 {
                return Err(Error::Range(format!(
                    "pixel {i} is invalid but carries depth {v}"
                )));
            }
        }
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    /// Fully valid map.
    pub fn dense(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::from_parts(height, width, values, valid)
    }

    /// Map where a pixel is valid iff its value is positive.
    pub fn sparse(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let valid = values.iter().map(|&v| v > 0.0).collect();
        Self::from_parts(height, width, values, valid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.len() as f64
    }

    pub fn is_fully_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    /// Rectangular window starting at `(row0, col0)`.
    pub fn window(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<Self> {
        if row0 + height > self.height || col0 + width > self.width {
            return Err(Error::Dimension(format!(
                "window {height}x{width} at ({row0},{col0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width);
        let mut valid = Vec::with_capacity(height * width);
        for r in row0..row0 + height {
            let start = r * self.width + col0;
            values.extend_from_slice(&self.values[start..start + width]);
            valid.extend_from_slice(&self.valid[start..start + width]);
        }
        Self::from_parts(height, width, values, valid)
    }

    pub(crate) fn ensure_same_shape(&self, other: (usize, usize), what: &str) -> Result<()> {
        if self.shape() != other {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.0, other.1
            )));
        }
        Ok(())
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "depth map must be at least 1x1, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Planar RGB image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    /// Channel-major: all red, then green, then blue.
    data: Vec<f32>,
}

impl RgbImage {
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != 3 * height * width {
            return Err(Error::Dimension(format!(
                "expected {} intensities, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("intensity {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::from_planar(height, width, vec![value; 3 * height * width])
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

    pub fn planar(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = row * self.width + col;
        let n = self.height * self.width;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    /// Luma (mean of the three channels).
    pub fn grayscale(&self) -> Vec<f32> {
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| (r + g + b) / 3.0)
            .collect()
    }

    pub fn window(&self, row0: usize, col0: usize, height: usize, width: usize) -> Result<Self> {
        if row0 + height > self.height || col0 + width > self.width {
            return Err(Error::Dimension(format!(
                "window {height}x{width} at ({row0},{col0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            let plane = self.channel(c);
            for r in row0..row0 + height {
                let start = r * self.width + col0;
                data.extend_from_slice(&plane[start..start + width]);
            }
        }
        Self::from_planar(height, width, data)
    }
}

/// One time step: the RGB image and the depth signal that may be sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFrame {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub timestamp: usize,
}

impl SequenceFrame {
    pub fn new(image: RgbImage, depth: DepthMap, timestamp: usize) -> Result<Self> {
        if image.shape() != depth.shape() {
            return Err(Error::Dimension(format!(
                "image {:?} and depth {:?} differ",
                image.shape(),
                depth.shape()
            )));
        }
        Ok(Self {
            image,
            depth,
            timestamp,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.depth.shape()
    }
}

/// Ordered frames of one driving sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSequence {
    id: String,
    frames: Vec<SequenceFrame>,
}

impl DepthSequence {
    pub fn new(id: impl Into<String>, frames: Vec<SequenceFrame>) -> Result<Self> {
        let id = id.into();
        if let Some(first) = frames.first() {
            let shape = first.shape();
            for (i, f) in frames.iter().enumerate() {
                if f.shape() != shape {
                    return Err(Error::Dimension(format!(
                        "sequence {id}: frame {i} is {:?}, expected {shape:?}",
                        f.shape()
                    )));
                }
                if i > 0 && f.timestamp != frames[i - 1].timestamp + 1 {
                    return Err(Error::Data(format!(
                        "sequence {id}: timestamps must increase by 1 (frame {i} has {})",
                        f.timestamp
                    )));
                }
            }
        }
        Ok(Self { id, frames })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn frames(&self) -> &[SequenceFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.frames.first().map(SequenceFrame::shape)
    }
}

/// Number of points the sampler may take per frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct SamplingBudget(usize);

impl SamplingBudget {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("sampling budget k must be at least 1".into()));
        }
        Ok(Self(k))
    }

    /// Budget as a fraction of `pixels`, rounded, at least one point.
    pub fn from_fraction(fraction: f64, pixels: usize) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "sampling fraction {fraction} outside (0, 1]"
            )));
        }
        Self::new(((fraction * pixels as f64).round() as usize).max(1))
    }

    pub fn k(self) -> usize {
        self.0
    }

    /// Checks `k <= pixels` for a signal of that size.
    pub fn check_fits(self, pixels: usize) -> Result<()> {
        if self.0 > pixels {
            return Err(Error::Budget(format!(
                "budget k={} exceeds the {pixels} available pixels",
                self.0
            )));
        }
        Ok(())
    }
}

impl TryFrom<usize> for SamplingBudget {
    type Error = Error;

    fn try_from(k: usize) -> Result<Self> {
        Self::new(k)
    }
}

impl From<SamplingBudget> for usize {
    fn from(b: SamplingBudget) -> usize {
        b.0
    }
}

/// Element-wise product of a depth map with a sampling mask.
///
/// A pixel stays valid only where the depth was valid and the mask is
/// positive.
pub fn apply_mask(depth: &DepthMap, mask: &SampleMask) -> Result<DepthMap> {
    depth.ensure_same_shape(mask.shape(), "apply_mask")?;
    let mut values = Vec::with_capacity(depth.len());
    let mut valid = Vec::with_capacity(depth.len());
    for ((&d, &ok), &m) in depth.values.iter().zip(&depth.valid).zip(mask.values()) {
        let keep = ok && m > 0.0;
        values.push(if keep { d * m } else { 0.0 });
        valid.push(keep);
    }
    DepthMap::from_parts(depth.height, depth.width, values, valid)
}

fn residuals<'a>(
    pred: &'a DepthMap,
    gt: &'a DepthMap,
) -> Result<impl Iterator<Item = f64> + 'a> {
    pred.ensure_same_shape(gt.shape(), "metric")?;
    if gt.valid_count() == 0 {
        return Err(Error::UndefinedMetric(
            "ground truth has no valid pixels".into(),
        ));
    }
    Ok(pred
        .values
        .iter()
        .zip(&gt.values)
        .zip(&gt.valid)
        .filter(|(_, &ok)| ok)
        .map(|((&p, &g), _)| p as f64 - g as f64))
}

/// Root mean square error over pixels valid in `gt`, in meters.
pub fn rmse(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let (sum, n) = residuals(pred, gt)?.fold((0.0, 0usize), |(s, n), r| (s + r * r, n + 1));
    Ok((sum / n as f64).sqrt())
}

/// Mean absolute error over pixels valid in `gt`, in meters.
pub fn mae(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let (sum, n) = residuals(pred, gt)?.fold((0.0, 0usize), |(s, n), r| (s + r.abs(), n + 1));
    Ok(sum / n as f64)
}

/// Index of the histogram bin for `x`; values outside the outer edges land
/// in the first or last bin.
pub fn histogram_bin(x: f64, bin_edges: &[f64]) -> usize {
    let bins = bin_edges.len() - 1;
    // partition_point gives the number of edges <= x
    let above = bin_edges.partition_point(|&e| e <= x);
    above.saturating_sub(1).min(bins - 1)
}

/// Fraction of samples falling in each bin.
pub fn depth_histogram(samples: &[f64], bin_edges: &[f64]) -> Result<Vec<f64>> {
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(
            "bin edges must be strictly increasing with at least two edges".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("no samples to histogram".into()));
    }
    let mut counts = vec![0usize; bin_edges.len() - 1];
    for &s in samples {
        counts[histogram_bin(s, bin_edges)] += 1;
    }
    let n = samples.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

fn check_range(max_range: f64) -> Result<()> {
    if !(max_range > 0.0 && max_range.is_finite()) {
        return Err(Error::Config(format!(
            "max_range must be positive, got {max_range}"
        )));
    }
    Ok(())
}

/// Scales depth into `[0, 1]` by `max_range`; invalid pixels map to 0.
pub fn normalize_depth(depth: &DepthMap, max_range: f64) -> Result<Vec<f64>> {
    check_range(max_range)?;
    Ok(depth
        .values
        .iter()
        .zip(&depth.valid)
        .map(|(&v, &ok)| {
            if ok {
                (v as f64).clamp(0.0, max_range) / max_range
            } else {
                0.0
            }
        })
        .collect())
}

/// Inverse of [`normalize_depth`] for dense network outputs: every pixel is
/// valid and negative values are clamped to 0.
pub fn denormalize_depth(
    grid: &[f64],
    height: usize,
    width: usize,
    max_range: f64,
) -> Result<DepthMap> {
    check_range(max_range)?;
    let values = grid
        .iter()
        .map(|&x| {
            if x.is_finite() {
                (x * max_range).max(0.0) as f32
            } else {
                0.0
            }
        })
        .collect();
    DepthMap::dense(height, width, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f32]) -> DepthMap {
        DepthMap::dense(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn apply_mask_hand_product() {
        let d = DepthMap::dense(2, 2, vec![2.0, 4.0, 6.0, 8.0]).unwrap();
        let m = SampleMask::hardened(2, 2, vec![1.0, 0.0, 0.0, 1.0], 2).unwrap();
        let out = apply_mask(&d, &m).unwrap();
        assert_eq!(out.values(), &[2.0, 0.0, 0.0, 8.0]);
        assert_eq!(out.valid_count(), 2);
    }

    #[test]
    fn apply_mask_identity_and_annihilator() {
        let d = DepthMap::dense(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ones = SampleMask::hardened(2, 3, vec![1.0; 6], 6).unwrap();
        assert_eq!(apply_mask(&d, &ones).unwrap(), d);
        let zeros = SampleMask::hardened(2, 3, vec![0.0; 6], 0).unwrap();
        let out = apply_mask(&d, &zeros).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
        assert_eq!(out.valid_count(), 0);
    }

    #[test]
    fn apply_mask_shape_mismatch() {
        let d = DepthMap::dense(2, 2, vec![1.0; 4]).unwrap();
        let m = SampleMask::hardened(1, 4, vec![1.0; 4], 4).unwrap();
        assert!(matches!(apply_mask(&d, &m), Err(Error::Dimension(_))));
    }

    #[test]
    fn metric_hand_values() {
        let pred = row(&[1.0, 2.0, 3.0]);
        let gt = row(&[1.0, 2.0, 5.0]);
        assert!((rmse(&pred, &gt).unwrap() - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
        // the mean squared residual is 4/3; the mean absolute residual is 2/3
        assert!((mae(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rmse(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn metric_single_valid_pixel() {
        let gt = DepthMap::sparse(1, 3, vec![0.0, 5.0, 0.0]).unwrap();
        let pred = row(&[9.0, 3.0, 1.0]);
        assert_eq!(rmse(&pred, &gt).unwrap(), 2.0);
        assert_eq!(mae(&pred, &gt).unwrap(), 2.0);
    }

    #[test]
    fn metric_requires_valid_gt() {
        let gt = DepthMap::empty(2, 2).unwrap();
        let pred = DepthMap::dense(2, 2, vec![1.0; 4]).unwrap();
        assert!(matches!(rmse(&pred, &gt), Err(Error::UndefinedMetric(_))));
        assert!(matches!(mae(&pred, &gt), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn histogram_hand_binning() {
        assert_eq!(
            depth_histogram(&[5.0, 5.0, 5.0], &[0.0, 10.0, 20.0]).unwrap(),
            vec![1.0, 0.0]
        );
        assert_eq!(
            depth_histogram(&[5.0, 15.0], &[0.0, 10.0, 20.0]).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            depth_histogram(&[1.0, 9.0, 11.0, 95.0], &[0.0, 10.0, 85.0, 100.0]).unwrap(),
            vec![0.5, 0.25, 0.25]
        );
    }

    #[test]
    fn histogram_clamps_and_rejects() {
        let h = depth_histogram(&[-3.0, 250.0], &[0.0, 10.0, 20.0]).unwrap();
        assert_eq!(h, vec![0.5, 0.5]);
        assert!(depth_histogram(&[], &[0.0, 1.0]).is_err());
        assert!(depth_histogram(&[1.0], &[0.0]).is_err());
        assert!(depth_histogram(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn normalization_examples() {
        let d = row(&[0.0, 100.0, 25.0, 150.0]);
        let n = normalize_depth(&d, 100.0).unwrap();
        assert_eq!(n, vec![0.0, 1.0, 0.25, 1.0]);
        assert!(matches!(normalize_depth(&d, 0.0), Err(Error::Config(_))));
        assert!(matches!(normalize_depth(&d, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_pixels_normalize_to_zero() {
        let d = DepthMap::sparse(1, 3, vec![0.0, 40.0, 0.0]).unwrap();
        assert_eq!(normalize_depth(&d, 80.0).unwrap(), vec![0.0, 0.5, 0.0]);
    }

    #[test]
    fn depth_map_invariants_enforced() {
        assert!(DepthMap::from_parts(1, 2, vec![1.0, 2.0], vec![true, false]).is_err());
        assert!(DepthMap::dense(1, 2, vec![1.0, -2.0]).is_err());
        assert!(DepthMap::dense(0, 2, vec![]).is_err());
        assert!(DepthMap::dense(1, 2, vec![1.0, f32::NAN]).is_err());
    }

    #[test]
    fn budget_validation() {
        assert!(matches!(SamplingBudget::new(0), Err(Error::Config(_))));
        let b = SamplingBudget::new(5).unwrap();
        assert!(b.check_fits(5).is_ok());
        assert!(matches!(b.check_fits(4), Err(Error::Budget(_))));
        assert_eq!(SamplingBudget::from_fraction(0.05, 8192).unwrap().k(), 410);
    }

    #[test]
    fn sequence_rejects_gaps() {
        let frame = |t| {
            SequenceFrame::new(
                RgbImage::filled(2, 2, 0.5).unwrap(),
                DepthMap::dense(2, 2, vec![1.0; 4]).unwrap(),
                t,
            )
            .unwrap()
        };
        assert!(DepthSequence::new("a", vec![frame(0), frame(1)]).is_ok());
        assert!(DepthSequence::new("a", vec![frame(0), frame(2)]).is_err());
    }
}

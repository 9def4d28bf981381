//! Input-semantic inconsistency.
//!
//! A crop is reduced to a binary frequency pattern: grayscale, bilinear
//! resize to `S×S`, 2-D FFT, quadrant swap so the DC bin sits at the center,
//! `log(1+|F|)`, then a between-class-variance threshold over a 256-bin
//! histogram. Two patterns are compared with the Jaccard distance.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::imaging::{grayscale, resize_plane};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_PATTERN_SIZE: usize = 64;
pub const HISTOGRAM_BINS: usize = 256;

/// Square grid of reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub size: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return Err(Error::InvalidShape {
                shape: vec![size, size],
                len: values.len(),
            });
        }
        Ok(Grid { size, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryFrequencyPattern {
    size: usize,
    bits: Vec<bool>,
}

impl BinaryFrequencyPattern {
    pub fn new(size: usize, bits: Vec<bool>) -> Result<Self> {
        if size == 0 || bits.len() != size * size {
            return Err(Error::InvalidShape {
                shape: vec![size, size],
                len: bits.len(),
            });
        }
        Ok(BinaryFrequencyPattern { size, bits })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.size + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of true cells farther than `radius` from the grid center.
    pub fn outer_fraction(&self, radius: f64) -> f64 {
        let c = (self.size / 2) as f64;
        let mut outer = 0usize;
        let mut total = 0usize;
        for r in 0..self.size {
            for k in 0..self.size {
                let d = ((r as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt();
                if d > radius {
                    total += 1;
                    if self.get(r, k) {
                        outer += 1;
                    }
                }
            }
        }
        outer as f64 / total.max(1) as f64
    }
}

/// Centered magnitude spectrum `|F|` of a square plane (no log, no resize).
pub fn centered_magnitude(plane: &[f64], size: usize) -> Vec<f64> {
    assert_eq!(plane.len(), size * size);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(size);
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(size) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); size];
    for c in 0..size {
        for r in 0..size {
            col[r] = buf[r * size + c];
        }
        fft.process(&mut col);
        for r in 0..size {
            buf[r * size + c] = col[r];
        }
    }
    let half = size / 2;
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            out[((r + half) % size) * size + (c + half) % size] = buf[r * size + c].norm();
        }
    }
    out
}

/// Grayscale, resize to `size×size`, centered `log(1+|F|)`.
pub fn fft2d_logmag<T: Scalar>(crop: &Tensor<T>, size: usize) -> Result<Grid> {
    if crop.rank() != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0],
            actual: crop.shape().to_vec(),
        });
    }
    let (gray, h, w) = grayscale(crop);
    let plane = resize_plane(&gray, h, w, size, size);
    let values = centered_magnitude(&plane, size)
        .into_iter()
        .map(|m| m.ln_1p())
        .collect();
    Grid::new(size, values)
}

/// Result of the histogram threshold search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    /// First histogram bin of the upper class.
    pub bin: usize,
    /// Lower edge of `bin` in grid units.
    pub value: f64,
}

/// Histogram bin of every value over `[min, max]`.
pub fn histogram_bins(values: &[f64]) -> Result<(Vec<usize>, f64, f64)> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::NonFinite("spectrum grid".into()));
    }
    if max <= min {
        return Err(Error::DegenerateSpectrum);
    }
    let scale = HISTOGRAM_BINS as f64 / (max - min);
    let bins = values
        .iter()
        .map(|&v| (((v - min) * scale) as usize).min(HISTOGRAM_BINS - 1))
        .collect();
    Ok((bins, min, max))
}

/// Between-class-variance maximizing split of a 256-bin histogram. Ties go
/// to the lowest bin. Scores are compared exactly in integer arithmetic.
pub fn otsu_threshold(values: &[f64]) -> Result<Threshold> {
    let (bins, min, max) = histogram_bins(values)?;
    let mut hist = [0u64; HISTOGRAM_BINS];
    for &b in &bins {
        hist[b] += 1;
    }
    let n = bins.len() as u64;
    let total: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();
    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for t in 1..HISTOGRAM_BINS {
        n0 += hist[t - 1];
        s0 += (t as u64 - 1) * hist[t - 1];
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total - s0;
        let (num, den) = between_class_score(n0, s0, n1, s1);
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((t, num, den));
        }
    }
    let (bin, _, _) = best.ok_or(Error::DegenerateSpectrum)?;
    Ok(Threshold {
        bin,
        value: min + bin as f64 * (max - min) / HISTOGRAM_BINS as f64,
    })
}

/// Between-class variance up to the constant factor `1/N²`, as the exact
/// fraction `(s0·n1 − s1·n0)² / (n0·n1)`.
pub(crate) fn between_class_score(n0: u64, s0: u64, n1: u64, s1: u64) -> (u128, u128) {
    let diff = (s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128).unsigned_abs();
    (diff * diff, n0 as u128 * n1 as u128)
}

pub fn binarize_adaptive(grid: &Grid) -> Result<BinaryFrequencyPattern> {
    let t = otsu_threshold(&grid.values)?;
    let (bins, _, _) = histogram_bins(&grid.values)?;
    let bits = bins.into_iter().map(|b| b >= t.bin).collect();
    BinaryFrequencyPattern::new(grid.size, bits)
}

/// Full pipeline from an image crop to its binary frequency pattern.
pub fn frequency_pattern<T: Scalar>(crop: &Tensor<T>, size: usize) -> Result<BinaryFrequencyPattern> {
    binarize_adaptive(&fft2d_logmag(crop, size)?)
}

/// `1 − |P∩Q| / |P∪Q|`.
pub fn semantic_inconsistency(practical: &BinaryFrequencyPattern, expected: &BinaryFrequencyPattern) -> Result<f64> {
    if practical.size != expected.size {
        return Err(Error::ShapeMismatch {
            expected: vec![expected.size, expected.size],
            actual: vec![practical.size, practical.size],
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in practical.bits.iter().zip(&expected.bits) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Err(Error::EmptyUnion);
    }
    Ok((union - inter) as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(size: usize, cells: &[(usize, usize)]) -> BinaryFrequencyPattern {
        let mut bits = vec![false; size * size];
        for &(r, c) in cells {
            bits[r * size + c] = true;
        }
        BinaryFrequencyPattern::new(size, bits).unwrap()
    }

    #[test]
    fn constant_image_has_only_dc() {
        let size = 8;
        let mag = centered_magnitude(&vec![0.5; size * size], size);
        let center = (size / 2) * size + size / 2;
        assert_eq!(mag[center], 0.5 * (size * size) as f64);
        for (i, &m) in mag.iter().enumerate() {
            if i != center {
                assert_eq!(m, 0.0);
            }
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let size = 16;
        let mut plane = vec![0.0; size * size];
        plane[0] = 1.0;
        assert!(centered_magnitude(&plane, size).iter().all(|&m| m == 1.0));
    }

    #[test]
    fn bimodal_grid_splits_at_the_gap() {
        let mut values = vec![0.0; 32];
        values[16..].iter_mut().for_each(|v| *v = 10.0);
        let grid = Grid::new(
            8,
            values.iter().cycle().take(64).copied().collect(),
        )
        .unwrap();
        let t = otsu_threshold(&grid.values).unwrap();
        assert!(t.value > 0.0 && t.value <= 10.0);
        let p = binarize_adaptive(&grid).unwrap();
        for (b, v) in p.bits().iter().zip(&grid.values) {
            assert_eq!(*b, *v == 10.0);
        }
    }

    #[test]
    fn ramp_splits_into_two_nonempty_sets() {
        let grid = Grid::new(16, (0..256).map(|i| i as f64).collect()).unwrap();
        let p = binarize_adaptive(&grid).unwrap();
        assert!(p.count() > 0 && p.count() < 256);
    }

    #[test]
    fn constant_grid_is_degenerate() {
        let grid = Grid::new(4, vec![3.0; 16]).unwrap();
        assert!(matches!(binarize_adaptive(&grid), Err(Error::DegenerateSpectrum)));
    }

    #[test]
    fn jaccard_cases() {
        let p = pattern(2, &[(0, 0), (1, 1)]);
        let q = pattern(2, &[(0, 0), (0, 1), (1, 1)]);
        assert!((semantic_inconsistency(&p, &q).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(semantic_inconsistency(&p, &p).unwrap(), 0.0);
        let r = pattern(2, &[(0, 1)]);
        assert_eq!(semantic_inconsistency(&p, &r).unwrap(), 1.0);
        let empty = pattern(2, &[]);
        assert!(matches!(
            semantic_inconsistency(&empty, &empty),
            Err(Error::EmptyUnion)
        ));
        assert!(semantic_inconsistency(&p, &pattern(3, &[(0, 0)])).is_err());
    }
}

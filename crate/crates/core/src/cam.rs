//! Localization of the primary activation source.
//!
//! The saliency grid is the plain channel sum of the last-conv map stack,
//! upsampled bilinearly to input resolution. The crop is the bounding box of
//! cells at or above `alpha·max`, grown to a minimum side and shifted inside
//! the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{crop, resize_plane};
use crate::network::ActivationTrace;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub coarse: Vec<f64>,
    pub coarse_dims: (usize, usize),
    pub fine: Vec<f64>,
    pub fine_dims: (usize, usize),
    /// Row-major index of the first coarse maximum.
    pub coarse_argmax: (usize, usize),
}

impl SaliencyMap {
    pub fn from_coarse(coarse: Vec<f64>, coarse_dims: (usize, usize), fine_dims: (usize, usize)) -> Self {
        let (h, w) = coarse_dims;
        assert_eq!(coarse.len(), h * w);
        let fine = resize_plane(&coarse, h, w, fine_dims.0, fine_dims.1);
        let mut best = 0;
        for (i, &v) in coarse.iter().enumerate() {
            if v > coarse[best] {
                best = i;
            }
        }
        SaliencyMap {
            coarse,
            coarse_dims,
            fine,
            fine_dims,
            coarse_argmax: (best / w, best % w),
        }
    }

    pub fn fine_max(&self) -> f64 {
        self.fine.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Fine map as an 8-bit plane scaled so the maximum is 255.
    pub fn to_gray8(&self) -> Vec<u8> {
        let max = self.fine_max();
        self.fine
            .iter()
            .map(|&v| {
                if max > 0.0 {
                    (v.max(0.0) / max * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect()
    }
}

/// Channel sum `A_T(x,y) = Σ_k A_k(x,y)` of the last-conv stack, upsampled to
/// the spatial size of the trace input.
pub fn saliency<T: Scalar>(trace: &ActivationTrace<T>) -> SaliencyMap {
    let stack = trace.last_conv();
    let input = trace.input().shape();
    let fine_dims = (input[input.len() - 2], input[input.len() - 1]);
    saliency_of_stack(stack, None, fine_dims)
}

/// Class-weighted variant (classic CAM): `Σ_k w_k A_k(x,y)`.
pub fn weighted_saliency<T: Scalar>(trace: &ActivationTrace<T>, weights: &[f64]) -> Result<SaliencyMap> {
    let stack = trace.last_conv();
    if weights.len() != stack.shape()[0] {
        return Err(Error::ShapeMismatch {
            expected: vec![stack.shape()[0]],
            actual: vec![weights.len()],
        });
    }
    let input = trace.input().shape();
    let fine_dims = (input[input.len() - 2], input[input.len() - 1]);
    Ok(saliency_of_stack(stack, Some(weights), fine_dims))
}

fn saliency_of_stack<T: Scalar>(stack: &Tensor<T>, weights: Option<&[f64]>, fine_dims: (usize, usize)) -> SaliencyMap {
    let (k, h, w) = (stack.shape()[0], stack.shape()[1], stack.shape()[2]);
    let mut coarse = vec![0.0; h * w];
    for (ch, plane) in stack.data().chunks(h * w).enumerate().take(k) {
        let wk = weights.map_or(1.0, |ws| ws[ch]);
        for (acc, v) in coarse.iter_mut().zip(plane) {
            *acc += wk * v.to_f64_lossless();
        }
    }
    SaliencyMap::from_coarse(coarse, (h, w), fine_dims)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Cells with saliency ≥ `alpha·max` form the region.
    pub alpha: f64,
    /// Minimum crop side as a fraction of each input side.
    pub min_frac: f64,
    /// Weight channels by the predicted class's readout (classic CAM).
    #[serde(default)]
    pub weighted_by_class: bool,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            alpha: 0.8,
            min_frac: 0.125,
            weighted_by_class: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropRegion<T> {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub pattern: Tensor<T>,
}

impl<T> CropRegion<T> {
    pub fn rect(&self) -> (usize, usize, usize, usize) {
        (self.top, self.left, self.height, self.width)
    }

    pub fn iou(&self, top: usize, left: usize, height: usize, width: usize) -> f64 {
        rect_iou(self.rect(), (top, left, height, width))
    }
}

pub fn rect_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let y0 = a.0.max(b.0);
    let x0 = a.1.max(b.1);
    let y1 = (a.0 + a.2).min(b.0 + b.2);
    let x1 = (a.1 + a.3).min(b.1 + b.3);
    let inter = y1.saturating_sub(y0) * x1.saturating_sub(x0);
    let union = a.2 * a.3 + b.2 * b.3 - inter;
    inter as f64 / union as f64
}

/// Grows `[lo, hi)` symmetrically to at least `min_len`, then shifts it into
/// `[0, n)`.
fn expand_span(lo: usize, hi: usize, min_len: usize, n: usize) -> (usize, usize) {
    let len = hi - lo;
    let target = min_len.clamp(len, n);
    let extra = target - len;
    let mut start = lo as isize - (extra / 2) as isize;
    let mut end = hi as isize + (extra - extra / 2) as isize;
    if start < 0 {
        end -= start;
        start = 0;
    }
    if end > n as isize {
        start -= end - n as isize;
        end = n as isize;
    }
    (start.max(0) as usize, end as usize)
}

pub fn locate_and_crop<T: Scalar>(x: &Tensor<T>, map: &SaliencyMap, cfg: &CropConfig) -> Result<CropRegion<T>> {
    let (h, w) = map.fine_dims;
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != h || shape[2] != w {
        return Err(Error::ShapeMismatch {
            expected: vec![shape.first().copied().unwrap_or(0), h, w],
            actual: shape.to_vec(),
        });
    }
    let max = map.fine_max();
    if !(max > 0.0) {
        return Err(Error::AllZeroSaliency);
    }
    let cut = cfg.alpha * max;
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
    for r in 0..h {
        for c in 0..w {
            if map.fine[r * w + c] >= cut {
                r0 = r0.min(r);
                r1 = r1.max(r + 1);
                c0 = c0.min(c);
                c1 = c1.max(c + 1);
            }
        }
    }
    let min_side = |n: usize| ((cfg.min_frac * n as f64).ceil() as usize).clamp(1, n);
    let (top, bottom) = expand_span(r0, r1, min_side(h), h);
    let (left, right) = expand_span(c0, c1, min_side(w), w);
    let (height, width) = (bottom - top, right - left);
    Ok(CropRegion {
        top,
        left,
        height,
        width,
        pattern: crop(x, top, left, height, width),
    })
}

//! Planar image helpers shared by ingestion, localization and the spectrum
//! pipeline. Images are `[C,H,W]` tensors; planes are row-major `H×W`
//! slices.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bilinear resampling of one plane with half-pixel centers and clamped
/// borders.
pub fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), h * w);
    if h == oh && w == ow {
        return src.to_vec();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, oh);
    let xs = axis(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Resizes every channel of a `[C,H,W]` tensor.
pub fn resize<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(c * oh * ow);
    for plane in x.data().chunks(h * w) {
        let p: Vec<f64> = plane.iter().map(|v| v.to_f64_lossless()).collect();
        data.extend(resize_plane(&p, h, w, oh, ow).into_iter().map(T::of));
    }
    Tensor::new(vec![c, oh, ow], data).expect("resize shape")
}

/// Channel mean of a `[C,H,W]` tensor as one `H×W` plane.
pub fn grayscale<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, usize, usize) {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; h * w];
    for plane in x.data().chunks(h * w) {
        for (o, v) in out.iter_mut().zip(plane) {
            *o += v.to_f64_lossless();
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    (out, h, w)
}

/// Copies the rectangle `[top, top+height) × [left, left+width)` out of every
/// channel.
pub fn crop<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Tensor<T> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert!(top + height <= h && left + width <= w, "crop out of bounds");
    let mut data = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in top..top + height {
            let start = (ch * h + y) * w + left;
            data.extend_from_slice(&x.data()[start..start + width]);
        }
    }
    Tensor::new(vec![c, height, width], data).expect("crop shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_upscales_to_constant() {
        let out = resize_plane(&[0.7], 1, 1, 4, 4);
        assert!(out.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn same_size_is_identity() {
        let src: Vec<f64> = (0..12).map(|i| i as f64 * 0.3).collect();
        assert_eq!(resize_plane(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn downscale_by_two_averages_pairs() {
        let src = vec![0.0, 2.0, 4.0, 6.0];
        let out = resize_plane(&src, 1, 4, 1, 2);
        assert_eq!(out, vec![1.0, 5.0]);
    }

    #[test]
    fn crop_extracts_rectangle() {
        let x = Tensor::<f32>::from_fn(&[2, 4, 4], |i| i as f32);
        let c = crop(&x, 1, 2, 2, 2);
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0, 22.0, 23.0, 26.0, 27.0]);
    }
}

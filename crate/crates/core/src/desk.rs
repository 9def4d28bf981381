//! Small synthetic tasks and deterministically constructed classifiers for
//! desk-scale experiments and fixtures.
//!
//! Nothing here is trained by gradient descent. Early filters are fixed
//! analytic kernels, last-conv filters are normalized prototype patches
//! sampled from class exemplars, and the dense readout is a closed-form
//! ridge regression on pooled last-conv features.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::MfccConfig;
use crate::bundle::{Modality, ModelBundle, Preprocess, SampleItem, SampleSet};
use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, Network, NetworkSpec};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CLASSES: [&str; 4] = ["stripes", "columns", "diagonal", "spot"];
pub const AUDIO_CLASSES: [&str; 4] = ["up", "down", "hold", "trill"];
/// Half a second at 16 kHz.
pub const AUDIO_SAMPLES: usize = 8000;
pub const AUDIO_FRAMES: usize = 48;

const RIDGE: f64 = 1e-2;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    let v: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u.ln()).sqrt() * (2.0 * PI * v).cos()
}

/// Seed for item `index` of a stream, decorrelated across streams.
fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// One `[3, 32, 32]` image in `[0,1]` of the given class.
pub fn synth_image(class: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = IMAGE_SIDE;
    let nf = n as f64;
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(0.75..1.0)).collect();
    // smooth background shading
    let (bx, by) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let bphase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.04..0.07);
    let period = rng.random_range(6.0..8.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cy, cx) = (rng.random_range(9.0..nf - 9.0), rng.random_range(9.0..nf - 9.0));
    let sigma = rng.random_range(2.5..4.5);
    let mut lum = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (yf, xf) = (y as f64, x as f64);
            let shade = 0.02 * (2.0 * PI * (bx * xf + by * yf) / (2.0 * nf) + bphase).cos();
            let r = ((yf - cy).powi(2) + (xf - cx).powi(2)).sqrt();
            let signal = match class {
                0 => amp * (2.0 * PI * yf / period + phase).cos(),
                1 => amp * (2.0 * PI * xf / period + phase).cos(),
                2 => amp * (2.0 * PI * (xf + yf) / (period * std::f64::consts::SQRT_2) + phase).cos(),
                _ => 3.0 * amp * (-(r * r) / (2.0 * sigma * sigma)).exp(),
            };
            lum[y * n + x] = 0.5 + shade + signal;
        }
    }
    let mut data = Vec::with_capacity(3 * n * n);
    for t in &tint {
        for &l in &lum {
            let v = 0.5 + (l - 0.5) * t + 0.005 * gauss(&mut rng);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::new(vec![3, n, n], data).expect("image shape")
}

/// Normalization of the image desk model (identity: inputs are pixels in
/// `[0,1]`).
pub fn image_preprocess() -> Preprocess {
    Preprocess::image(3)
}

/// Labeled normalized images, `per_class` of each class, interleaved by
/// class.
pub fn image_samples(per_class: usize, seed: u64) -> Vec<SampleItem> {
    let classes = IMAGE_CLASSES.len();
    let pre = image_preprocess();
    (0..per_class * classes)
        .into_par_iter()
        .map(|i| {
            let class = i % classes;
            SampleItem::natural(
                format!("img_{i:05}"),
                Some(IMAGE_CLASSES[class].to_string()),
                pre.normalize_image(synth_image(class, item_seed(seed, i))),
            )
        })
        .collect()
}

fn tone_frequency(class: usize, t: f64, base: f64) -> f64 {
    match class {
        0 => base * (0.8 + 0.8 * t),
        1 => base * (2.4 - 0.8 * t),
        2 => base * 1.2,
        _ => base * (2.8 + 0.3 * (2.0 * PI * 6.0 * t).sin()),
    }
}

/// Relative harmonic amplitudes of each command's voice.
fn timbre(class: usize) -> [f64; 4] {
    match class {
        0 => [1.0, 0.5, 0.25, 0.1],
        1 => [1.0, 0.2, 0.6, 0.1],
        2 => [0.6, 1.0, 0.3, 0.4],
        _ => [1.0, 0.1, 0.1, 0.5],
    }
}

/// One half-second synthetic voice command in `[-1, 1]`.
pub fn synth_command(class: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = 16_000.0;
    let base = rng.random_range(280.0..320.0);
    let onset = rng.random_range(0.02..0.08);
    let length = rng.random_range(0.30..0.40);
    let level = rng.random_range(0.3..0.6);
    let noise = rng.random_range(0.005..0.02);
    let harmonics = timbre(class);
    let mut phase = 0.0;
    (0..AUDIO_SAMPLES)
        .map(|i| {
            let time = i as f64 / rate;
            let u = (time - onset) / length;
            let mut v = noise * gauss(&mut rng);
            if (0.0..1.0).contains(&u) {
                let f = tone_frequency(class, u, base);
                phase += 2.0 * PI * f / rate;
                let envelope = (PI * u).sin().powf(0.5);
                let voiced: f64 = harmonics
                    .iter()
                    .enumerate()
                    .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
                    .sum();
                v += level * envelope * voiced / 2.0;
            }
            v.clamp(-1.0, 1.0)
        })
        .collect()
}

/// MFCC configuration shared by the audio desk model and its data.
pub fn audio_preprocess_base() -> Preprocess {
    let cfg = MfccConfig::default();
    Preprocess {
        modality: Modality::AudioMfcc,
        mean: vec![0.0; cfg.coefficients],
        std: vec![1.0; cfg.coefficients],
        mfcc: Some(cfg),
        target_frames: Some(AUDIO_FRAMES),
        architecture: None,
    }
}

/// Labeled command waveforms, `per_class` of each class.
pub fn audio_waveforms(per_class: usize, seed: u64) -> Vec<(String, usize, Vec<f64>)> {
    let classes = AUDIO_CLASSES.len();
    (0..per_class * classes)
        .into_par_iter()
        .map(|i| {
            let class = i % classes;
            (format!("cmd_{i:05}"), class, synth_command(class, item_seed(seed, i)))
        })
        .collect()
}

/// Feature-space samples for `bundle`.
pub fn audio_samples(bundle: &ModelBundle, per_class: usize, seed: u64) -> Result<Vec<SampleItem>> {
    audio_waveforms(per_class, seed)
        .into_par_iter()
        .map(|(id, class, wave)| {
            let x = bundle.preprocess.audio_features(&wave)?;
            Ok(SampleItem::natural(id, Some(AUDIO_CLASSES[class].to_string()), x))
        })
        .collect()
}

pub fn sample_set(modality: Modality, items: Vec<SampleItem>) -> Result<SampleSet> {
    SampleSet::new(modality, items)
}

fn gabor(size: usize, theta: f64, period: f64, sigma: f64, odd: bool) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            let u = x * theta.cos() + y * theta.sin();
            let env = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            let carrier = if odd { (2.0 * PI * u / period).sin() } else { (2.0 * PI * u / period).cos() };
            env * carrier
        })
        .collect();
    zero_mean_unit_norm(&mut k);
    k
}

fn difference_of_gaussians(size: usize, inner: f64, outer: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let r2 = ((i / size) as f64 - c).powi(2) + ((i % size) as f64 - c).powi(2);
            (-r2 / (2.0 * inner * inner)).exp() / (inner * inner) - (-r2 / (2.0 * outer * outer)).exp() / (outer * outer)
        })
        .collect();
    zero_mean_unit_norm(&mut k);
    k
}

fn zero_mean_unit_norm(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Luminance filter bank for `channels` input channels: oriented even and
/// odd Gabors plus on/off center-surround kernels.
fn image_front_filters(channels: usize, size: usize) -> (Vec<f32>, usize) {
    let mut kernels = Vec::new();
    for o in 0..4 {
        let theta = o as f64 * PI / 4.0;
        kernels.push(gabor(size, theta, 7.0, 1.6, false));
        kernels.push(gabor(size, theta, 7.0, 1.6, true));
    }
    let dog = difference_of_gaussians(size, 1.0, 2.2);
    kernels.push(dog.clone());
    kernels.push(dog.iter().map(|v| -v).collect());
    let out = kernels.len();
    let mut w = Vec::with_capacity(out * channels * size * size);
    for k in &kernels {
        for _ in 0..channels {
            w.extend(k.iter().map(|v| (v / channels as f64) as f32));
        }
    }
    (w, out)
}

/// Random patches of `maps` (`[C,H,W]`) with a `kh×kw` footprint, centered
/// and normalized; patches with negligible energy are skipped.
fn prototype_patches(
    maps: &[Tensor<f32>],
    kh: usize,
    kw: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 100 * count {
        attempts += 1;
        let m = &maps[rng.random_range(0..maps.len())];
        let (c, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let (top, left) = (rng.random_range(0..=h - kh), rng.random_range(0..=w - kw));
        let mut p = Vec::with_capacity(c * kh * kw);
        for ch in 0..c {
            for r in 0..kh {
                for q in 0..kw {
                    p.push(m.data()[(ch * h + top + r) * w + left + q] as f64);
                }
            }
        }
        let energy = p.iter().map(|v| v * v).sum::<f64>();
        if energy < 1e-6 {
            continue;
        }
        zero_mean_unit_norm(&mut p);
        out.push(p);
    }
    out
}

/// Closed-form ridge readout from pooled features to one-hot targets.
/// Returns `[classes, k]` weights and `[classes]` biases.
pub fn ridge_readout(features: &[Vec<f64>], labels: &[usize], classes: usize, lambda: f64) -> Result<(Vec<f32>, Vec<f32>)> {
    let n = features.len();
    if n == 0 || labels.len() != n {
        return Err(Error::Empty("ridge readout needs labeled features".into()));
    }
    let k = features[0].len();
    // standardize so one ridge strength suits every feature scale
    let mean: Vec<f64> = (0..k).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let std: Vec<f64> = (0..k)
        .map(|j| {
            let v = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            v.sqrt().max(1e-6)
        })
        .collect();
    let x = DMatrix::from_fn(n, k, |i, j| (features[i][j] - mean[j]) / std[j]);
    let xt = x.transpose();
    let gram = &xt * &x + DMatrix::identity(k, k) * (lambda * n as f64);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("ridge system is not positive definite".into()))?;
    let mut weights = vec![0f32; classes * k];
    let mut biases = vec![0f32; classes];
    for c in 0..classes {
        let y = DVector::from_fn(n, |i, _| if labels[i] == c { 1.0 } else { 0.0 });
        let y_mean = y.mean();
        let beta = chol.solve(&(&xt * y.add_scalar(-y_mean)));
        let mut b = y_mean;
        for j in 0..k {
            let wj = beta[j] / std[j];
            weights[c * k + j] = wj as f32;
            b -= wj * mean[j];
        }
        biases[c] = b as f32;
    }
    Ok((weights, biases))
}

struct Stage {
    front: Vec<LayerSpec>,
    front_params: Vec<Option<LayerParams<f32>>>,
}

/// Builds `front → conv(last) → relu → global avgpool → flatten → dense`,
/// with prototype last-conv filters and a ridge readout.
#[allow(clippy::too_many_arguments)]
fn assemble(
    input_shape: Vec<usize>,
    stage: Stage,
    labels: &[&str],
    train: &[(Tensor<f32>, usize)],
    filters_per_class: usize,
    kernel: [usize; 2],
    bias_quantile: f64,
    seed: u64,
) -> Result<Network<f32>> {
    let classes = labels.len();
    let class_labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    let front_spec = NetworkSpec {
        input_shape: input_shape.clone(),
        layers: stage.front.clone(),
        class_labels: class_labels.clone(),
    };
    let front_shapes = front_spec.layer_shapes()?;
    let feat_shape = front_shapes.last().cloned().unwrap_or_else(|| input_shape.clone());
    let (fc, fh, fw) = (feat_shape[0], feat_shape[1], feat_shape[2]);
    let front_maps: Vec<(Tensor<f32>, usize)> = train
        .par_iter()
        .map(|(x, c)| Ok((run_prefix(&front_spec, &stage.front_params, x)?, *c)))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut filters = Vec::new();
    for (c, label) in labels.iter().enumerate() {
        let maps: Vec<Tensor<f32>> = front_maps.iter().filter(|(_, l)| *l == c).map(|(m, _)| m.clone()).collect();
        if maps.is_empty() {
            return Err(Error::Empty(format!("no training exemplars for class {label}")));
        }
        filters.extend(prototype_patches(&maps, kernel[0], kernel[1], filters_per_class, &mut rng));
    }
    let k = filters.len();
    let pad = kernel[0] / 2;
    let conv = LayerSpec::Conv2d {
        in_channels: fc,
        out_channels: k,
        kernel,
        stride: 1,
        padding: pad,
        last_conv: true,
    };
    let weight = Tensor::new(
        vec![k, fc, kernel[0], kernel[1]],
        filters.iter().flatten().map(|&v| v as f32).collect(),
    )?;

    // bias: a negative quantile of each filter's responses keeps maps sparse
    let probe = NetworkSpec {
        input_shape: feat_shape.clone(),
        layers: vec![conv.clone()],
        class_labels: class_labels.clone(),
    };
    let probe_params = vec![Some(LayerParams {
        weight: weight.clone(),
        bias: Tensor::zeros(&[k]),
    })];
    let responses: Vec<Tensor<f32>> = front_maps
        .par_iter()
        .step_by(4)
        .map(|(m, _)| run_prefix(&probe, &probe_params, m))
        .collect::<Result<_>>()?;
    let plane = responses[0].shape()[1] * responses[0].shape()[2];
    let bias: Vec<f32> = (0..k)
        .map(|ch| {
            let mut v: Vec<f32> = responses
                .iter()
                .flat_map(|r| r.data()[ch * plane..(ch + 1) * plane].iter().copied())
                .collect();
            v.sort_by(f32::total_cmp);
            let q = v[((v.len() - 1) as f64 * bias_quantile) as usize];
            -q.max(0.0)
        })
        .collect();

    let (oh, ow) = (fh + 2 * pad - kernel[0] + 1, fw + 2 * pad - kernel[1] + 1);
    let mut layers = stage.front;
    let mut params = stage.front_params;
    layers.push(conv);
    params.push(Some(LayerParams {
        weight,
        bias: Tensor::new(vec![k], bias)?,
    }));
    layers.push(LayerSpec::Relu);
    params.push(None);
    layers.push(LayerSpec::Avgpool2d {
        kernel: [oh, ow],
        stride: oh.max(ow),
    });
    params.push(None);
    layers.push(LayerSpec::Flatten);
    params.push(None);
    let pooled_spec = NetworkSpec {
        input_shape: input_shape.clone(),
        layers: layers.clone(),
        class_labels: class_labels.clone(),
    };
    let pooled: Vec<Vec<f64>> = train
        .par_iter()
        .map(|(x, _)| Ok(run_prefix(&pooled_spec, &params, x)?.data().iter().map(|&v| v as f64).collect()))
        .collect::<Result<_>>()?;
    let targets: Vec<usize> = train.iter().map(|(_, c)| *c).collect();
    let (w, b) = ridge_readout(&pooled, &targets, classes, RIDGE)?;
    layers.push(LayerSpec::Dense {
        inputs: k,
        outputs: classes,
    });
    params.push(Some(LayerParams {
        weight: Tensor::new(vec![classes, k], w)?,
        bias: Tensor::new(vec![classes], b)?,
    }));
    Network::new(
        NetworkSpec {
            input_shape,
            layers,
            class_labels,
        },
        params,
    )
}

/// Forward pass through a layer list that need not end in class logits.
fn run_prefix(spec: &NetworkSpec, params: &[Option<LayerParams<f32>>], x: &Tensor<f32>) -> Result<Tensor<f32>> {
    crate::network::run_layers(spec, params, x)
}

/// Image desk model: `[3,32,32]` input, Gabor/center-surround front end,
/// 2×2 max pool, prototype last conv, global average pool, dense readout.
pub fn image_model(seed: u64) -> Result<ModelBundle> {
    let channels = 3;
    let (front_w, front_out) = image_front_filters(channels, 5);
    let stage = Stage {
        front: vec![
            LayerSpec::Conv2d {
                in_channels: channels,
                out_channels: front_out,
                kernel: [5, 5],
                stride: 1,
                padding: 2,
                last_conv: false,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool2d {
                kernel: [2, 2],
                stride: 2,
            },
        ],
        front_params: vec![
            Some(LayerParams {
                weight: Tensor::new(vec![front_out, channels, 5, 5], front_w)?,
                bias: Tensor::filled(&[front_out], -0.005),
            }),
            None,
            None,
        ],
    };
    let train: Vec<(Tensor<f32>, usize)> = image_samples(100, seed ^ 0x1A6E)
        .into_iter()
        .map(|it| {
            let c = IMAGE_CLASSES.iter().position(|l| Some(*l) == it.label.as_deref()).expect("desk label");
            (it.input, c)
        })
        .collect();
    let net = assemble(
        vec![channels, IMAGE_SIDE, IMAGE_SIDE],
        stage,
        &IMAGE_CLASSES,
        &train,
        4,
        [3, 3],
        0.9,
        seed,
    )?;
    let mut pre = image_preprocess();
    pre.architecture = Some(describe(&net));
    ModelBundle::new(net, pre)
}

/// Audio desk model over `[1, 48, 13]` normalized MFCC features.
pub fn audio_model(seed: u64) -> Result<ModelBundle> {
    let mut pre = audio_preprocess_base();
    let waves = audio_waveforms(100, seed ^ 0xA0D1);
    let raw: Vec<(Tensor<f32>, usize)> = waves
        .par_iter()
        .map(|(_, c, w)| Ok((pre.audio_features(w)?, *c)))
        .collect::<Result<_>>()?;
    let k = pre.mean.len();
    let rows = raw.len() * AUDIO_FRAMES;
    for j in 0..k {
        let col = || raw.iter().flat_map(|(x, _)| x.data().iter().skip(j).step_by(k).map(|&v| v as f64));
        let m = col().sum::<f64>() / rows as f64;
        let v = col().map(|x| (x - m).powi(2)).sum::<f64>() / rows as f64;
        pre.mean[j] = m;
        pre.std[j] = v.sqrt().max(1e-6);
    }
    let train: Vec<(Tensor<f32>, usize)> = waves
        .par_iter()
        .map(|(_, c, w)| Ok((pre.audio_features(w)?, *c)))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let front_out = 8;
    let kernel = [5, 3];
    let mut front_w = Vec::with_capacity(front_out * kernel[0] * kernel[1]);
    for _ in 0..front_out {
        let mut f: Vec<f64> = (0..kernel[0] * kernel[1]).map(|_| gauss(&mut rng)).collect();
        zero_mean_unit_norm(&mut f);
        front_w.extend(f.iter().map(|&v| v as f32));
    }
    let stage = Stage {
        front: vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: front_out,
                kernel,
                stride: 1,
                padding: 0,
                last_conv: false,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool2d {
                kernel: [2, 1],
                stride: 2,
            },
        ],
        front_params: vec![
            Some(LayerParams {
                weight: Tensor::new(vec![front_out, 1, kernel[0], kernel[1]], front_w)?,
                bias: Tensor::filled(&[front_out], -0.1),
            }),
            None,
            None,
        ],
    };
    let net = assemble(
        vec![1, AUDIO_FRAMES, k],
        stage,
        &AUDIO_CLASSES,
        &train,
        8,
        [3, 3],
        0.5,
        seed.wrapping_add(1),
    )?;
    pre.architecture = Some(describe(&net));
    ModelBundle::new(net, pre)
}

/// One-line architecture summary, e.g. `conv2d(3→10,5x5) relu …`.
pub fn describe(net: &Network<f32>) -> String {
    net.spec()
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                last_conv,
                ..
            } => format!(
                "conv2d({in_channels}->{out_channels},{}x{}{})",
                kernel[0],
                kernel[1],
                if *last_conv { ",last" } else { "" }
            ),
            LayerSpec::Maxpool2d { kernel, .. } => format!("maxpool({}x{})", kernel[0], kernel[1]),
            LayerSpec::Avgpool2d { kernel, .. } => format!("avgpool({}x{})", kernel[0], kernel[1]),
            LayerSpec::Dense { inputs, outputs } => format!("dense({inputs}->{outputs})"),
            other => other.name().to_string(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

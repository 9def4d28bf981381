//! MFCC front-end for command audio.
//!
//! pre-emphasis → framing → Hamming window → power spectrum → triangular
//! HTK-mel filterbank → floored log → orthonormal DCT-II.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub mel_filters: usize,
    pub coefficients: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16_000,
            frame_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            mel_filters: 40,
            coefficients: 13,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn frame_len(&self) -> usize {
        (self.sample_rate as f64 * self.frame_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len() == 0 || self.hop_len() == 0 {
            return Err(Error::InvalidConfig("frame and hop must be at least one sample".into()));
        }
        if self.fft_size < self.frame_len() {
            return Err(Error::InvalidConfig(format!(
                "fft size {} shorter than frame {}",
                self.fft_size,
                self.frame_len()
            )));
        }
        if self.coefficients == 0 || self.coefficients > self.mel_filters {
            return Err(Error::InvalidConfig(format!(
                "{} coefficients from {} mel filters",
                self.coefficients, self.mel_filters
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig("log floor must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        1 + (samples - self.frame_len()) / self.hop_len()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the mel filters.
pub fn mel_centers(cfg: &MfccConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let step = top / (cfg.mel_filters + 1) as f64;
    (1..=cfg.mel_filters).map(|i| mel_to_hz(i as f64 * step)).collect()
}

/// `mel_filters × (fft_size/2 + 1)` triangular filterbank. Each triangle
/// rises from the previous center to its own and falls to the next, scaled
/// by `2/(upper − lower)` in bin units so every row sums to about one.
pub fn mel_filterbank(cfg: &MfccConfig) -> Vec<Vec<f64>> {
    let bins = cfg.fft_size / 2 + 1;
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let step = top / (cfg.mel_filters + 1) as f64;
    let bin_of = |hz: f64| hz * cfg.fft_size as f64 / cfg.sample_rate as f64;
    let edges: Vec<f64> = (0..cfg.mel_filters + 2)
        .map(|i| bin_of(mel_to_hz(i as f64 * step)))
        .collect();
    (0..cfg.mel_filters)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            (0..bins)
                .map(|b| {
                    let b = b as f64;
                    let w = if b > lo && b <= mid {
                        (b - lo) / (mid - lo)
                    } else if b > mid && b < hi {
                        (hi - b) / (hi - mid)
                    } else {
                        0.0
                    };
                    w * norm
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II matrix, `n × n`, row `k` holds basis `k`.
pub fn dct_matrix(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n)
                .map(|i| s * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

/// Per-frame log mel energies and cepstra.
#[derive(Debug, Clone)]
pub struct MfccFrames {
    pub log_mel: Vec<Vec<f64>>,
    pub cepstra: Vec<Vec<f64>>,
}

pub fn mfcc_frames(waveform: &[f64], cfg: &MfccConfig) -> Result<MfccFrames> {
    cfg.validate()?;
    let frame = cfg.frame_len();
    let hop = cfg.hop_len();
    if waveform.len() < frame {
        return Err(Error::TooShort {
            len: waveform.len(),
            frame,
        });
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("waveform".into()));
    }
    let mut emphasized = Vec::with_capacity(waveform.len());
    emphasized.push(waveform[0]);
    for i in 1..waveform.len() {
        emphasized.push(waveform[i] - cfg.pre_emphasis * waveform[i - 1]);
    }
    let window: Vec<f64> = (0..frame)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (frame - 1) as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg);
    let dct = dct_matrix(cfg.mel_filters);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let bins = cfg.fft_size / 2 + 1;

    let frames = cfg.frame_count(waveform.len());
    let mut log_mel = Vec::with_capacity(frames);
    let mut cepstra = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for f in 0..frames {
        let start = f * hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (n, (b, &w)) in buf.iter_mut().zip(&window).enumerate() {
            *b = Complex::new(emphasized[start + n] * w, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..bins]
            .iter()
            .map(|c| c.norm_sqr() / cfg.fft_size as f64)
            .collect();
        let energies: Vec<f64> = bank
            .iter()
            .map(|row| {
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                e.max(cfg.log_floor).ln()
            })
            .collect();
        let coeffs = dct[..cfg.coefficients]
            .iter()
            .map(|basis| basis.iter().zip(&energies).map(|(b, e)| b * e).sum())
            .collect();
        log_mel.push(energies);
        cepstra.push(coeffs);
    }
    Ok(MfccFrames { log_mel, cepstra })
}

/// `[frames, coefficients]` MFCC tensor.
pub fn mfcc<T: Scalar>(waveform: &[f64], cfg: &MfccConfig) -> Result<Tensor<T>> {
    let frames = mfcc_frames(waveform, cfg)?;
    let n = frames.cepstra.len();
    let data = frames.cepstra.into_iter().flatten().map(T::of).collect();
    Tensor::new(vec![n, cfg.coefficients], data)
}

/// Symmetric center-crop or zero-pad of the frame axis (axis 0) to
/// `target_frames`.
pub fn fixed_length_features<T: Scalar>(features: &Tensor<T>, target_frames: usize) -> Result<Tensor<T>> {
    if target_frames == 0 {
        return Err(Error::InvalidConfig("target_frames must be at least 1".into()));
    }
    let frames = features.shape()[0];
    let row: usize = features.shape()[1..].iter().product();
    let mut shape = features.shape().to_vec();
    shape[0] = target_frames;
    let mut out = Tensor::zeros(&shape);
    if frames >= target_frames {
        let skip = (frames - target_frames) / 2;
        out.data_mut()
            .copy_from_slice(&features.data()[skip * row..(skip + target_frames) * row]);
    } else {
        let pad = (target_frames - frames) / 2;
        out.data_mut()[pad * row..(pad + frames) * row].copy_from_slice(features.data());
    }
    Ok(out)
}

/// Reads 16-bit PCM mono WAV samples scaled to `[-1, 1)`.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            format!("wav {}", path.display()),
            format!(
                "need 16-bit PCM mono, got {} channel(s) at {} bits",
                spec.channels, spec.bits_per_sample
            ),
        ));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::SampleRate {
            found: spec.sample_rate,
            expected: expected_rate,
        });
    }
    reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0).map_err(|e| wav_error(path, e)))
        .collect()
}

/// Writes samples in `[-1, 1]` as 16-bit PCM mono WAV.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(format!("wav {}", path.display()), other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_arithmetic() {
        let cfg = MfccConfig::default();
        assert_eq!((cfg.frame_len(), cfg.hop_len()), (400, 160));
        for n in [400usize, 401, 559, 560, 16_000] {
            let m: Tensor<f64> = mfcc(&vec![0.0; n], &cfg).unwrap();
            assert_eq!(m.shape()[0], 1 + (n - 400) / 160);
        }
    }

    #[test]
    fn too_short_is_rejected() {
        assert!(matches!(
            mfcc::<f32>(&[0.0; 399], &MfccConfig::default()),
            Err(Error::TooShort { len: 399, frame: 400 })
        ));
    }

    #[test]
    fn silence_is_the_floor_under_dct() {
        let cfg = MfccConfig::default();
        let m: Tensor<f64> = mfcc(&vec![0.0; 4000], &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        let expected_c0 = floor * (cfg.mel_filters as f64).sqrt();
        for row in m.data().chunks(cfg.coefficients) {
            assert!((row[0] - expected_c0).abs() < 1e-9);
            assert!(row[1..].iter().all(|c| c.abs() < 1e-9));
            assert_eq!(row, &m.data()[..cfg.coefficients]);
        }
    }

    #[test]
    fn filterbank_rows_are_nonnegative_and_bounded() {
        for row in mel_filterbank(&MfccConfig::default()) {
            assert!(row.iter().all(|&w| w >= 0.0));
            let s: f64 = row.iter().sum();
            assert!(s > 0.0 && s <= 2.0, "row sum {s}");
        }
    }

    #[test]
    fn dct_is_orthonormal() {
        let n = 40;
        let d = dct_matrix(n);
        let x: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64).sin()).collect();
        let c: Vec<f64> = d.iter().map(|r| r.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        for i in 0..n {
            let back: f64 = (0..n).map(|k| d[k][i] * c[k]).sum();
            assert!((back - x[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn fixed_length_pad_and_crop() {
        let one = Tensor::<f32>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let padded = fixed_length_features(&one, 3).unwrap();
        assert_eq!(padded.data(), &[0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
        assert_eq!(fixed_length_features(&padded, 3).unwrap(), padded);
        let long = Tensor::<f32>::from_fn(&[5, 2], |i| i as f32);
        let cropped = fixed_length_features(&long, 3).unwrap();
        assert_eq!(cropped.data(), &[2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(fixed_length_features(&cropped, 1).unwrap().data(), &[4.0, 5.0]);
        assert!(fixed_length_features(&long, 0).is_err());
    }

    #[test]
    fn wav_round_trip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..100).map(|i| (i as f64 / 50.0) - 1.0).collect();
        write_wav(&path, &samples, 16_000).unwrap();
        let back = read_wav(&path, 16_000).unwrap();
        for (a, b) in samples.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
        assert!(matches!(
            read_wav(&path, 8_000),
            Err(Error::SampleRate { found: 16_000, expected: 8_000 })
        ));
    }
}

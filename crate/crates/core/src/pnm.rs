//! Binary PGM (P5) and PPM (P6) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub samples: Vec<u16>,
}

impl PnmImage {
    /// `[channels, H, W]` tensor in `[0,1]`. Gray images are replicated to
    /// three channels and color images averaged down to one as needed.
    pub fn to_tensor(&self, channels: usize) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let scale = 1.0 / self.maxval as f32;
        let at = |c: usize, i: usize| self.samples[i * self.channels + c] as f32 * scale;
        Tensor::from_fn(&[channels, h, w], |idx| {
            let (c, i) = (idx / (h * w), idx % (h * w));
            match (self.channels, channels) {
                (1, _) => at(0, i),
                (3, 1) => (at(0, i) + at(1, i) + at(2, i)) / 3.0,
                (3, 3) => at(c, i),
                _ => at(c.min(self.channels - 1), i),
            }
        })
    }

    /// Quantizes a `[1|3, H, W]` tensor in `[0,1]` to 8 bits.
    pub fn from_tensor(x: &Tensor<f32>) -> Result<Self> {
        let s = x.shape();
        if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
            return Err(Error::format("pnm", format!("cannot encode tensor of shape {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut samples = Vec::with_capacity(c * h * w);
        for i in 0..h * w {
            for ch in 0..c {
                let v = x.data()[ch * h * w + i];
                samples.push((v.clamp(0.0, 1.0) * 255.0).round() as u16);
            }
        }
        Ok(PnmImage {
            width: w,
            height: h,
            channels: c,
            maxval: 255,
            samples,
        })
    }

    pub fn gray8(width: usize, height: usize, pixels: &[u8]) -> Self {
        PnmImage {
            width,
            height,
            channels: 1,
            maxval: 255,
            samples: pixels.iter().map(|&p| p as u16).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        for &s in &self.samples {
            if self.maxval > 255 {
                out.extend_from_slice(&s.to_be_bytes());
            } else {
                out.push(s as u8);
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

pub fn read(path: &Path) -> Result<PnmImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|detail| Error::format(format!("image {}", path.display()), detail))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<PnmImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let mut number = |name: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse::<usize>().map_err(|_| format!("bad {name} {t:?}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err("zero image extent".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = &bytes[(pos + 1).min(bytes.len())..];
    let count = width * height * channels;
    let wide = maxval > 255;
    let needed = count * if wide { 2 } else { 1 };
    if raster.len() < needed {
        return Err(format!("raster has {} bytes, need {needed}", raster.len()));
    }
    let samples: Vec<u16> = if wide {
        raster[..needed]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        raster[..needed].iter().map(|&b| b as u16).collect()
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err("sample exceeds maxval".into());
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples,
    })
}

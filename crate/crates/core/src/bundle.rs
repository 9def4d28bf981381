//! On-disk containers.
//!
//! Every container is a directory holding `manifest.json` plus
//! little-endian blobs. A blob is an 8-byte unsigned element count `N`
//! followed by `N` 32-bit floats, row-major. The manifest records each
//! blob's byte length so truncation is caught before parsing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{fixed_length_features, mfcc, read_wav, MfccConfig};
use crate::error::{Error, Result};
use crate::imaging::resize;
use crate::network::{LayerParams, LayerSpec, Network, NetworkSpec};
use crate::pnm;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Image,
    AudioMfcc,
}

/// Input preprocessing recorded alongside the weights so that profiling and
/// detection normalize identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub modality: Modality,
    /// Per image channel, or per MFCC coefficient.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mfcc: Option<MfccConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<String>,
}

impl Preprocess {
    pub fn image(channels: usize) -> Self {
        Preprocess {
            modality: Modality::Image,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            mfcc: None,
            target_frames: None,
            architecture: None,
        }
    }

    /// Box of valid normalized pixel values, when all channels share one
    /// normalization. Audio features are unbounded.
    pub fn value_box(&self) -> Option<(f64, f64)> {
        if self.modality != Modality::Image || self.mean.is_empty() {
            return None;
        }
        let (m, s) = (self.mean[0], self.std[0]);
        if self.mean.iter().all(|&v| v == m) && self.std.iter().all(|&v| v == s) {
            Some(((0.0 - m) / s, (1.0 - m) / s))
        } else {
            None
        }
    }

    fn validate(&self, input_shape: &[usize]) -> Result<()> {
        let bad = |d: String| Error::format("preprocess", d);
        if self.mean.len() != self.std.len() {
            return Err(bad("mean and std lengths differ".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(bad("std must be positive".into()));
        }
        match self.modality {
            Modality::Image => {
                if input_shape.len() != 3 || self.mean.len() != input_shape[0] {
                    return Err(bad(format!(
                        "{} normalization channels for input {:?}",
                        self.mean.len(),
                        input_shape
                    )));
                }
            }
            Modality::AudioMfcc => {
                let cfg = self.mfcc.ok_or_else(|| bad("audio model without mfcc config".into()))?;
                cfg.validate()?;
                let frames = self.target_frames.ok_or_else(|| bad("audio model without target_frames".into()))?;
                if input_shape != [1, frames, cfg.coefficients] {
                    return Err(bad(format!(
                        "input {:?} does not match [1, {frames}, {}]",
                        input_shape, cfg.coefficients
                    )));
                }
                if self.mean.len() != cfg.coefficients {
                    return Err(bad("normalization length must equal coefficient count".into()));
                }
            }
        }
        Ok(())
    }

    /// Applies per-channel `(v − mean)/std` to a `[C,H,W]` image in `[0,1]`.
    pub fn normalize_image(&self, mut x: Tensor<f32>) -> Tensor<f32> {
        let plane: usize = x.shape()[1..].iter().product();
        for (c, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            chunk.iter_mut().for_each(|v| *v = ((*v as f64 - m) / s) as f32);
        }
        x
    }

    /// Inverse of [`Preprocess::normalize_image`], back to `[0,1]` pixels.
    pub fn denormalize_image(&self, mut x: Tensor<f32>) -> Tensor<f32> {
        let plane: usize = x.shape()[1..].iter().product();
        for (c, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v as f64 * s + m) as f32);
        }
        x
    }

    /// Waveform → fixed-length normalized `[1, frames, coefficients]`.
    pub fn audio_features(&self, waveform: &[f64]) -> Result<Tensor<f32>> {
        let cfg = self
            .mfcc
            .ok_or_else(|| Error::format("preprocess", "not an audio model"))?;
        let frames = self.target_frames.unwrap_or(1);
        let raw: Tensor<f32> = mfcc(waveform, &cfg)?;
        let fixed = fixed_length_features(&raw, frames)?;
        let k = cfg.coefficients;
        let mut data = fixed.into_data();
        for row in data.chunks_mut(k) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((*v as f64 - self.mean[j]) / self.std[j]) as f32;
            }
        }
        Tensor::new(vec![1, frames, k], data)
    }
}

pub fn write_blob(path: &Path, values: &[f32]) -> Result<u64> {
    let mut bytes = Vec::with_capacity(8 + 4 * values.len());
    bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

/// Reads a blob whose manifest-declared size is `declared_bytes`.
pub fn read_blob(path: &Path, declared_bytes: u64) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let found = bytes.len() as u64;
    let truncated = || Error::TruncatedBlob {
        path: path.to_path_buf(),
        expected: declared_bytes,
        found,
    };
    if found < declared_bytes || found < 8 {
        return Err(truncated());
    }
    if found > declared_bytes {
        return Err(Error::format(
            format!("blob {}", path.display()),
            format!("{found} bytes on disk, manifest declares {declared_bytes}"),
        ));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if 8 + 4 * n != found {
        return Err(truncated());
    }
    Ok(bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}", path.display()), e.to_string()))
}

pub(crate) fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    kind: String,
    input_shape: Vec<usize>,
    class_labels: Vec<String>,
    layers: Vec<LayerSpec>,
    preprocess: Preprocess,
    /// Weight then bias for each parameterized layer, in layer order.
    blobs: Vec<BlobEntry>,
}

/// A network with its preprocessing.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub network: Network<f32>,
    pub preprocess: Preprocess,
}

impl ModelBundle {
    pub fn new(network: Network<f32>, preprocess: Preprocess) -> Result<Self> {
        preprocess.validate(network.input_shape())?;
        Ok(ModelBundle { network, preprocess })
    }

    pub fn modality(&self) -> Modality {
        self.preprocess.modality
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let mut blobs = Vec::new();
        for p in self.network.params().iter().flatten() {
            for t in [&p.weight, &p.bias] {
                let file = format!("w_{}.bin", blobs.len());
                let bytes = write_blob(&dir.join(&file), t.data())?;
                blobs.push(BlobEntry {
                    file,
                    shape: t.shape().to_vec(),
                    bytes,
                });
            }
        }
        let spec = self.network.spec();
        let manifest = ModelManifest {
            format_version: FORMAT_VERSION,
            kind: "model".into(),
            input_shape: spec.input_shape.clone(),
            class_labels: spec.class_labels.clone(),
            layers: spec.layers.clone(),
            preprocess: self.preprocess.clone(),
            blobs,
        };
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ModelManifest = read_json(&dir.join(MANIFEST))?;
        check_version(manifest.format_version)?;
        if manifest.kind != "model" {
            return Err(Error::format("model manifest", format!("kind is {:?}", manifest.kind)));
        }
        let spec = NetworkSpec {
            input_shape: manifest.input_shape,
            layers: manifest.layers,
            class_labels: manifest.class_labels,
        };
        spec.validate()?;
        let mut entries = manifest.blobs.iter();
        let mut params = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let Some((ws, bs)) = layer.param_shapes() else {
                params.push(None);
                continue;
            };
            let mut next = |expected: Vec<usize>| -> Result<Tensor<f32>> {
                let entry = entries.next().ok_or_else(|| Error::ShapeInconsistency {
                    layer: i,
                    detail: "manifest lists too few blobs".into(),
                })?;
                if entry.shape != expected {
                    return Err(Error::ShapeInconsistency {
                        layer: i,
                        detail: format!("blob {} has shape {:?}, layer needs {:?}", entry.file, entry.shape, expected),
                    });
                }
                let data = read_blob(&dir.join(&entry.file), entry.bytes)?;
                Tensor::new(expected, data).map_err(|_| Error::ShapeInconsistency {
                    layer: i,
                    detail: format!("blob {} length does not match its shape", entry.file),
                })
            };
            let weight = next(ws)?;
            let bias = next(bs)?;
            params.push(Some(LayerParams { weight, bias }));
        }
        if entries.next().is_some() {
            return Err(Error::ShapeInconsistency {
                layer: spec.layers.len(),
                detail: "manifest lists more blobs than parameterized layers".into(),
            });
        }
        let network = Network::new(spec, params)?;
        ModelBundle::new(network, manifest.preprocess)
    }

    /// Content hash over the spec, preprocessing and exact weight bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let spec = serde_json::to_vec(self.network.spec()).expect("spec serializes");
        h.update(&spec);
        h.update(serde_json::to_vec(&self.preprocess).expect("preprocess serializes"));
        for p in self.network.params().iter().flatten() {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

/// Provenance of an adversarial item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub kind: String,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// `[top, left, height, width]` of an applied patch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rect: Option<[usize; 4]>,
    pub seed: u64,
    /// Whether the model's prediction changed (untargeted) or hit the target.
    pub fooled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleItem {
    pub id: String,
    pub label: Option<String>,
    pub input: Tensor<f32>,
    pub adversarial: bool,
    pub attack: Option<AttackRecord>,
}

impl SampleItem {
    pub fn natural(id: impl Into<String>, label: Option<String>, input: Tensor<f32>) -> Self {
        SampleItem {
            id: id.into(),
            label,
            input,
            adversarial: false,
            attack: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub modality: Modality,
    pub items: Vec<SampleItem>,
    /// Free-form record of how the set was produced (attack specs, seeds).
    pub provenance: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ItemEntry {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    adversarial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attack: Option<AttackRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleManifest {
    format_version: u32,
    kind: String,
    modality: Modality,
    item_shape: Vec<usize>,
    items: Vec<ItemEntry>,
    data: BlobEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

impl SampleSet {
    pub fn new(modality: Modality, items: Vec<SampleItem>) -> Result<Self> {
        let set = SampleSet {
            modality,
            items,
            provenance: None,
        };
        set.item_shape()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Shared item shape; errors on an empty or ragged set.
    pub fn item_shape(&self) -> Result<Vec<usize>> {
        let first = self
            .items
            .first()
            .ok_or_else(|| Error::Empty("sample set has no items".into()))?;
        let shape = first.input.shape().to_vec();
        for item in &self.items {
            if item.input.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: item.input.shape().to_vec(),
                });
            }
        }
        Ok(shape)
    }

    /// Checks that every label belongs to the model's label set.
    pub fn check_labels(&self, labels: &[String]) -> Result<()> {
        for item in &self.items {
            if let Some(l) = &item.label {
                if !labels.contains(l) {
                    return Err(Error::format("sample set", format!("item {} has unknown label {l:?}", item.id)));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let item_shape = self.item_shape()?;
        create_dir(dir)?;
        let data: Vec<f32> = self.items.iter().flat_map(|i| i.input.data().iter().copied()).collect();
        let bytes = write_blob(&dir.join("data.bin"), &data)?;
        let manifest = SampleManifest {
            format_version: FORMAT_VERSION,
            kind: "sample_set".into(),
            modality: self.modality,
            item_shape: item_shape.clone(),
            items: self
                .items
                .iter()
                .map(|i| ItemEntry {
                    id: i.id.clone(),
                    label: i.label.clone(),
                    adversarial: i.adversarial,
                    attack: i.attack.clone(),
                })
                .collect(),
            data: BlobEntry {
                file: "data.bin".into(),
                shape: vec![self.items.len(), item_shape.iter().product()],
                bytes,
            },
            provenance: self.provenance.clone(),
        };
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: SampleManifest = read_json(&dir.join(MANIFEST))?;
        check_version(manifest.format_version)?;
        if manifest.kind != "sample_set" {
            return Err(Error::format("sample manifest", format!("kind is {:?}", manifest.kind)));
        }
        let data = read_blob(&dir.join(&manifest.data.file), manifest.data.bytes)?;
        let per: usize = manifest.item_shape.iter().product();
        if per == 0 || data.len() != per * manifest.items.len() {
            return Err(Error::format(
                "sample set",
                format!("{} values for {} items of {:?}", data.len(), manifest.items.len(), manifest.item_shape),
            ));
        }
        let items = manifest
            .items
            .into_iter()
            .zip(data.chunks_exact(per))
            .map(|(e, chunk)| {
                Ok(SampleItem {
                    id: e.id,
                    label: e.label,
                    input: Tensor::new(manifest.item_shape.clone(), chunk.to_vec())?,
                    adversarial: e.adversarial,
                    attack: e.attack,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleSet {
            modality: manifest.modality,
            items,
            provenance: manifest.provenance,
        })
    }

    /// Order-independent digest of the item contents.
    pub fn content_hash(&self) -> String {
        let mut per_item: Vec<Vec<u8>> = self
            .items
            .iter()
            .map(|i| {
                let mut h = Sha256::new();
                h.update(i.id.as_bytes());
                h.update([0u8]);
                h.update(i.label.as_deref().unwrap_or("").as_bytes());
                h.update([0u8]);
                for v in i.input.data() {
                    h.update(v.to_le_bytes());
                }
                h.finalize().to_vec()
            })
            .collect();
        per_item.sort();
        let mut h = Sha256::new();
        for d in per_item {
            h.update(d);
        }
        hex_digest(h)
    }
}

/// Outcome of reading a directory of raw inputs.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub set: SampleSet,
    /// One message per skipped file.
    pub warnings: Vec<String>,
}

/// Files directly in `dir` (unlabeled) and one level down in
/// `dir/<label>/` (labeled), sorted by path.
fn collect_files(dir: &Path, extensions: &[&str]) -> Result<Vec<(PathBuf, Option<String>)>> {
    let has_ext = |p: &Path| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| extensions.iter().any(|x| x.eq_ignore_ascii_case(e)))
    };
    let mut files = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            let label = path.file_name().and_then(|n| n.to_str()).map(str::to_string);
            for sub in fs::read_dir(&path).map_err(|e| Error::io(&path, e))? {
                let p = sub.map_err(|e| Error::io(&path, e))?.path();
                if p.is_file() && has_ext(&p) {
                    files.push((p, label.clone()));
                }
            }
        } else if has_ext(&path) {
            files.push((path, None));
        }
    }
    files.sort();
    Ok(files)
}

fn item_id(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .with_extension("")
        .to_string_lossy()
        .replace('\\', "/")
}

/// Reads PGM/PPM files, resizes each bilinearly to `target_shape`
/// (`[C,H,W]`), scales to `[0,1]` and applies the bundle normalization.
pub fn ingest_images(dir: &Path, target_shape: &[usize], preprocess: &Preprocess) -> Result<Ingested> {
    if target_shape.len() != 3 {
        return Err(Error::InvalidConfig(format!("image target shape {target_shape:?}")));
    }
    let (c, h, w) = (target_shape[0], target_shape[1], target_shape[2]);
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for (path, label) in collect_files(dir, &["pgm", "ppm"])? {
        match pnm::read(&path) {
            Ok(img) => {
                let raw = img.to_tensor(c);
                let sized = resize(&raw, h, w);
                items.push(SampleItem::natural(item_id(dir, &path), label, preprocess.normalize_image(sized)));
            }
            Err(e) => warnings.push(format!("skipped {}: {e}", path.display())),
        }
    }
    if items.is_empty() {
        return Err(Error::NoUsableFiles(dir.to_path_buf()));
    }
    Ok(Ingested {
        set: SampleSet::new(Modality::Image, items)?,
        warnings,
    })
}

/// Reads 16-bit mono WAVs into normalized fixed-length MFCC tensors.
pub fn ingest_audio(dir: &Path, preprocess: &Preprocess) -> Result<Ingested> {
    let cfg = preprocess
        .mfcc
        .ok_or_else(|| Error::InvalidConfig("audio ingestion needs an MFCC config".into()))?;
    let mut items = Vec::new();
    let mut warnings = Vec::new();
    for (path, label) in collect_files(dir, &["wav"])? {
        match read_wav(&path, cfg.sample_rate).and_then(|w| preprocess.audio_features(&w)) {
            Ok(t) => items.push(SampleItem::natural(item_id(dir, &path), label, t)),
            Err(e) => warnings.push(format!("skipped {}: {e}", path.display())),
        }
    }
    if items.is_empty() {
        return Err(Error::NoUsableFiles(dir.to_path_buf()));
    }
    Ok(Ingested {
        set: SampleSet::new(Modality::AudioMfcc, items)?,
        warnings,
    })
}

/// Loads a sample-set container, or ingests raw files in the model's
/// modality when `dir` has no manifest.
pub fn load_inputs(dir: &Path, bundle: &ModelBundle) -> Result<Ingested> {
    if dir.join(MANIFEST).is_file() {
        let set = SampleSet::load(dir)?;
        if set.modality != bundle.modality() {
            return Err(Error::format("sample set", "modality does not match the model"));
        }
        if set.is_empty() {
            return Err(Error::Empty(format!("{}", dir.display())));
        }
        let shape = set.item_shape()?;
        if shape != bundle.network.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: bundle.network.input_shape().to_vec(),
                actual: shape,
            });
        }
        return Ok(Ingested { set, warnings: vec![] });
    }
    match bundle.modality() {
        Modality::Image => ingest_images(dir, bundle.network.input_shape(), &bundle.preprocess),
        Modality::AudioMfcc => ingest_audio(dir, &bundle.preprocess),
    }
}

/// Appends one line of text to a writer, returning the bytes written.
pub(crate) fn write_line(out: &mut dyn Write, line: &str) -> std::io::Result<usize> {
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(line.len() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let values = [1.5f32, -0.0, f32::MIN_POSITIVE, 3.25];
        let bytes = write_blob(&p, &values).unwrap();
        assert_eq!(bytes, 8 + 16);
        let back = read_blob(&p, bytes).unwrap();
        assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let raw = fs::read(&p).unwrap();
        fs::write(&p, &raw[..raw.len() - 1]).unwrap();
        assert!(matches!(read_blob(&p, bytes), Err(Error::TruncatedBlob { .. })));
    }

    #[test]
    fn value_box_follows_normalization() {
        let mut p = Preprocess::image(3);
        assert_eq!(p.value_box(), Some((0.0, 1.0)));
        p.mean = vec![0.5; 3];
        p.std = vec![0.25; 3];
        assert_eq!(p.value_box(), Some((-2.0, 2.0)));
        p.mean[1] = 0.4;
        assert_eq!(p.value_box(), None);
    }

    #[test]
    fn sample_hash_ignores_order() {
        let a = SampleItem::natural("a", Some("x".into()), Tensor::filled(&[1, 2, 2], 0.5));
        let b = SampleItem::natural("b", None, Tensor::filled(&[1, 2, 2], 0.25));
        let s1 = SampleSet::new(Modality::Image, vec![a.clone(), b.clone()]).unwrap();
        let s2 = SampleSet::new(Modality::Image, vec![b, a]).unwrap();
        assert_eq!(s1.content_hash(), s2.content_hash());
    }

    #[test]
    fn ragged_sets_are_rejected() {
        let a = SampleItem::natural("a", None, Tensor::filled(&[1, 2, 2], 0.5));
        let b = SampleItem::natural("b", None, Tensor::filled(&[1, 3, 2], 0.5));
        assert!(SampleSet::new(Modality::Image, vec![a, b]).is_err());
        assert!(SampleSet::new(Modality::Image, vec![]).is_err());
    }
}

//! Per-class reference profiles built from a calibration set.
//!
//! Samples are routed by the model's own prediction. For each class the
//! expected activation distribution is the per-channel mean of the samples'
//! last-conv distributions, and (for images) the expected frequency pattern
//! is the cell-wise majority vote of their binary patterns.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{activation_inconsistency, ActivationDistribution};
use crate::bundle::{
    check_version, create_dir, read_blob, read_json, write_blob, write_json, BlobEntry, Modality, ModelBundle,
    SampleSet, FORMAT_VERSION, MANIFEST,
};
use crate::cam::CropConfig;
use crate::detect::image_pattern;
use crate::error::{Error, Result};
use crate::introspection::last_conv_distribution;
use crate::spectrum::{BinaryFrequencyPattern, DEFAULT_PATTERN_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub min_samples: usize,
    pub pattern_size: usize,
    pub crop: CropConfig,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            min_samples: 20,
            pattern_size: DEFAULT_PATTERN_SIZE,
            crop: CropConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub label: String,
    /// Majority-vote pattern; image models only.
    pub pattern: Option<BinaryFrequencyPattern>,
    /// Number of samples voting true per cell.
    pub votes: Option<Vec<u32>>,
    pub activation: ActivationDistribution,
    pub samples: usize,
    /// Fraction of labeled routed samples whose label equals this class.
    pub purity: Option<f64>,
}

impl ClassProfile {
    pub fn vote_ratio(&self) -> Option<Vec<f64>> {
        self.votes
            .as_ref()
            .map(|v| v.iter().map(|&c| c as f64 / self.samples as f64).collect())
    }
}

/// Majority vote: a cell is true iff at least half the samples set it.
pub fn majority_pattern(size: usize, votes: &[u32], samples: usize) -> Result<BinaryFrequencyPattern> {
    BinaryFrequencyPattern::new(size, votes.iter().map(|&c| 2 * c as usize >= samples).collect())
}

/// Per-coordinate mean, summed in ascending order so the result does not
/// depend on sample order.
pub fn canonical_mean(vectors: &[Vec<f64>]) -> Vec<f64> {
    let k = vectors.first().map_or(0, Vec::len);
    let n = vectors.len() as f64;
    (0..k)
        .map(|j| {
            let mut col: Vec<f64> = vectors.iter().map(|v| v[j]).collect();
            col.sort_by(f64::total_cmp);
            // offsets from the minimum keep identical columns exact
            let base = col[0];
            base + col.iter().map(|v| v - base).sum::<f64>() / n
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileStore {
    pub model_hash: String,
    pub calibration_hash: String,
    pub config: ProfileConfig,
    /// In model label order.
    pub profiles: Vec<ClassProfile>,
}

impl ProfileStore {
    pub fn get(&self, label: &str) -> Option<&ClassProfile> {
        self.profiles.iter().find(|p| p.label == label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.profiles.iter().map(|p| p.label.as_str())
    }

    /// Checks the store against a model: same hash and known labels.
    pub fn check_model(&self, bundle: &ModelBundle) -> Result<()> {
        if self.model_hash != bundle.content_hash() {
            return Err(Error::format("profile store", "built for a different model"));
        }
        for p in &self.profiles {
            if bundle.network.class_index(&p.label).is_none() {
                return Err(Error::format("profile store", format!("unknown class {:?}", p.label)));
            }
            if p.activation.len() != bundle.network.last_conv_channels() {
                return Err(Error::format("profile store", format!("class {:?} has wrong channel count", p.label)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let mut classes = Vec::with_capacity(self.profiles.len());
        for (i, p) in self.profiles.iter().enumerate() {
            let f_file = format!("p_{i}_f.bin");
            let values: Vec<f32> = p.activation.values.iter().map(|&v| v as f32).collect();
            let f_bytes = write_blob(&dir.join(&f_file), &values)?;
            let votes = match &p.votes {
                Some(v) => {
                    let file = format!("p_{i}_votes.bin");
                    let data: Vec<f32> = v.iter().map(|&c| c as f32).collect();
                    let bytes = write_blob(&dir.join(&file), &data)?;
                    Some(BlobEntry {
                        file,
                        shape: vec![self.config.pattern_size, self.config.pattern_size],
                        bytes,
                    })
                }
                None => None,
            };
            classes.push(ClassEntry {
                label: p.label.clone(),
                samples: p.samples,
                purity: p.purity,
                activation: BlobEntry {
                    file: f_file,
                    shape: vec![values.len()],
                    bytes: f_bytes,
                },
                votes,
            });
        }
        let manifest = StoreManifest {
            format_version: FORMAT_VERSION,
            kind: "profile_store".into(),
            model_hash: self.model_hash.clone(),
            calibration_hash: self.calibration_hash.clone(),
            config: self.config,
            classes,
        };
        write_json(&dir.join(MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: StoreManifest = read_json(&dir.join(MANIFEST))?;
        check_version(m.format_version)?;
        if m.kind != "profile_store" {
            return Err(Error::format("profile manifest", format!("kind is {:?}", m.kind)));
        }
        let size = m.config.pattern_size;
        let mut profiles = Vec::with_capacity(m.classes.len());
        for c in m.classes {
            if c.samples < m.config.min_samples {
                return Err(Error::format(
                    "profile store",
                    format!("class {:?} has {} samples, below minimum {}", c.label, c.samples, m.config.min_samples),
                ));
            }
            let f = read_blob(&dir.join(&c.activation.file), c.activation.bytes)?;
            let votes = match &c.votes {
                Some(entry) => {
                    let raw = read_blob(&dir.join(&entry.file), entry.bytes)?;
                    if raw.len() != size * size {
                        return Err(Error::format("profile store", "vote grid has wrong size"));
                    }
                    Some(raw.into_iter().map(|v| v as u32).collect::<Vec<u32>>())
                }
                None => None,
            };
            let pattern = votes
                .as_ref()
                .map(|v| majority_pattern(size, v, c.samples))
                .transpose()?;
            profiles.push(ClassProfile {
                activation: ActivationDistribution::profile(c.label.clone(), f.into_iter().map(f64::from).collect()),
                label: c.label,
                pattern,
                votes,
                samples: c.samples,
                purity: c.purity,
            });
        }
        Ok(ProfileStore {
            model_hash: m.model_hash,
            calibration_hash: m.calibration_hash,
            config: m.config,
            profiles,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassEntry {
    label: String,
    samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    purity: Option<f64>,
    activation: BlobEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    votes: Option<BlobEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreManifest {
    format_version: u32,
    kind: String,
    model_hash: String,
    calibration_hash: String,
    config: ProfileConfig,
    classes: Vec<ClassEntry>,
}

/// Per-sample features extracted for profiling.
#[derive(Debug, Clone)]
struct SampleFeatures {
    predicted: usize,
    label: Option<String>,
    distribution: Vec<f64>,
    pattern: Option<BinaryFrequencyPattern>,
}

#[derive(Debug, Clone)]
pub struct ClassSummary {
    pub label: String,
    pub routed: usize,
    pub profiled: bool,
    pub purity: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ProfileBuild {
    pub store: ProfileStore,
    pub summary: Vec<ClassSummary>,
    pub warnings: Vec<String>,
}

pub fn build_profiles(bundle: &ModelBundle, calib: &SampleSet, cfg: &ProfileConfig) -> Result<ProfileBuild> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration set".into()));
    }
    if cfg.min_samples == 0 {
        return Err(Error::InvalidConfig("min_samples must be at least 1".into()));
    }
    let net = &bundle.network;
    let image = bundle.modality() == Modality::Image;
    let extracted: Vec<std::result::Result<SampleFeatures, String>> = calib
        .items
        .par_iter()
        .map(|item| {
            let run = || -> Result<SampleFeatures> {
                let (logits, trace) = net.forward(&item.input, true)?;
                let trace = trace.expect("trace requested");
                let predicted = logits.argmax();
                let pattern = if image {
                    Some(image_pattern(net, &trace, predicted, &cfg.crop, cfg.pattern_size)?)
                } else {
                    None
                };
                Ok(SampleFeatures {
                    predicted,
                    label: item.label.clone(),
                    distribution: last_conv_distribution(&trace),
                    pattern,
                })
            };
            run().map_err(|e| format!("skipped {}: {e}", item.id))
        })
        .collect();

    let mut warnings = Vec::new();
    let mut groups: Vec<Vec<SampleFeatures>> = vec![Vec::new(); net.num_classes()];
    for r in extracted {
        match r {
            Ok(f) => groups[f.predicted].push(f),
            Err(w) => warnings.push(w),
        }
    }

    let size = cfg.pattern_size;
    let mut profiles = Vec::new();
    let mut summary = Vec::new();
    for (class, group) in groups.iter().enumerate() {
        let label = net.class_labels()[class].clone();
        let labeled: Vec<&String> = group.iter().filter_map(|f| f.label.as_ref()).collect();
        let purity = (!labeled.is_empty())
            .then(|| labeled.iter().filter(|l| **l == &label).count() as f64 / labeled.len() as f64);
        let profiled = group.len() >= cfg.min_samples;
        summary.push(ClassSummary {
            label: label.clone(),
            routed: group.len(),
            profiled,
            purity,
        });
        if !profiled {
            warnings.push(format!(
                "class {label:?} omitted: {} samples routed, {} required",
                group.len(),
                cfg.min_samples
            ));
            continue;
        }
        let dists: Vec<Vec<f64>> = group.iter().map(|f| f.distribution.clone()).collect();
        // stored as f32, so round now to keep save/load value-identical
        let f_exp = canonical_mean(&dists).into_iter().map(|v| v as f32 as f64).collect();
        let votes = image.then(|| {
            let mut v = vec![0u32; size * size];
            for f in group {
                for (c, &b) in v.iter_mut().zip(f.pattern.as_ref().expect("image pattern").bits()) {
                    *c += b as u32;
                }
            }
            v
        });
        let pattern = votes
            .as_ref()
            .map(|v| majority_pattern(size, v, group.len()))
            .transpose()?;
        profiles.push(ClassProfile {
            activation: ActivationDistribution::profile(label.clone(), f_exp),
            label,
            pattern,
            votes,
            samples: group.len(),
            purity,
        });
    }
    if profiles.is_empty() {
        return Err(Error::NoClassesProfiled {
            min_samples: cfg.min_samples,
        });
    }
    Ok(ProfileBuild {
        store: ProfileStore {
            model_hash: bundle.content_hash(),
            calibration_hash: calib.content_hash(),
            config: *cfg,
            profiles,
        },
        summary,
        warnings,
    })
}

/// Symmetric matrix of activation inconsistency between class profiles, in
/// store order. Pairs with a constant profile are NaN.
#[allow(clippy::needless_range_loop)]
pub fn profile_distance_report(store: &ProfileStore) -> Result<Vec<Vec<f64>>> {
    let n = store.profiles.len();
    if n < 2 {
        return Err(Error::InvalidConfig("distance report needs at least two profiles".into()));
    }
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = activation_inconsistency(&store.profiles[i].activation, &store.profiles[j].activation)
                .unwrap_or(f64::NAN);
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complementary_votes_tie_to_true() {
        let p = majority_pattern(2, &[1, 1, 1, 1], 2).unwrap();
        assert!(p.bits().iter().all(|&b| b));
        let q = majority_pattern(2, &[0, 1, 2, 3], 5).unwrap();
        assert_eq!(q.bits(), &[false, false, false, true]);
    }

    #[test]
    fn mean_of_identical_vectors() {
        let f = vec![0.1, 0.7, 3.3];
        assert_eq!(canonical_mean(&[f.clone(), f.clone(), f.clone()]), f);
    }

    #[test]
    fn mean_is_order_independent() {
        let a = vec![vec![0.1, 1e16], vec![0.2, 1.0], vec![0.3, -1e16]];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(canonical_mean(&a), canonical_mean(&b));
    }
}

//! Self-verification: classify, then check the prediction against the
//! predicted class's profile and flag the input when an inconsistency
//! exceeds its threshold.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{activation_inconsistency, ActivationDistribution};
use crate::bundle::{write_line, Modality, ModelBundle, SampleItem};
use crate::cam::{locate_and_crop, saliency, weighted_saliency, CropConfig, CropRegion, SaliencyMap};
use crate::error::{Error, Result};
use crate::introspection::last_conv_distribution;
use crate::network::{ActivationTrace, LayerSpec, Network};
use crate::profiler::ProfileStore;
use crate::spectrum::{frequency_pattern, semantic_inconsistency, BinaryFrequencyPattern};

pub const DEFAULT_SEMANTIC_THRESHOLD: f64 = 0.46;
pub const DEFAULT_ACTIVATION_THRESHOLD: f64 = 0.11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub semantic: f64,
    pub activation: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            semantic: DEFAULT_SEMANTIC_THRESHOLD,
            activation: DEFAULT_ACTIVATION_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectConfig {
    pub thresholds: Thresholds,
    pub crop: CropConfig,
}

impl DetectConfig {
    /// Detection settings that crop exactly as the profiles were built.
    pub fn for_store(store: &ProfileStore, thresholds: Thresholds) -> Self {
        DetectConfig {
            thresholds,
            crop: store.config.crop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Natural,
    Adversarial,
    Suspicious,
}

impl Verdict {
    pub fn flagged(self) -> bool {
        self != Verdict::Natural
    }
}

/// Ground truth carried through evaluation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Natural,
    Adversarial,
}

/// One line of detector output. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_semantic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_activation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_semantic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_activation: Option<f64>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Truth>,
    /// Attack family of an adversarial evaluation item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<String>,
}

impl DetectionReport {
    fn failed(id: &str, predicted: Option<String>, err: &Error) -> Self {
        DetectionReport {
            id: id.to_string(),
            predicted,
            d_semantic: None,
            d_activation: None,
            threshold_semantic: None,
            threshold_activation: None,
            verdict: Verdict::Suspicious,
            reason: Some(err.reason_code().to_string()),
            truth: None,
            attack: None,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn parse(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::format("report line", e.to_string()))
    }
}

/// Writes one report as a single line; returns the bytes written.
pub fn save_report(report: &DetectionReport, out: &mut dyn Write) -> std::io::Result<usize> {
    write_line(out, &report.to_line())
}

pub fn read_reports(input: impl BufRead) -> Result<Vec<DetectionReport>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::format("report stream", e.to_string()))?;
            DetectionReport::parse(&l)
        })
        .collect()
}

/// Readout weights of `class` when the last-conv stack feeds a global
/// average pool and a dense layer (the classic CAM architecture).
pub fn class_readout(net: &Network<f32>, class: usize) -> Result<Vec<f64>> {
    let attach = net.last_conv_attachment();
    let layers = &net.spec().layers;
    let (_, h, w) = {
        let s = net.output_shape(attach);
        (s[0], s[1], s[2])
    };
    let pooled = matches!(layers.get(attach + 1), Some(LayerSpec::Avgpool2d { kernel, .. }) if *kernel == [h, w]);
    let flat = matches!(layers.get(attach + 2), Some(LayerSpec::Flatten));
    let dense = matches!(layers.get(attach + 3), Some(LayerSpec::Dense { .. }));
    if !(pooled && flat && dense) {
        return Err(Error::InvalidConfig(
            "class-weighted saliency needs last conv → global avgpool → flatten → dense".into(),
        ));
    }
    let p = net.params()[attach + 3].as_ref().expect("dense params");
    let k = p.weight.shape()[1];
    Ok(p.weight.data()[class * k..(class + 1) * k].iter().map(|&v| v as f64).collect())
}

pub fn saliency_for(
    net: &Network<f32>,
    trace: &ActivationTrace<f32>,
    predicted: usize,
    crop: &CropConfig,
) -> Result<SaliencyMap> {
    if crop.weighted_by_class {
        weighted_saliency(trace, &class_readout(net, predicted)?)
    } else {
        Ok(saliency(trace))
    }
}

pub fn locate(
    net: &Network<f32>,
    trace: &ActivationTrace<f32>,
    predicted: usize,
    crop: &CropConfig,
) -> Result<CropRegion<f32>> {
    let map = saliency_for(net, trace, predicted, crop)?;
    locate_and_crop(trace.input(), &map, crop)
}

/// Saliency → crop → binary frequency pattern of an image trace.
pub fn image_pattern(
    net: &Network<f32>,
    trace: &ActivationTrace<f32>,
    predicted: usize,
    crop: &CropConfig,
    size: usize,
) -> Result<BinaryFrequencyPattern> {
    let region = locate(net, trace, predicted, crop)?;
    frequency_pattern(&region.pattern, size)
}

pub fn classify_with_verification(
    bundle: &ModelBundle,
    id: &str,
    x: &crate::tensor::Tensor<f32>,
    store: &ProfileStore,
    cfg: &DetectConfig,
) -> Result<DetectionReport> {
    let net = &bundle.network;
    let (logits, trace) = net.forward(x, true)?;
    let trace = trace.expect("trace requested");
    let predicted = logits.argmax();
    let label = net.class_labels()[predicted].clone();
    let profile = store.get(&label).ok_or_else(|| Error::MissingProfile(label.clone()))?;

    let mut failure: Option<Error> = None;
    let mut record = |r: Result<f64>| match r {
        Ok(d) => Some(d),
        Err(e) => {
            failure.get_or_insert(e);
            None
        }
    };

    let practical = ActivationDistribution::practical(last_conv_distribution(&trace));
    let d_activation = record(activation_inconsistency(&practical, &profile.activation));

    let semantic_applies = bundle.modality() == Modality::Image && profile.pattern.is_some();
    let d_semantic = if semantic_applies {
        let expected = profile.pattern.as_ref().expect("checked");
        record(
            image_pattern(net, &trace, predicted, &cfg.crop, expected.size())
                .and_then(|p| semantic_inconsistency(&p, expected)),
        )
    } else {
        None
    };

    let t = cfg.thresholds;
    let mut triggered = Vec::new();
    if d_semantic.is_some_and(|d| d > t.semantic) {
        triggered.push("semantic_inconsistency");
    }
    if d_activation.is_some_and(|d| d > t.activation) {
        triggered.push("activation_inconsistency");
    }
    let (verdict, reason) = if !triggered.is_empty() {
        (Verdict::Adversarial, Some(triggered.join("+")))
    } else if let Some(e) = &failure {
        (Verdict::Suspicious, Some(e.reason_code().to_string()))
    } else {
        (Verdict::Natural, None)
    };
    Ok(DetectionReport {
        id: id.to_string(),
        predicted: Some(label),
        d_semantic,
        d_activation,
        threshold_semantic: semantic_applies.then_some(t.semantic),
        threshold_activation: Some(t.activation),
        verdict,
        reason,
        truth: None,
        attack: None,
    })
}

/// Detection over a batch; errors become `suspicious` reports. Output order
/// follows input order.
pub fn detect_batch(
    bundle: &ModelBundle,
    items: &[SampleItem],
    store: &ProfileStore,
    cfg: &DetectConfig,
) -> Vec<DetectionReport> {
    items
        .par_iter()
        .map(|item| {
            classify_with_verification(bundle, &item.id, &item.input, store, cfg).unwrap_or_else(|e| {
                let predicted = match &e {
                    Error::MissingProfile(l) => Some(l.clone()),
                    _ => None,
                };
                DetectionReport::failed(&item.id, predicted, &e)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> DetectionReport {
        DetectionReport {
            id: "img_0".into(),
            predicted: Some("cat".into()),
            d_semantic: Some(0.61),
            d_activation: None,
            threshold_semantic: Some(0.46),
            threshold_activation: Some(0.11),
            verdict: Verdict::Adversarial,
            reason: None,
            truth: None,
            attack: None,
        }
    }

    #[test]
    fn serialization_contract() {
        let line = report().to_line();
        assert!(line.contains(r#""verdict":"adversarial""#));
        assert!(line.contains(r#""d_semantic":0.61"#));
        assert!(!line.contains("null"));
        assert!(!line.contains(r#""d_activation""#));
        assert_eq!(
            line,
            r#"{"id":"img_0","predicted":"cat","d_semantic":0.61,"threshold_semantic":0.46,"threshold_activation":0.11,"verdict":"adversarial"}"#
        );
    }

    #[test]
    fn round_trip_through_stream() {
        let mut buf = Vec::new();
        let r = report();
        let n = save_report(&r, &mut buf).unwrap();
        assert_eq!(n, buf.len());
        assert!(buf.ends_with(b"\n"));
        let back = read_reports(buf.as_slice()).unwrap();
        assert_eq!(back, vec![r]);
    }
}

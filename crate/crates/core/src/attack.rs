//! Attack synthesis for evaluation: location-robust adversarial patches and
//! FGSM/BIM max-norm perturbations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{AttackRecord, ModelBundle, SampleItem, SampleSet};
use crate::error::{Error, Result};
use crate::network::{Network, Objective};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Placement {
    Fixed { top: usize, left: usize },
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub side: usize,
    pub target: usize,
    /// Placement used during optimization.
    pub placement: Placement,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Carriers drawn per step; `None` uses all of them.
    #[serde(default)]
    pub batch: Option<usize>,
    /// Minimum objective gain below which the run reports no progress.
    #[serde(default)]
    pub min_gain: f64,
}

impl PatchSpec {
    pub fn new(side: usize, target: usize, seed: u64) -> Self {
        PatchSpec {
            side,
            target,
            placement: Placement::Random,
            steps: 500,
            step_size: 0.05,
            seed,
            batch: None,
            min_gain: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForgedPatch {
    /// `[C, side, side]`.
    pub patch: Tensor<f32>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub no_progress: bool,
}

impl ForgedPatch {
    pub fn apply(&self, x: &Tensor<f32>, top: usize, left: usize) -> Result<Tensor<f32>> {
        apply_patch(x, &self.patch, top, left)
    }
}

/// Overwrites the rectangle at `(top, left)` in every channel; all other
/// values are copied bit for bit.
pub fn apply_patch(x: &Tensor<f32>, patch: &Tensor<f32>, top: usize, left: usize) -> Result<Tensor<f32>> {
    let (xs, ps) = (x.shape(), patch.shape());
    if xs.len() != 3 || ps.len() != 3 || xs[0] != ps[0] || top + ps[1] > xs[1] || left + ps[2] > xs[2] {
        return Err(Error::ShapeMismatch {
            expected: xs.to_vec(),
            actual: ps.to_vec(),
        });
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let (ph, pw) = (ps[1], ps[2]);
    let mut out = x.clone();
    for ch in 0..c {
        for r in 0..ph {
            let dst = (ch * h + top + r) * w + left;
            let src = (ch * ph + r) * pw;
            out.data_mut()[dst..dst + pw].copy_from_slice(&patch.data()[src..src + pw]);
        }
    }
    Ok(out)
}

fn extract_rect(g: &Tensor<f32>, top: usize, left: usize, side: usize) -> Vec<f32> {
    let (c, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for r in 0..side {
            let start = (ch * h + top + r) * w + left;
            out.extend_from_slice(&g.data()[start..start + side]);
        }
    }
    out
}

fn draw_placement(rng: &mut ChaCha8Rng, h: usize, w: usize, side: usize) -> (usize, usize) {
    (rng.random_range(0..=h - side), rng.random_range(0..=w - side))
}

/// Optimizes a square patch by gradient ascent on the mean target logit over
/// the carriers, re-placing it at random each step. Steps are normalized by
/// the largest gradient magnitude and the patch is clamped to `value_box`.
pub fn forge_patch(
    net: &Network<f32>,
    spec: &PatchSpec,
    carriers: &[Tensor<f32>],
    value_box: (f64, f64),
) -> Result<ForgedPatch> {
    if carriers.is_empty() {
        return Err(Error::Empty("patch carriers".into()));
    }
    let shape = net.input_shape();
    if shape.len() != 3 {
        return Err(Error::InvalidConfig("patches need [C,H,W] inputs".into()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if spec.side == 0 || spec.side > h || spec.side > w {
        return Err(Error::InvalidConfig(format!("patch side {} does not fit {h}x{w}", spec.side)));
    }
    if spec.target >= net.num_classes() {
        return Err(Error::InvalidConfig(format!("target class {} out of range", spec.target)));
    }
    if let Placement::Fixed { top, left } = spec.placement {
        if top + spec.side > h || left + spec.side > w {
            return Err(Error::InvalidConfig("fixed placement puts the patch out of bounds".into()));
        }
    }
    let (lo, hi) = (value_box.0 as f32, value_box.1 as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut patch = Tensor::from_fn(&[c, spec.side, spec.side], |_| rng.random_range(lo..=hi));
    let objective = Objective::Logit(spec.target);

    let eval_places: Vec<(usize, usize)> = carriers
        .iter()
        .map(|_| match spec.placement {
            Placement::Fixed { top, left } => (top, left),
            Placement::Random => draw_placement(&mut rng, h, w, spec.side),
        })
        .collect();
    let evaluate = |patch: &Tensor<f32>| -> Result<f64> {
        let values = carriers
            .par_iter()
            .zip(&eval_places)
            .map(|(x, &(t, l))| Ok(net.objective_value(&apply_patch(x, patch, t, l)?, objective)? as f64))
            .collect::<Result<Vec<f64>>>()?;
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    };
    let initial = evaluate(&patch)?;

    let batch = spec.batch.unwrap_or(carriers.len()).clamp(1, carriers.len());
    for _ in 0..spec.steps {
        let picks: Vec<(usize, (usize, usize))> = (0..batch)
            .map(|i| {
                let idx = if batch == carriers.len() { i } else { rng.random_range(0..carriers.len()) };
                let place = match spec.placement {
                    Placement::Fixed { top, left } => (top, left),
                    Placement::Random => draw_placement(&mut rng, h, w, spec.side),
                };
                (idx, place)
            })
            .collect();
        let grads = picks
            .par_iter()
            .map(|&(idx, (t, l))| {
                let g = net.input_gradient(&apply_patch(&carriers[idx], &patch, t, l)?, objective)?;
                Ok(extract_rect(&g, t, l, spec.side))
            })
            .collect::<Result<Vec<Vec<f32>>>>()?;
        let mut total = vec![0f32; patch.len()];
        for g in &grads {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        let scale = total.iter().fold(0f32, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            continue;
        }
        let step = spec.step_size as f32 / scale;
        for (p, g) in patch.data_mut().iter_mut().zip(&total) {
            *p = (*p + step * g).clamp(lo, hi);
        }
    }
    let final_objective = evaluate(&patch)?;
    Ok(ForgedPatch {
        patch,
        initial_objective: initial,
        final_objective,
        no_progress: final_objective - initial < spec.min_gain,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Fgsm,
    Bim,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Fgsm => "fgsm",
            NoiseKind::Bim => "bim",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseAttackSpec {
    pub kind: NoiseKind,
    pub epsilon: f64,
    /// BIM only.
    pub iterations: usize,
    /// BIM only.
    pub step: f64,
    /// Targeted when set; otherwise pushes away from the source class.
    pub target: Option<usize>,
}

impl NoiseAttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        NoiseAttackSpec {
            kind: NoiseKind::Fgsm,
            epsilon,
            iterations: 1,
            step: epsilon,
            target: None,
        }
    }

    /// BIM with `iterations` steps of `epsilon / iterations · 2.5`, the
    /// usual choice that lets the iterate reach the ball boundary.
    pub fn bim(epsilon: f64, iterations: usize) -> Self {
        NoiseAttackSpec {
            kind: NoiseKind::Bim,
            epsilon,
            iterations,
            step: epsilon * 2.5 / iterations.max(1) as f64,
            target: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if self.kind == NoiseKind::Bim {
            if self.iterations == 0 || !(self.step >= 0.0) {
                return Err(Error::InvalidConfig("bim needs iterations ≥ 1 and a non-negative step".into()));
            }
            if self.step * (self.iterations as f64) < self.epsilon {
                return Err(Error::InvalidConfig(format!(
                    "bim step {} × {} iterations cannot reach epsilon {}",
                    self.step, self.iterations, self.epsilon
                )));
            }
        }
        Ok(())
    }
}

/// Largest/smallest `f32` within `eps` of `x` when measured exactly.
fn ball_bounds(x: f32, eps: f64) -> (f32, f32) {
    let (xd, ed) = (x as f64, eps);
    let mut hi = (xd + ed) as f32;
    while hi as f64 - xd > ed {
        hi = hi.next_down();
    }
    let mut lo = (xd - ed) as f32;
    while xd - lo as f64 > ed {
        lo = lo.next_up();
    }
    (lo, hi)
}

/// FGSM or BIM perturbation of `x` whose source class is `source`.
/// Untargeted attacks ascend the cross-entropy of `source`; targeted ones
/// descend the cross-entropy of the target.
pub fn forge_noise(
    net: &Network<f32>,
    x: &Tensor<f32>,
    source: usize,
    spec: &NoiseAttackSpec,
    value_box: Option<(f64, f64)>,
) -> Result<Tensor<f32>> {
    spec.validate()?;
    let (objective, sign) = match spec.target {
        Some(t) => (Objective::LogProbability(t), 1f32),
        None => (Objective::LogProbability(source), -1f32),
    };
    let eps = spec.epsilon as f32;
    let bounds: Vec<(f32, f32)> = x
        .data()
        .iter()
        .map(|&v| {
            let (mut lo, mut hi) = ball_bounds(v, spec.epsilon);
            if let Some((blo, bhi)) = value_box {
                lo = lo.max(blo as f32);
                hi = hi.min(bhi as f32);
            }
            (lo, hi)
        })
        .collect();
    let (iterations, step) = match spec.kind {
        NoiseKind::Fgsm => (1, eps),
        NoiseKind::Bim => (spec.iterations, spec.step as f32),
    };
    let mut adv = x.clone();
    for _ in 0..iterations {
        let g = net.input_gradient(&adv, objective)?;
        for ((a, &gv), &(lo, hi)) in adv.data_mut().iter_mut().zip(g.data()).zip(&bounds) {
            let dir = if gv > 0.0 {
                sign
            } else if gv < 0.0 {
                -sign
            } else {
                0.0
            };
            *a = (*a + step * dir).clamp(lo, hi);
        }
    }
    Ok(adv)
}

/// Exact max-norm distance.
pub fn linf_distance(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}

/// What the `attack` pipeline forges over a set of natural inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackPlan {
    /// Per target class, `patches_per_target` patches are forged on the
    /// carriers; each natural input then receives `per_item` patches whose
    /// target differs from its prediction, at a seeded fixed position.
    Patch {
        side: usize,
        steps: usize,
        step_size: f64,
        #[serde(default)]
        batch: Option<usize>,
        patches_per_target: usize,
        per_item: usize,
        /// Target labels; empty means every class.
        #[serde(default)]
        targets: Vec<String>,
        seed: u64,
    },
    /// One perturbation per input, epsilon and kind.
    Noise {
        kinds: Vec<NoiseKind>,
        epsilons: Vec<f64>,
        iterations: usize,
        #[serde(default)]
        target: Option<String>,
    },
}

fn resolve_label(net: &Network<f32>, label: &str) -> Result<usize> {
    net.class_index(label)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown class label {label:?}")))
}

/// Runs `plan` against `naturals`, using `carriers` to optimize patches.
/// Every emitted item is marked adversarial and records its provenance,
/// including whether the model was fooled.
pub fn run_attacks(
    bundle: &ModelBundle,
    naturals: &SampleSet,
    carriers: &SampleSet,
    plan: &AttackPlan,
) -> Result<SampleSet> {
    if naturals.is_empty() {
        return Err(Error::Empty("attack inputs".into()));
    }
    let net = &bundle.network;
    let predictions: Vec<usize> = naturals
        .items
        .par_iter()
        .map(|it| net.predict(&it.input))
        .collect::<Result<_>>()?;
    let items = match plan {
        AttackPlan::Patch {
            side,
            steps,
            step_size,
            batch,
            patches_per_target,
            per_item,
            targets,
            seed,
        } => {
            let value_box = bundle
                .preprocess
                .value_box()
                .ok_or_else(|| Error::InvalidConfig("patch attacks need an image model with a shared value box".into()))?;
            let targets: Vec<usize> = if targets.is_empty() {
                (0..net.num_classes()).collect()
            } else {
                targets.iter().map(|t| resolve_label(net, t)).collect::<Result<_>>()?
            };
            let carrier_inputs: Vec<Tensor<f32>> = carriers.items.iter().map(|i| i.input.clone()).collect();
            let mut patches = Vec::new();
            for &target in &targets {
                for j in 0..*patches_per_target {
                    let patch_seed = seed.wrapping_add((target * 1000 + j) as u64);
                    let spec = PatchSpec {
                        steps: *steps,
                        step_size: *step_size,
                        batch: *batch,
                        ..PatchSpec::new(*side, target, patch_seed)
                    };
                    let forged = forge_patch(net, &spec, &carrier_inputs, value_box)?;
                    patches.push((target, patch_seed, forged));
                }
            }
            let (h, w) = (net.input_shape()[1], net.input_shape()[2]);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut jobs = Vec::new();
            for (i, item) in naturals.items.iter().enumerate() {
                let usable: Vec<usize> = (0..patches.len()).filter(|&p| patches[p].0 != predictions[i]).collect();
                for k in 0..(*per_item).min(usable.len()) {
                    let p = usable[(i * per_item + k) % usable.len()];
                    let place = draw_placement(&mut rng, h, w, *side);
                    jobs.push((item, i, p, place));
                }
            }
            jobs.par_iter()
                .map(|&(item, i, p, (top, left))| {
                    let (target, patch_seed, forged) = &patches[p];
                    let x = forged.apply(&item.input, top, left)?;
                    let fooled = net.predict(&x)? == *target && predictions[i] != *target;
                    Ok(SampleItem {
                        id: format!("{}~patch{p}", item.id),
                        label: item.label.clone(),
                        input: x,
                        adversarial: true,
                        attack: Some(AttackRecord {
                            kind: "patch".into(),
                            source_id: item.id.clone(),
                            target: Some(net.class_labels()[*target].clone()),
                            epsilon: None,
                            rect: Some([top, left, *side, *side]),
                            seed: *patch_seed,
                            fooled,
                        }),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        AttackPlan::Noise {
            kinds,
            epsilons,
            iterations,
            target,
        } => {
            let target = target.as_deref().map(|t| resolve_label(net, t)).transpose()?;
            let value_box = bundle.preprocess.value_box();
            let mut jobs = Vec::new();
            for (i, item) in naturals.items.iter().enumerate() {
                for &eps in epsilons {
                    for &kind in kinds {
                        let mut spec = match kind {
                            NoiseKind::Fgsm => NoiseAttackSpec::fgsm(eps),
                            NoiseKind::Bim => NoiseAttackSpec::bim(eps, *iterations),
                        };
                        spec.target = target;
                        spec.validate()?;
                        jobs.push((item, i, spec));
                    }
                }
            }
            jobs.par_iter()
                .map(|&(item, i, spec)| {
                    let x = forge_noise(net, &item.input, predictions[i], &spec, value_box)?;
                    let predicted = net.predict(&x)?;
                    let fooled = match spec.target {
                        Some(t) => predicted == t && predictions[i] != t,
                        None => predicted != predictions[i],
                    };
                    Ok(SampleItem {
                        id: format!("{}~{}{}", item.id, spec.kind.name(), spec.epsilon),
                        label: item.label.clone(),
                        input: x,
                        adversarial: true,
                        attack: Some(AttackRecord {
                            kind: spec.kind.name().into(),
                            source_id: item.id.clone(),
                            target: spec.target.map(|t| net.class_labels()[t].clone()),
                            epsilon: Some(spec.epsilon),
                            rect: None,
                            seed: 0,
                            fooled,
                        }),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    if items.is_empty() {
        return Err(Error::Empty("no attack could be applied".into()));
    }
    let mut set = SampleSet::new(naturals.modality, items)?;
    set.provenance = Some(serde_json::to_value(plan).expect("plan serializes"));
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_bounds_are_exact() {
        for &(x, e) in &[(0.1f32, 0.05f64), (1e6, 0.1), (-3.7, 0.3), (0.0, 1e-8), (0.3, 0.0), (0.7, 0.1)] {
            let (lo, hi) = ball_bounds(x, e);
            assert!(hi as f64 - x as f64 <= e);
            assert!(x as f64 - lo as f64 <= e);
            assert!(lo <= x && x <= hi);
        }
    }

    #[test]
    fn patch_application_is_local() {
        let x = Tensor::from_fn(&[2, 6, 6], |i| i as f32 * 0.01);
        let p = Tensor::filled(&[2, 2, 3], 9.0);
        let y = apply_patch(&x, &p, 1, 2).unwrap();
        for ch in 0..2 {
            for r in 0..6 {
                for c in 0..6 {
                    let inside = (1..3).contains(&r) && (2..5).contains(&c);
                    let v = y.get(&[ch, r, c]);
                    if inside {
                        assert_eq!(v, 9.0);
                    } else {
                        assert_eq!(v.to_bits(), x.get(&[ch, r, c]).to_bits());
                    }
                }
            }
        }
        assert!(apply_patch(&x, &p, 5, 0).is_err());
    }

    #[test]
    fn bim_must_reach_epsilon() {
        let mut s = NoiseAttackSpec::bim(0.1, 4);
        assert!(s.validate().is_ok());
        s.step = 0.01;
        assert!(s.validate().is_err());
    }
}

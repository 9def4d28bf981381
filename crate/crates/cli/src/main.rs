//! `selfcheck`: build class profiles, screen inputs, forge attacks, measure
//! detection rates and render activation-maximization patterns.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use selfcheck::attack::{run_attacks, AttackPlan, NoiseKind};
use selfcheck::bundle::{load_inputs, Modality, ModelBundle, SampleItem, SampleSet};
use selfcheck::cam::CropConfig;
use selfcheck::desk;
use selfcheck::detect::{detect_batch, save_report, saliency_for, DetectConfig, Thresholds, Verdict};
use selfcheck::eval::{evaluation_reports, successful_only, summarize, uniform_grid, EvalConfig, EvaluationSummary, Metric};
use selfcheck::introspection::{maximize_layer, AscentConfig, Regularization};
use selfcheck::pnm::PnmImage;
use selfcheck::profiler::{build_profiles, ProfileConfig, ProfileStore};
use selfcheck::Tensor32;

#[derive(Parser)]
#[command(name = "selfcheck", version, about = "Self-verifying CNN inference against physical adversarial attacks")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build per-class reference profiles from a calibration set.
    Profile(ProfileArgs),
    /// Classify inputs and verify each prediction against its profile.
    Detect(DetectArgs),
    /// Forge adversarial inputs from a set of naturals.
    Attack(AttackArgs),
    /// Detection rate, false-positive rate and threshold search.
    Evaluate(EvaluateArgs),
    /// Render activation-maximization patterns of one layer.
    Visualize(VisualizeArgs),
    /// Write a desk model with calibration and test data.
    Synth(SynthArgs),
}

#[derive(Args)]
struct CropArgs {
    /// Saliency fraction of the maximum that defines the crop region.
    #[arg(long, default_value_t = CropConfig::default().alpha)]
    alpha: f64,
    /// Minimum crop side as a fraction of the input side.
    #[arg(long, default_value_t = CropConfig::default().min_frac)]
    min_frac: f64,
    /// Weight saliency channels by the predicted class's readout.
    #[arg(long)]
    class_weighted: bool,
}

impl CropArgs {
    fn config(&self) -> CropConfig {
        CropConfig {
            alpha: self.alpha,
            min_frac: self.min_frac,
            weighted_by_class: self.class_weighted,
        }
    }
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    /// Sample-set container or directory of PGM/PPM or WAV files.
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ProfileConfig::default().min_samples)]
    min_samples: usize,
    #[arg(long, default_value_t = ProfileConfig::default().pattern_size)]
    pattern_size: usize,
    #[command(flatten)]
    crop: CropArgs,
}

#[derive(Args)]
struct ThresholdArgs {
    /// D_semantic threshold (image models).
    #[arg(long, default_value_t = Thresholds::default().semantic)]
    threshold_semantic: f64,
    /// D_activation threshold.
    #[arg(long, default_value_t = Thresholds::default().activation)]
    threshold_activation: f64,
}

impl ThresholdArgs {
    fn thresholds(&self) -> Result<Thresholds> {
        for (name, t) in [("semantic", self.threshold_semantic), ("activation", self.threshold_activation)] {
            if t.is_nan() || t < 0.0 {
                bail!("{name} threshold must be non-negative, got {t}");
            }
        }
        Ok(Thresholds {
            semantic: self.threshold_semantic,
            activation: self.threshold_activation,
        })
    }
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    /// Sample-set container or directory of raw inputs.
    #[arg(long)]
    input: PathBuf,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write each input's upsampled saliency map as PGM into this directory.
    #[arg(long)]
    dump_saliency: Option<PathBuf>,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    /// Natural inputs to attack.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(subcommand)]
    kind: AttackKind,
}

#[derive(Subcommand)]
enum AttackKind {
    /// Square adversarial patches targeting each class.
    Patch {
        /// Inputs the patches are optimized over; defaults to the attacked set.
        #[arg(long)]
        carriers: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        side: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        step_size: f64,
        /// Carriers per optimization step; all when absent.
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 2)]
        patches_per_target: usize,
        #[arg(long, default_value_t = 1)]
        per_item: usize,
        /// Target labels; every class when absent.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// L-infinity bounded FGSM/BIM perturbations.
    Noise {
        #[arg(long, value_delimiter = ',', default_value = "fgsm,bim")]
        kinds: Vec<NoiseArg>,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1")]
        epsilons: Vec<f64>,
        /// BIM iterations.
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        /// Target label; untargeted when absent.
        #[arg(long)]
        target: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Fgsm,
    Bim,
}

impl From<NoiseArg> for NoiseKind {
    fn from(a: NoiseArg) -> Self {
        match a {
            NoiseArg::Fgsm => NoiseKind::Fgsm,
            NoiseArg::Bim => NoiseKind::Bim,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Semantic,
    Activation,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long)]
    naturals: PathBuf,
    #[arg(long)]
    attacks: PathBuf,
    /// Output directory for reports.jsonl and summary.json.
    #[arg(long)]
    out: PathBuf,
    /// Metric for the threshold search; semantic for images, activation for audio by default.
    #[arg(long)]
    metric: Option<MetricArg>,
    /// Threshold grid as `start:stop:step`, or `none`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 0.10)]
    max_fpr: f64,
    /// Evaluate only attacks that changed the model's prediction.
    #[arg(long)]
    successful_only: bool,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Layer index; the last-conv attachment when absent.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 256)]
    steps: usize,
    #[arg(long, default_value_t = 2.0)]
    eta: f64,
    /// Apply L2 decay and periodic blur.
    #[arg(long)]
    regularized: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Image,
    Audio,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Calibration samples per class.
    #[arg(long, default_value_t = 60)]
    calibration: usize,
    /// Test samples per class.
    #[arg(long, default_value_t = 125)]
    test: usize,
    /// Also write the test inputs as PPM or WAV files.
    #[arg(long)]
    raw: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Profile(a) => cmd_profile(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Attack(a) => cmd_attack(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Visualize(a) => cmd_visualize(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_model(dir: &Path) -> Result<ModelBundle> {
    ModelBundle::load(dir).with_context(|| format!("loading model {}", dir.display()))
}

fn load_set(dir: &Path, bundle: &ModelBundle) -> Result<SampleSet> {
    let ingested = load_inputs(dir, bundle).with_context(|| format!("reading inputs {}", dir.display()))?;
    for w in &ingested.warnings {
        eprintln!("warning: {w}");
    }
    Ok(ingested.set)
}

fn load_store(dir: &Path, bundle: &ModelBundle) -> Result<ProfileStore> {
    let store = ProfileStore::load(dir).with_context(|| format!("loading profiles {}", dir.display()))?;
    store.check_model(bundle)?;
    Ok(store)
}

/// Left-aligned first column, right-aligned rest.
fn print_table(header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!("{}", line(header.to_vec()));
    for row in rows {
        println!("{}", line(row.iter().map(String::as_str).collect()));
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn cmd_profile(a: &ProfileArgs) -> Result<u8> {
    let bundle = load_model(&a.model)?;
    let calib = load_set(&a.calibration, &bundle)?;
    let cfg = ProfileConfig {
        min_samples: a.min_samples,
        pattern_size: a.pattern_size,
        crop: a.crop.config(),
    };
    let build = build_profiles(&bundle, &calib, &cfg)?;
    build.store.save(&a.out)?;
    for w in &build.warnings {
        eprintln!("warning: {w}");
    }
    let rows: Vec<Vec<String>> = build
        .summary
        .iter()
        .map(|s| {
            vec![
                s.label.clone(),
                s.routed.to_string(),
                if s.profiled { "yes" } else { "no" }.to_string(),
                opt(s.purity),
            ]
        })
        .collect();
    print_table(&["class", "samples", "profiled", "purity"], &rows);
    Ok(0)
}

fn cmd_detect(a: &DetectArgs) -> Result<u8> {
    let bundle = load_model(&a.model)?;
    let store = load_store(&a.profiles, &bundle)?;
    let set = load_set(&a.input, &bundle)?;
    let cfg = DetectConfig::for_store(&store, a.thresholds.thresholds()?);
    let reports = detect_batch(&bundle, &set.items, &store, &cfg);

    if let Some(dir) = &a.dump_saliency {
        dump_saliency(dir, &bundle, &set.items, &cfg)?;
    }
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for r in &reports {
        save_report(r, &mut out)?;
    }
    out.flush()?;
    let any_flagged = reports.iter().any(|r| r.verdict != Verdict::Natural);
    Ok(if any_flagged { 2 } else { 0 })
}

fn dump_saliency(dir: &Path, bundle: &ModelBundle, items: &[SampleItem], cfg: &DetectConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let net = &bundle.network;
    for item in items {
        let trace = net.trace(&item.input)?;
        let predicted = net.predict(&item.input)?;
        let map = saliency_for(net, &trace, predicted, &cfg.crop)?;
        let (h, w) = map.fine_dims;
        let name = format!("{}.pgm", item.id.replace('/', "_"));
        PnmImage::gray8(w, h, &map.to_gray8()).write(&dir.join(name))?;
    }
    Ok(())
}

fn cmd_attack(a: &AttackArgs) -> Result<u8> {
    let bundle = load_model(&a.model)?;
    let naturals = load_set(&a.input, &bundle)?;
    let (plan, carriers) = match &a.kind {
        AttackKind::Patch {
            carriers,
            side,
            steps,
            step_size,
            batch,
            patches_per_target,
            per_item,
            targets,
            seed,
        } => {
            let carriers = match carriers {
                Some(dir) => load_set(dir, &bundle)?,
                None => naturals.clone(),
            };
            let plan = AttackPlan::Patch {
                side: *side,
                steps: *steps,
                step_size: *step_size,
                batch: *batch,
                patches_per_target: *patches_per_target,
                per_item: *per_item,
                targets: targets.clone(),
                seed: *seed,
            };
            (plan, carriers)
        }
        AttackKind::Noise {
            kinds,
            epsilons,
            iterations,
            target,
        } => {
            let plan = AttackPlan::Noise {
                kinds: kinds.iter().map(|&k| k.into()).collect(),
                epsilons: epsilons.clone(),
                iterations: *iterations,
                target: target.clone(),
            };
            (plan, naturals.clone())
        }
    };
    let set = run_attacks(&bundle, &naturals, &carriers, &plan)?;
    set.save(&a.out)?;

    let mut kinds: Vec<String> = set.items.iter().filter_map(|i| i.attack.as_ref().map(|r| r.kind.clone())).collect();
    kinds.sort();
    kinds.dedup();
    let rows: Vec<Vec<String>> = kinds
        .iter()
        .map(|k| {
            let of_kind: Vec<_> = set.items.iter().filter_map(|i| i.attack.as_ref()).filter(|r| &r.kind == k).collect();
            let fooled = of_kind.iter().filter(|r| r.fooled).count();
            vec![
                k.clone(),
                of_kind.len().to_string(),
                fooled.to_string(),
                format!("{:.4}", fooled as f64 / of_kind.len() as f64),
            ]
        })
        .collect();
    print_table(&["attack", "items", "fooled", "rate"], &rows);
    Ok(0)
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    if spec == "none" {
        return Ok(Vec::new());
    }
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("grid {spec:?} is not start:stop:step"))?;
    match parts.as_slice() {
        &[start, stop, step] if step > 0.0 && stop >= start => Ok(uniform_grid(start, stop, step)),
        _ => bail!("grid {spec:?} is not start:stop:step with a positive step"),
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<u8> {
    let grid = a.grid.as_deref().map(parse_grid).transpose()?;
    let thresholds = a.thresholds.thresholds()?;
    let bundle = load_model(&a.model)?;
    let store = load_store(&a.profiles, &bundle)?;
    let naturals = load_set(&a.naturals, &bundle)?;
    let mut attacks = load_set(&a.attacks, &bundle)?;
    if a.successful_only {
        attacks = successful_only(&attacks)?;
    }
    let metric = match a.metric {
        Some(MetricArg::Semantic) => Metric::Semantic,
        Some(MetricArg::Activation) => Metric::Activation,
        None if bundle.modality() == Modality::Image => Metric::Semantic,
        None => Metric::Activation,
    };
    let mut cfg = EvalConfig::new(metric);
    if let Some(g) = grid {
        cfg.grid = g;
    }
    cfg.max_fpr = a.max_fpr;
    let detect = DetectConfig::for_store(&store, thresholds);
    let reports = evaluation_reports(&bundle, &store, &naturals, &attacks, &detect)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut lines = Vec::new();
    for r in &reports {
        save_report(r, &mut lines)?;
    }
    fs::write(a.out.join("reports.jsonl"), &lines)?;
    let summary = summarize(&reports, &cfg)?;
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    fs::write(a.out.join("summary.json"), json)?;
    print_summary(&summary);
    Ok(0)
}

fn print_summary(s: &EvaluationSummary) {
    let mut rows = vec![vec![
        "natural".to_string(),
        s.naturals.to_string(),
        format!("{:.4}", s.false_positive_rate),
        "-".into(),
        opt(s.median_natural),
    ]];
    rows.extend(s.per_kind.iter().map(|k| {
        vec![
            k.kind.clone(),
            k.count.to_string(),
            format!("{:.4}", k.detection_rate),
            opt(k.auc),
            opt(k.median_score),
        ]
    }));
    rows.push(vec![
        "all attacks".into(),
        s.adversarial.to_string(),
        format!("{:.4}", s.detection_rate),
        format!("{:.4}", s.auc),
        opt(s.median_adversarial),
    ]);
    print_table(&["set", "count", "flagged", "auc", "median"], &rows);
    if let Some(b) = s.best {
        println!(
            "best threshold {:.4}: detection {:.4} at fpr {:.4}",
            b.threshold, b.detection_rate, b.false_positive_rate
        );
    }
}

/// Min-max rescale to `[0,1]` for display.
fn stretch(x: &Tensor32) -> Tensor32 {
    let lo = x.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = x.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = (*v - lo) / span);
    y
}

fn cmd_visualize(a: &VisualizeArgs) -> Result<u8> {
    let bundle = load_model(&a.model)?;
    let net = &bundle.network;
    let layer = a.layer.unwrap_or_else(|| net.last_conv_attachment());
    let value_box = bundle.preprocess.value_box().unwrap_or((-3.0, 3.0));
    let mut cfg = AscentConfig::new(a.eta, a.steps).with_box(value_box.0, value_box.1);
    if a.regularized {
        cfg = cfg.with_regularization(Regularization::semantic_default());
    }
    let patterns = maximize_layer(net, layer, &cfg, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let image = bundle.modality() == Modality::Image;
    for p in &patterns {
        let c = p.neuron.channel;
        let pixels = if image {
            bundle.preprocess.denormalize_image(p.pattern.clone())
        } else {
            stretch(&p.pattern)
        };
        let ext = if pixels.shape()[0] == 3 { "ppm" } else { "pgm" };
        PnmImage::from_tensor(&pixels)?.write(&a.out.join(format!("channel_{c:03}.{ext}")))?;
        let sidecar = format!(
            "layer {layer}\nchannel {c}\nmean_activation {}\ninitial_activation {}\nwarning {}\n",
            p.mean_activation, p.initial_activation, p.warning
        );
        fs::write(a.out.join(format!("channel_{c:03}.txt")), sidecar)?;
    }
    let mean = patterns.iter().map(|p| p.mean_activation).sum::<f64>() / patterns.len().max(1) as f64;
    println!("{} patterns, mean activation {mean:.4}", patterns.len());
    Ok(0)
}

fn cmd_synth(a: &SynthArgs) -> Result<u8> {
    let (bundle, calib, test) = match a.kind {
        SynthKind::Image => {
            let bundle = desk::image_model(a.seed)?;
            let calib = desk::image_samples(a.calibration, a.seed.wrapping_add(1));
            let test = desk::image_samples(a.test, a.seed.wrapping_add(2));
            (bundle, calib, test)
        }
        SynthKind::Audio => {
            let bundle = desk::audio_model(a.seed)?;
            let calib = desk::audio_samples(&bundle, a.calibration, a.seed.wrapping_add(1))?;
            let test = desk::audio_samples(&bundle, a.test, a.seed.wrapping_add(2))?;
            (bundle, calib, test)
        }
    };
    let modality = bundle.modality();
    bundle.save(&a.out.join("model"))?;
    SampleSet::new(modality, calib)?.save(&a.out.join("calibration"))?;
    let test_set = SampleSet::new(modality, test)?;
    test_set.save(&a.out.join("test"))?;
    if a.raw {
        let raw = a.out.join("raw");
        match a.kind {
            SynthKind::Image => {
                for item in &test_set.items {
                    let dir = raw.join(item.label.as_deref().unwrap_or("unlabeled"));
                    fs::create_dir_all(&dir)?;
                    let pixels = bundle.preprocess.denormalize_image(item.input.clone());
                    PnmImage::from_tensor(&pixels)?.write(&dir.join(format!("{}.ppm", item.id)))?;
                }
            }
            SynthKind::Audio => {
                let rate = bundle.preprocess.mfcc.map_or(16_000, |m| m.sample_rate);
                for (id, class, wave) in desk::audio_waveforms(a.test, a.seed.wrapping_add(2)) {
                    let dir = raw.join(desk::AUDIO_CLASSES[class]);
                    fs::create_dir_all(&dir)?;
                    selfcheck::audio::write_wav(&dir.join(format!("{id}.wav")), &wave, rate)?;
                }
            }
        }
    }
    let accuracy = test_set
        .items
        .iter()
        .filter(|it| {
            bundle
                .network
                .predict(&it.input)
                .is_ok_and(|p| Some(bundle.network.class_labels()[p].as_str()) == it.label.as_deref())
        })
        .count() as f64
        / test_set.len() as f64;
    println!("{}", bundle.preprocess.architecture.as_deref().unwrap_or(""));
    println!("test accuracy {accuracy:.4} on {} inputs", test_set.len());
    Ok(0)
}

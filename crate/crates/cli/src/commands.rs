//! The four subcommands: generate, train, ablate, report.

use crate::config::ConfigFile;
use crate::gridmap::{write_pgm, GridReport};
use crate::CommonArgs;
use clap::Args;
use lczlab_core::data::{
    generate_synthetic, load_dataset, merge_label, store_dataset, Checksums, Dataset, LabelSpace,
    ModalityMode, SyntheticConfig,
};
use lczlab_core::metrics::{ConfusionMatrix, MetricReport};
use lczlab_core::models::{load_checkpoint, save_checkpoint, FusionNetwork, ModelSpec, Variant};
use lczlab_core::training::{self, default_alpha_grid, evaluate, tune_alpha, TrainConfig};
use lczlab_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ----------------------------------------------------------------- generate

#[derive(Args, Clone)]
pub struct GenerateArgs {
    /// Number of classes (1..=17).
    #[arg(long)]
    classes: Option<usize>,
    /// Patches generated per class before the 70/15/15 split.
    #[arg(long = "per-class")]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Additive Gaussian noise level.
    #[arg(long)]
    noise: Option<f64>,
    /// Which modality carries its share of the class signal.
    #[arg(long, value_parser = parse_modality)]
    modality: Option<ModalityMode>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

fn parse_modality(s: &str) -> std::result::Result<ModalityMode, String> {
    match s {
        "both" => Ok(ModalityMode::Both),
        "sar-only" => Ok(ModalityMode::SarOnly),
        "msi-only" => Ok(ModalityMode::MsiOnly),
        other => Err(format!(
            "unknown modality {other:?} (expected both|sar-only|msi-only)"
        )),
    }
}

const GENERATE_KEYS: &[&str] = &["classes", "per_class", "seed", "noise", "modality", "out"];

pub fn generate(args: GenerateArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref(), "generate", GENERATE_KEYS)?;
    let cfg = SyntheticConfig {
        classes: args.classes.or(file.usize("classes")?).unwrap_or(4),
        per_class: args.per_class.or(file.usize("per_class")?).unwrap_or(20),
        seed: args.seed.or(file.u64("seed")?).unwrap_or(0),
        noise: args.noise.or(file.f64("noise")?).unwrap_or(0.3),
        modality: match args.modality {
            Some(m) => m,
            None => match file.string("modality")? {
                Some(s) => parse_modality(&s).map_err(Error::Config)?,
                None => ModalityMode::Both,
            },
        },
    };
    let out = args
        .out
        .or(file.string("out")?.map(PathBuf::from))
        .ok_or_else(|| Error::Config("generate needs --out".into()))?;
    let dataset = generate_synthetic(&cfg)?;
    let manifest = store_dataset(&out, &dataset)?;
    println!(
        "wrote {} (train {}, val {}, test {}, {} classes)",
        out.display(),
        manifest.counts.train,
        manifest.counts.val,
        manifest.counts.test,
        manifest.num_classes
    );
    Ok(())
}

// -------------------------------------------------------------------- train

#[derive(Args, Clone)]
pub struct TrainArgs {
    /// Dataset directory (from `generate`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fusion variant: fm1|fm1a|fm1b|fm2|fm2b|fm3|fm3a|fm3b|fm4.
    #[arg(long)]
    variant: Option<String>,
    /// Give each spectral band group its own first conv block.
    #[arg(long = "band-grouping")]
    band_grouping: bool,
    /// Train against the 8 merged classes instead of the raw 17.
    #[arg(long = "merge-labels")]
    merge_labels: bool,
    /// Fixed decision weight for fm4; omitting it tunes alpha on validation.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "learning-rate")]
    learning_rate: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Output directory for checkpoint, log.csv, summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

const TRAIN_KEYS: &[&str] = &[
    "data",
    "variant",
    "band_grouping",
    "merge_labels",
    "alpha",
    "epochs",
    "seed",
    "learning_rate",
    "batch_size",
    "out",
];

/// Everything `summary.json` records about a finished run. Wall time is
/// deliberately excluded so identical runs serialize identically.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub spec: ModelSpec,
    pub train_config: TrainConfig,
    pub dataset_checksums: Checksums,
    pub epochs_run: usize,
    pub tuned_alpha: Option<f64>,
    pub validation: Option<MetricReport>,
    pub test: Option<MetricReport>,
}

pub fn variant_label(variant: Variant, band_grouping: bool, merge_labels: bool) -> String {
    let suffix = match (band_grouping, merge_labels) {
        (false, false) => "",
        (true, false) => "_b",
        (false, true) => "_l",
        (true, true) => "_bl",
    };
    format!("{variant}{suffix}")
}

struct ResolvedTrain {
    data_dir: PathBuf,
    out_dir: PathBuf,
    spec: ModelSpec,
    train_config: TrainConfig,
    fixed_alpha: bool,
}

fn resolve_train(args: &TrainArgs) -> Result<ResolvedTrain> {
    let file = ConfigFile::load(args.common.config.as_deref(), "train", TRAIN_KEYS)?;
    let data_dir = args
        .data
        .clone()
        .or(file.string("data")?.map(PathBuf::from))
        .ok_or_else(|| Error::Config("train needs --data".into()))?;
    let out_dir = args
        .out
        .clone()
        .or(file.string("out")?.map(PathBuf::from))
        .ok_or_else(|| Error::Config("train needs --out".into()))?;
    let variant: Variant = args
        .variant
        .clone()
        .or(file.string("variant")?)
        .ok_or_else(|| Error::Config("train needs --variant".into()))?
        .parse()?;
    let band_grouping = args.band_grouping || file.bool("band_grouping")?.unwrap_or(false);
    let merge_labels = args.merge_labels || file.bool("merge_labels")?.unwrap_or(false);
    let label_space = if merge_labels {
        LabelSpace::Merged8
    } else {
        LabelSpace::Original17
    };
    let mut spec = ModelSpec::new(variant, band_grouping, label_space);
    let alpha = args.alpha.or(file.f64("alpha")?);
    if let Some(a) = alpha {
        if !variant.is_late_fusion() {
            return Err(Error::Config(format!("--alpha only applies to fm4, not {variant}")));
        }
        spec.alpha = Some(a);
    }
    let defaults = TrainConfig::default();
    let train_config = TrainConfig {
        learning_rate: args
            .learning_rate
            .or(file.f64("learning_rate")?)
            .unwrap_or(defaults.learning_rate),
        epochs: args.epochs.or(file.usize("epochs")?).unwrap_or(defaults.epochs),
        batch_size: args
            .batch_size
            .or(file.usize("batch_size")?)
            .unwrap_or(defaults.batch_size),
        seed: args.seed.or(file.u64("seed")?).unwrap_or(defaults.seed),
        ..defaults
    };
    Ok(ResolvedTrain {
        data_dir,
        out_dir,
        spec,
        train_config,
        fixed_alpha: alpha.is_some(),
    })
}

pub fn train(args: TrainArgs) -> Result<RunSummary> {
    let resolved = resolve_train(&args)?;
    let data = load_dataset(&resolved.data_dir)?;
    let summary = run_one(&resolved, &data)?;
    println!(
        "{}: {} epochs, validation OA {}",
        summary.label,
        summary.epochs_run,
        summary
            .validation
            .as_ref()
            .map_or("n/a".to_string(), |m| format!("{:.4}", m.overall_accuracy)),
    );
    Ok(summary)
}

fn run_one(resolved: &ResolvedTrain, data: &Dataset) -> Result<RunSummary> {
    let mut spec = resolved.spec.clone();
    if spec.label_space == LabelSpace::Original17 {
        spec = spec.with_classes(data.manifest.num_classes);
    }
    let started = Instant::now();
    let mut net = FusionNetwork::<f32>::build(spec.clone(), resolved.train_config.seed)?;
    let log = training::train(&mut net, data, &resolved.train_config)?;
    let tuned_alpha = if spec.variant.is_late_fusion() && !resolved.fixed_alpha && !data.val.is_empty()
    {
        let search = tune_alpha(&mut net, data, &data.val, &default_alpha_grid())?;
        Some(search.best_alpha)
    } else {
        None
    };
    let space = net.spec.label_space;
    let report_for = |net: &mut FusionNetwork<f32>, split: &[_]| -> Result<Option<MetricReport>> {
        if split.is_empty() {
            return Ok(None);
        }
        let cm = evaluate(net, data, split, space)?;
        Some(build_report(&cm, space)).transpose()
    };
    let validation = report_for(&mut net, &data.val)?;
    let test = report_for(&mut net, &data.test)?;

    fs::create_dir_all(&resolved.out_dir)?;
    save_checkpoint(&net, &resolved.out_dir.join("checkpoint"))?;
    fs::write(resolved.out_dir.join("log.csv"), log.to_csv())?;
    let summary = RunSummary {
        label: variant_label(
            spec.variant,
            spec.band_grouping,
            space == LabelSpace::Merged8,
        ),
        spec: net.spec.clone(),
        train_config: resolved.train_config.clone(),
        dataset_checksums: data.manifest.checksums.clone(),
        epochs_run: log.epochs.len(),
        tuned_alpha,
        validation,
        test,
    };
    fs::write(
        resolved.out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    eprintln!(
        "{}: trained in {:.1}s",
        summary.label,
        started.elapsed().as_secs_f64()
    );
    Ok(summary)
}

/// The built-up/natural split only exists in the two published label
/// spaces; synthetic class counts fall back to the flat report.
fn build_report(cm: &ConfusionMatrix, space: LabelSpace) -> Result<MetricReport> {
    if cm.k() == space.num_classes() {
        MetricReport::compute(cm, space)
    } else {
        MetricReport::compute_flat(cm)
    }
}

// ------------------------------------------------------------------- ablate

#[derive(Args, Clone)]
pub struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated variant list, e.g. fm1,fm1a,fm1b.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long = "band-grouping")]
    band_grouping: bool,
    #[arg(long = "merge-labels")]
    merge_labels: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "learning-rate")]
    learning_rate: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

const ABLATE_KEYS: &[&str] = &[
    "data",
    "variants",
    "band_grouping",
    "merge_labels",
    "epochs",
    "seed",
    "learning_rate",
    "batch_size",
    "out",
];

#[derive(Debug, Clone, Serialize)]
struct AblationRow {
    variant: String,
    overall_accuracy: Option<f64>,
    built_up_accuracy: Option<f64>,
    natural_accuracy: Option<f64>,
    kappa: Option<f64>,
    mcc: Option<f64>,
    dataset_checksum: String,
    status: String,
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref(), "ablate", ABLATE_KEYS)?;
    let mut variant_names = args.variants.clone();
    if variant_names.is_empty() {
        if let Some(s) = file.string("variants")? {
            variant_names = s.split(',').map(|v| v.trim().to_string()).collect();
        }
    }
    if variant_names.is_empty() {
        return Err(Error::Config("ablate needs --variants".into()));
    }
    let variants: Vec<Variant> = variant_names
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    let data_dir = args
        .data
        .clone()
        .or(file.string("data")?.map(PathBuf::from))
        .ok_or_else(|| Error::Config("ablate needs --data".into()))?;
    let out_dir = args
        .out
        .clone()
        .or(file.string("out")?.map(PathBuf::from))
        .ok_or_else(|| Error::Config("ablate needs --out".into()))?;
    let data = load_dataset(&data_dir)?;
    fs::create_dir_all(&out_dir)?;

    let band_grouping = args.band_grouping || file.bool("band_grouping")?.unwrap_or(false);
    let merge_labels = args.merge_labels || file.bool("merge_labels")?.unwrap_or(false);
    let workers = std::env::var("LCZLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1);

    // Each variant trains on identical splits with the identical seed; a
    // failed run becomes a table row, not a sweep abort.
    let run_variant = |variant: Variant| -> AblationRow {
        let label = variant_label(variant, band_grouping, merge_labels);
        let train_args = TrainArgs {
            data: Some(data_dir.clone()),
            variant: Some(variant.name().to_string()),
            band_grouping,
            merge_labels,
            alpha: None,
            epochs: args.epochs.or_else(|| file.usize("epochs").ok().flatten()),
            seed: args.seed.or_else(|| file.u64("seed").ok().flatten()),
            learning_rate: args
                .learning_rate
                .or_else(|| file.f64("learning_rate").ok().flatten()),
            batch_size: args
                .batch_size
                .or_else(|| file.usize("batch_size").ok().flatten()),
            out: Some(out_dir.join(&label)),
            common: CommonArgs { config: None },
        };
        let checksum = data.manifest.checksums.test.clone();
        match resolve_train(&train_args).and_then(|r| run_one(&r, &data)) {
            Ok(summary) => {
                let m = summary.test.as_ref().or(summary.validation.as_ref());
                AblationRow {
                    variant: label,
                    overall_accuracy: m.map(|r| r.overall_accuracy),
                    built_up_accuracy: m.map(|r| r.built_up_accuracy),
                    natural_accuracy: m.map(|r| r.natural_accuracy),
                    kappa: m.map(|r| r.kappa),
                    mcc: m.map(|r| r.mcc),
                    dataset_checksum: checksum,
                    status: "ok".into(),
                }
            }
            Err(e) => AblationRow {
                variant: label,
                overall_accuracy: None,
                built_up_accuracy: None,
                natural_accuracy: None,
                kappa: None,
                mcc: None,
                dataset_checksum: checksum,
                status: format!("error: {e}"),
            },
        }
    };

    let mut rows: Vec<AblationRow> = Vec::new();
    for wave in variants.chunks(workers.max(1)) {
        let wave_rows: Vec<AblationRow> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&variant| scope.spawn(move || run_variant(variant)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker")).collect()
        });
        rows.extend(wave_rows);
    }

    // Table 6 layout: best overall accuracy first, ties broken by name.
    rows.sort_by(|a, b| {
        b.overall_accuracy
            .unwrap_or(f64::NEG_INFINITY)
            .partial_cmp(&a.overall_accuracy.unwrap_or(f64::NEG_INFINITY))
            .unwrap()
            .then_with(|| a.variant.cmp(&b.variant))
    });
    let mut csv =
        String::from("variant,oa,oa_built_up,oa_natural,kappa,mcc,dataset_checksum,status\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.variant,
            fmt(row.overall_accuracy),
            fmt(row.built_up_accuracy),
            fmt(row.natural_accuracy),
            fmt(row.kappa),
            fmt(row.mcc),
            row.dataset_checksum,
            row.status
        ));
    }
    fs::write(out_dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

// ------------------------------------------------------------------- report

#[derive(Args, Clone)]
pub struct ReportArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "grid-width")]
    grid_width: Option<usize>,
    #[arg(long = "grid-height")]
    grid_height: Option<usize>,
    #[command(flatten)]
    common: CommonArgs,
}

const REPORT_KEYS: &[&str] = &["checkpoint", "data", "out", "grid_width", "grid_height"];

pub fn report(args: ReportArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref(), "report", REPORT_KEYS)?;
    let checkpoint_dir = args
        .checkpoint
        .clone()
        .or(file.string("checkpoint")?.map(PathBuf::from))
        .ok_or_else(|| Error::Config("report needs --checkpoint".into()))?;
    let data_dir = args
        .data
        .clone()
        .or(file.string("data")?.map(PathBuf::from))
        .ok_or_else(|| Error::Config("report needs --data".into()))?;
    let out_dir = args
        .out
        .clone()
        .or(file.string("out")?.map(PathBuf::from))
        .ok_or_else(|| Error::Config("report needs --out".into()))?;
    let width = args.grid_width.or(file.usize("grid_width")?).unwrap_or(20);
    let height = args.grid_height.or(file.usize("grid_height")?).unwrap_or(20);

    let data = load_dataset(&data_dir)?;
    let mut net = load_checkpoint(&checkpoint_dir)?;
    let space = net.spec.label_space;
    // The report never writes into the dataset directory.
    if same_path(&out_dir, &data_dir) {
        return Err(Error::Config(
            "report output directory must differ from the dataset directory".into(),
        ));
    }
    if space == LabelSpace::Original17 && net.spec.num_classes != data.manifest.num_classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but dataset has {}",
            net.spec.num_classes, data.manifest.num_classes
        )));
    }
    if space == LabelSpace::Merged8 && data.manifest.num_classes != 17 {
        return Err(Error::Config(format!(
            "merged-label checkpoint needs a 17-class dataset, got {}",
            data.manifest.num_classes
        )));
    }

    let cm = evaluate(&mut net, &data, &data.test, space)?;
    let metrics = build_report(&cm, space)?;

    let grid_patches: Vec<_> = data.test.iter().take(width * height).cloned().collect();
    let truths: Vec<usize> = grid_patches
        .iter()
        .map(|p| merge_label(usize::from(p.label), space))
        .collect::<Result<_>>()?;
    let normalized = data.normalized_split(&grid_patches);
    let mut preds = Vec::with_capacity(normalized.len());
    for chunk in normalized.chunks(64) {
        preds.extend(net.predict(chunk)?);
    }
    let preds = if net.spec.num_classes == 17 && space == LabelSpace::Merged8 {
        preds
            .into_iter()
            .map(|p| merge_label(p, space))
            .collect::<Result<_>>()?
    } else {
        preds
    };
    let grid = GridReport::new(width, height, &truths, &preds);

    fs::create_dir_all(&out_dir)?;
    fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    fs::write(out_dir.join("confusion.csv"), cm.to_csv())?;
    fs::write(out_dir.join("grid.csv"), grid.to_csv())?;
    write_pgm(&out_dir.join("grid_truth.pgm"), width, height, &grid.truth)?;
    write_pgm(
        &out_dir.join("grid_predicted.pgm"),
        width,
        height,
        &grid.predicted,
    )?;
    println!(
        "report for {}: OA {:.4}, kappa {:.4}, MCC {:.4} over {} test patches",
        checkpoint_dir.display(),
        metrics.overall_accuracy,
        metrics.kappa,
        metrics.mcc,
        metrics.total
    );
    Ok(())
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

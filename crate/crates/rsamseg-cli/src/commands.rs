//! The six command workflows. Each command is a plain function over its
//! argument struct so binaries and tests drive the exact same code path;
//! `main` only parses arguments and maps errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use ndarray::Array2;

use rsamseg_core::data::{
    discover_scenes, fewshot_subset, load_patch, synthetic_fixture, tile_scene, DatasetKind,
    DatasetManifest, PatchRecord, Provenance, SceneRecord, Split, TilePolicy,
};
use rsamseg_core::decoder::logits_to_mask;
use rsamseg_core::metrics::{aggregate, compute_metrics, confusion, AggregationMode, MetricsReport};
use rsamseg_core::model::{Model, ModelConfig};
use rsamseg_core::train::{evaluate, fit, EvalOutcome, TrainReport};

use crate::config::{claim_out_dir, resolve_path, RunConfig};
use crate::error::{CliError, Result};
use crate::plot;

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply for missing sections.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override the model and shuffle seeds from the config.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Directory all artifacts of this run are written into.
    #[arg(long)]
    pub out: PathBuf,

    /// Force seeded shuffling even if the config disables it.
    #[arg(long)]
    pub deterministic: bool,

    /// Reuse a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
}

impl CommonArgs {
    /// Load the config, apply shared overrides, and claim the output
    /// directory — the preamble every command runs. Commands that accept
    /// further overrides freeze the config themselves once those are in.
    fn begin(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply_common(self.seed, self.deterministic);
        claim_out_dir(&self.out, self.overwrite)?;
        Ok(cfg)
    }

    /// `begin` plus an immediate config snapshot, for commands whose
    /// configuration is final once the common flags are applied.
    fn begin_frozen(&self) -> Result<RunConfig> {
        let cfg = self.begin()?;
        cfg.freeze(&self.out)?;
        Ok(cfg)
    }
}

/// Overrides for the training section accepted by every training command.
#[derive(Debug, Clone, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub lr_max: Option<f64>,

    #[arg(long)]
    pub lr_min: Option<f64>,

    #[arg(long)]
    pub weight_decay: Option<f64>,

    /// Base directory relative manifest paths resolve against
    /// (falls back to the config, then the environment).
    #[arg(long)]
    pub data_root: Option<PathBuf>,

    /// Training manifest (overrides the config).
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,

    /// Evaluation manifest (overrides the config).
    #[arg(long)]
    pub eval_manifest: Option<PathBuf>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr_max {
            cfg.train.lr_max = v;
        }
        if let Some(v) = self.lr_min {
            cfg.train.lr_min = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.train.weight_decay = v;
        }
        if self.train_manifest.is_some() {
            cfg.data.train_manifest = self.train_manifest.clone();
        }
        if self.eval_manifest.is_some() {
            cfg.data.eval_manifest = self.eval_manifest.clone();
        }
    }

    /// Resolve the train and eval manifests against the data root,
    /// requiring both to be configured.
    fn manifests(&self, cfg: &RunConfig) -> Result<(DatasetManifest, DatasetManifest)> {
        let root = cfg.resolve_root(self.data_root.as_deref());
        let train = cfg.data.train_manifest.as_deref().ok_or_else(|| {
            CliError::usage("no training manifest: pass --train-manifest or set data.train_manifest")
        })?;
        let eval = cfg.data.eval_manifest.as_deref().ok_or_else(|| {
            CliError::usage("no evaluation manifest: pass --eval-manifest or set data.eval_manifest")
        })?;
        let train = DatasetManifest::load(&resolve_path(&root, train))?;
        let eval = DatasetManifest::load(&resolve_path(&root, eval))?;
        Ok((train, eval))
    }
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Dataset kind: inria, cloud38, sentinel2-field, deepglobe-road, or
    /// synthetic.
    #[arg(long)]
    pub kind: DatasetKind,

    /// Source directory holding the scene rasters (real datasets only).
    #[arg(long)]
    pub input: Option<PathBuf>,

    /// Patch side length scenes are tiled into (real datasets only).
    #[arg(long, default_value_t = 1024)]
    pub patch_size: usize,

    /// Fraction of scenes assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,

    /// Number of training patches to generate (synthetic only).
    #[arg(long, default_value_t = 8)]
    pub count: usize,

    /// Side length of generated patches (synthetic only).
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,

    /// Number of held-out patches to generate (synthetic only);
    /// defaults to a quarter of --count, at least one.
    #[arg(long)]
    pub test_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    pub scenes: usize,
    pub train_patches: usize,
    pub test_patches: usize,
    pub train_manifest: PathBuf,
    /// Absent when every scene landed in the training split.
    pub test_manifest: Option<PathBuf>,
}

pub fn cmd_prepare(args: &PrepareArgs) -> Result<PrepareSummary> {
    args.common.begin_frozen()?;
    let seed = args.common.seed.unwrap_or(0);
    let out = &args.common.out;
    match args.kind {
        DatasetKind::Synthetic => prepare_synthetic(args, seed, out),
        _ => prepare_scenes(args, seed, out),
    }
}

fn prepare_synthetic(args: &PrepareArgs, seed: u64, out: &Path) -> Result<PrepareSummary> {
    let test_count = args.test_count.unwrap_or_else(|| (args.count / 4).max(1));
    let train = synthetic_fixture(&out.join("train_data"), args.count, args.image_size, seed)?;
    let mut test = synthetic_fixture(
        &out.join("test_data"),
        test_count,
        args.image_size,
        seed.wrapping_add(1),
    )?;
    test.split = Split::Test;

    let train_path = out.join("train.jsonl");
    let test_path = out.join("test.jsonl");
    train.save(&train_path)?;
    test.save(&test_path)?;
    Ok(PrepareSummary {
        scenes: train.records.len() + test.records.len(),
        train_patches: train.records.len(),
        test_patches: test.records.len(),
        train_manifest: train_path,
        test_manifest: Some(test_path),
    })
}

fn prepare_scenes(args: &PrepareArgs, seed: u64, out: &Path) -> Result<PrepareSummary> {
    let input = args.input.as_deref().ok_or_else(|| {
        CliError::usage(format!(
            "--input is required for the {} dataset",
            args.kind.as_str()
        ))
    })?;
    if !(args.train_fraction > 0.0 && args.train_fraction <= 1.0) {
        return Err(CliError::usage(format!(
            "--train-fraction must lie in (0, 1], got {}",
            args.train_fraction
        )));
    }
    let scenes = discover_scenes(input, args.kind)?;

    // Scene-level split: a seeded shuffle, then the leading fraction trains.
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    let n_train = ((args.train_fraction * scenes.len() as f64).ceil() as usize)
        .clamp(1, scenes.len());
    let mut train_ids: Vec<usize> = order[..n_train].to_vec();
    let mut test_ids: Vec<usize> = order[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();

    let tile = |ids: &[usize]| -> Result<Vec<PatchRecord>> {
        let spec = args.kind.band_spec();
        let mut records = Vec::new();
        for &i in ids {
            let scene: &SceneRecord = &scenes[i];
            records.extend(tile_scene(scene, args.patch_size, TilePolicy::InwardShift, &spec)?);
        }
        Ok(records)
    };

    let train = DatasetManifest {
        kind: args.kind,
        split: Split::Train,
        provenance: Provenance { seed, fraction: 1.0 },
        records: tile(&train_ids)?,
    };
    let train_path = out.join("train.jsonl");
    train.save(&train_path)?;

    let test_records = tile(&test_ids)?;
    let test_manifest = if test_records.is_empty() {
        None
    } else {
        let test = DatasetManifest {
            kind: args.kind,
            split: Split::Test,
            provenance: Provenance { seed, fraction: 1.0 },
            records: test_records,
        };
        let test_path = out.join("test.jsonl");
        test.save(&test_path)?;
        Some(test_path)
    };

    Ok(PrepareSummary {
        scenes: scenes.len(),
        train_patches: train.records.len(),
        test_patches: test_manifest
            .as_deref()
            .map(|p| DatasetManifest::load(p).map(|m| m.records.len()))
            .transpose()?
            .unwrap_or(0),
        train_manifest: train_path,
        test_manifest,
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub report: TrainReport,
    pub final_loss: f64,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut cfg = args.common.begin()?;
    args.overrides.apply(&mut cfg);
    cfg.train.validate()?;
    let (train, eval) = args.overrides.manifests(&cfg)?;
    cfg.freeze(&args.common.out)?;

    let mut model = Model::<f32>::build(cfg.model.clone())?;
    let report = run_fit(&mut model, &train, &eval, &cfg, &args.common.out)?;
    let final_loss = *report.epoch_loss.last().unwrap_or(&f64::NAN);
    Ok(TrainSummary { report, final_loss })
}

/// Train and write the standard artifacts (CSV curves and charts) into
/// `out`; shared by the train, ablate, and few-shot commands.
fn run_fit(
    model: &mut Model<f32>,
    train: &DatasetManifest,
    eval: &DatasetManifest,
    cfg: &RunConfig,
    out: &Path,
) -> Result<TrainReport> {
    let report = fit(model, train, eval, &cfg.train, out)?;
    fs::write(out.join("loss.csv"), report.loss_csv())?;
    fs::write(out.join("evals.csv"), report.eval_csv())?;
    let loss_series = [plot::Series {
        label: "loss".to_string(),
        points: report
            .epoch_loss
            .iter()
            .enumerate()
            .map(|(i, &l)| ((i + 1) as f64, l))
            .collect(),
    }];
    plot::line_chart(&out.join("loss.png"), "TRAINING LOSS", "EPOCH", &loss_series)?;
    if !report.evals.is_empty() {
        let series = [plot::Series {
            label: "jaccard".to_string(),
            points: report
                .evals
                .iter()
                .map(|p| (p.epoch as f64, p.micro.jaccard))
                .collect(),
        }];
        plot::line_chart(&out.join("evals.png"), "JACCARD (MICRO)", "EPOCH", &series)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Model snapshot to score.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Directory of externally produced masks to score instead of a model:
    /// one `{scene}_{row}_{col}.png` per manifest record, values in {0, 255}.
    #[arg(long)]
    pub predictions: Option<PathBuf>,

    /// Manifest of labeled patches to score against.
    #[arg(long)]
    pub manifest: PathBuf,

    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,

    /// Base directory a relative --manifest resolves against.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub micro: MetricsReport,
    pub macro_: MetricsReport,
    pub images: usize,
    pub csv_path: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalSummary> {
    let cfg = args.common.begin_frozen()?;
    let root = cfg.resolve_root(args.data_root.as_deref());
    let manifest = DatasetManifest::load(&resolve_path(&root, &args.manifest))?;

    let outcome = match (&args.checkpoint, &args.predictions) {
        (Some(ckpt), None) => {
            let (model, _) = Model::<f32>::load_checkpoint(ckpt)?;
            evaluate(&model, &manifest, args.batch_size)?
        }
        (None, Some(dir)) => score_prediction_dir(dir, &manifest)?,
        _ => {
            return Err(CliError::usage(
                "pass exactly one of --checkpoint or --predictions".to_string(),
            ))
        }
    };

    let csv_path = args.common.out.join("eval.csv");
    fs::write(&csv_path, eval_outcome_csv(&outcome)?)?;
    let micro = outcome.micro;
    plot::bar_chart(
        &args.common.out.join("eval.png"),
        "METRICS (MICRO)",
        &MetricsReport::CSV_HEADER
            .split(',')
            .map(str::to_string)
            .collect::<Vec<_>>(),
        &[
            micro.jaccard,
            micro.precision,
            micro.recall,
            micro.specificity,
            micro.f1,
            micro.overall_accuracy,
            micro.miou,
        ],
    )?;
    Ok(EvalSummary {
        micro,
        macro_: outcome.macro_,
        images: outcome.per_image.len(),
        csv_path,
    })
}

/// Score masks produced outside this tool. Every record must have a mask;
/// all missing ids are reported at once so one pass fixes the set.
fn score_prediction_dir(dir: &Path, manifest: &DatasetManifest) -> Result<EvalOutcome> {
    manifest.validate()?;
    let mut missing = Vec::new();
    for record in &manifest.records {
        if !dir.join(format!("{}.png", record.file_stem())).exists() {
            missing.push(record.key());
        }
    }
    if !missing.is_empty() {
        return Err(CliError::data(format!(
            "{} of {} predictions missing under {}: {}",
            missing.len(),
            manifest.records.len(),
            dir.display(),
            missing.join(", ")
        )));
    }

    let mut per_image = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let path = dir.join(format!("{}.png", record.file_stem()));
        let pred = load_mask(&path, record.size)?;
        let (_, gt) = load_patch(record)?;
        let counts = confusion(&pred.into_dyn(), &gt.into_dyn())?;
        per_image.push((record.key(), counts));
    }
    let counts: Vec<_> = per_image.iter().map(|(_, c)| *c).collect();
    Ok(EvalOutcome {
        micro: aggregate(&counts, AggregationMode::Micro)?,
        macro_: aggregate(&counts, AggregationMode::Macro)?,
        per_image,
    })
}

/// Read a `{0, 255}` mask PNG into a binary array, validating size and
/// values.
fn load_mask(path: &Path, size: usize) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| CliError::data(format!("cannot read mask {}: {e}", path.display())))?
        .to_luma8();
    if (img.width() as usize, img.height() as usize) != (size, size) {
        return Err(CliError::data(format!(
            "mask {} is {}x{}, expected {size}x{size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let mut out = Array2::<u8>::zeros((size, size));
    for (x, y, pixel) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = match pixel.0[0] {
            0 => 0,
            255 => 1,
            other => {
                return Err(CliError::data(format!(
                    "mask {} holds value {other}; masks must use {{0, 255}}",
                    path.display()
                )))
            }
        };
    }
    Ok(out)
}

/// Per-image metric rows followed by micro and macro summary rows.
fn eval_outcome_csv(outcome: &EvalOutcome) -> Result<String> {
    let mut out = format!("id,{}\n", MetricsReport::CSV_HEADER);
    for (key, counts) in &outcome.per_image {
        out.push_str(&format!("{key},{}\n", compute_metrics(counts)?.csv_row()));
    }
    out.push_str(&format!("micro,{}\n", outcome.micro.csv_row()));
    out.push_str(&format!("macro,{}\n", outcome.macro_.csv_row()));
    Ok(out)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Clone)]
pub struct AblateRow {
    pub variant: &'static str,
    pub params_total: usize,
    pub params_trainable: usize,
    pub final_loss: f64,
    pub micro: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct AblateSummary {
    pub rows: Vec<AblateRow>,
    pub csv_path: PathBuf,
}

/// The ablation grid: the full model and one variant per disabled feature.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let mut no_fpe = base.clone();
    no_fpe.use_fpe = false;
    let mut no_fhfc = base.clone();
    no_fhfc.use_fhfc = false;
    let mut no_adapter_scale = base.clone();
    no_adapter_scale.use_adapter_scale = false;
    vec![
        ("full", base.clone()),
        ("no_fpe", no_fpe),
        ("no_fhfc", no_fhfc),
        ("no_adapter_scale", no_adapter_scale),
    ]
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<AblateSummary> {
    let mut cfg = args.common.begin()?;
    args.overrides.apply(&mut cfg);
    cfg.train.validate()?;
    let (train, eval) = args.overrides.manifests(&cfg)?;
    cfg.freeze(&args.common.out)?;

    let mut rows = Vec::new();
    for (variant, model_cfg) in ablation_variants(&cfg.model) {
        let dir = args.common.out.join(variant);
        fs::create_dir_all(&dir)?;
        let mut model = Model::<f32>::build(model_cfg)?;
        let registry = model.registry();
        let mut run_cfg = cfg.clone();
        run_cfg.model = model.config().clone();
        let report = run_fit(&mut model, &train, &eval, &run_cfg, &dir)?;
        let outcome = evaluate(&model, &eval, cfg.train.batch_size)?;
        rows.push(AblateRow {
            variant,
            params_total: registry.total_elements(),
            params_trainable: registry.trainable_elements(),
            final_loss: *report.epoch_loss.last().unwrap_or(&f64::NAN),
            micro: outcome.micro,
        });
    }

    let mut csv = format!(
        "variant,params_total,params_trainable,final_loss,{}\n",
        MetricsReport::CSV_HEADER
    );
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.variant,
            row.params_total,
            row.params_trainable,
            row.final_loss,
            row.micro.csv_row()
        ));
    }
    let csv_path = args.common.out.join("ablate.csv");
    fs::write(&csv_path, csv)?;
    plot::bar_chart(
        &args.common.out.join("ablate.png"),
        "JACCARD (MICRO) BY VARIANT",
        &rows.iter().map(|r| r.variant.to_string()).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.micro.jaccard).collect::<Vec<_>>(),
    )?;
    Ok(AblateSummary { rows, csv_path })
}

// ---------------------------------------------------------------------------
// fewshot
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct FewshotArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    #[command(flatten)]
    pub overrides: TrainOverrides,

    /// Training-set fractions to sweep, each in (0, 1].
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.10, 0.30, 0.70])]
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FewshotRow {
    pub fraction: f64,
    pub subset_size: usize,
    pub final_loss: f64,
    pub micro: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct FewshotSummary {
    pub rows: Vec<FewshotRow>,
    pub csv_path: PathBuf,
}

pub fn cmd_fewshot(args: &FewshotArgs) -> Result<FewshotSummary> {
    let mut cfg = args.common.begin()?;
    args.overrides.apply(&mut cfg);
    cfg.train.validate()?;
    if args.fractions.is_empty() {
        return Err(CliError::usage("--fractions must name at least one value".to_string()));
    }
    let (train, eval) = args.overrides.manifests(&cfg)?;
    cfg.freeze(&args.common.out)?;

    let mut rows = Vec::new();
    for &fraction in &args.fractions {
        // One shared subset seed across fractions keeps the subsets nested:
        // every smaller fraction is contained in every larger one.
        let subset = fewshot_subset(&train, fraction, cfg.train.seed)?;
        let ids: Vec<String> = subset.records.iter().map(PatchRecord::key).collect();
        fs::write(
            args.common.out.join(format!("subset_{fraction}.ids")),
            ids.join("\n") + "\n",
        )?;

        let dir = args.common.out.join(format!("frac_{fraction}"));
        fs::create_dir_all(&dir)?;
        let mut model = Model::<f32>::build(cfg.model.clone())?;
        let report = run_fit(&mut model, &subset, &eval, &cfg, &dir)?;
        let outcome = evaluate(&model, &eval, cfg.train.batch_size)?;
        rows.push(FewshotRow {
            fraction,
            subset_size: subset.records.len(),
            final_loss: *report.epoch_loss.last().unwrap_or(&f64::NAN),
            micro: outcome.micro,
        });
    }

    let mut csv = format!(
        "fraction,subset_size,final_loss,{}\n",
        MetricsReport::CSV_HEADER
    );
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.fraction,
            row.subset_size,
            row.final_loss,
            row.micro.csv_row()
        ));
    }
    let csv_path = args.common.out.join("fewshot.csv");
    fs::write(&csv_path, csv)?;
    let mut points: Vec<(f64, f64)> = rows.iter().map(|r| (r.fraction, r.micro.jaccard)).collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    plot::line_chart(
        &args.common.out.join("fewshot.png"),
        "JACCARD (MICRO) BY TRAINING FRACTION",
        "FRACTION",
        &[plot::Series {
            label: "jaccard".to_string(),
            points,
        }],
    )?;
    Ok(FewshotSummary { rows, csv_path })
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Model snapshot to predict with.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Manifest of patches to predict masks for.
    #[arg(long)]
    pub manifest: PathBuf,

    #[arg(long, default_value_t = 2)]
    pub batch_size: usize,

    /// Also write side-by-side input / ground-truth / prediction panels.
    #[arg(long)]
    pub overlays: bool,

    /// Base directory a relative --manifest resolves against.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PredictSummary {
    pub masks: usize,
    pub masks_dir: PathBuf,
    pub overlays_dir: Option<PathBuf>,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<PredictSummary> {
    let cfg = args.common.begin_frozen()?;
    if args.batch_size == 0 {
        return Err(CliError::usage("batch size must be positive".to_string()));
    }
    let root = cfg.resolve_root(args.data_root.as_deref());
    let manifest = DatasetManifest::load(&resolve_path(&root, &args.manifest))?;
    manifest.validate()?;
    let (model, _) = Model::<f32>::load_checkpoint(&args.checkpoint)?;

    let masks_dir = args.common.out.join("masks");
    fs::create_dir_all(&masks_dir)?;
    let overlays_dir = args.overlays.then(|| args.common.out.join("overlays"));
    if let Some(dir) = &overlays_dir {
        fs::create_dir_all(dir)?;
    }

    for chunk in manifest.records.chunks(args.batch_size) {
        let (images, _) = rsamseg_core::data::load_batch::<f32>(chunk)?;
        let logits = model.predict_logits(&images)?;
        let masks = logits_to_mask(&logits, 0.5);
        for (bi, record) in chunk.iter().enumerate() {
            let n = record.size;
            let mut img = image::GrayImage::new(n as u32, n as u32);
            for y in 0..n {
                for x in 0..n {
                    img.put_pixel(x as u32, y as u32, image::Luma([masks[[bi, 0, y, x]] * 255]));
                }
            }
            let mask_path = masks_dir.join(format!("{}.png", record.file_stem()));
            img.save(&mask_path)?;
            if let Some(dir) = &overlays_dir {
                let panel = overlay_panel(record, &img)?;
                panel.save(dir.join(format!("{}_overlay.png", record.file_stem())))?;
            }
        }
    }
    Ok(PredictSummary {
        masks: manifest.records.len(),
        masks_dir,
        overlays_dir,
    })
}

/// Compose `[input | ground truth | prediction]` with 2 px separators.
fn overlay_panel(record: &PatchRecord, pred: &image::GrayImage) -> Result<image::RgbImage> {
    let (raw, gt) = load_patch(record)?;
    let n = record.size as u32;
    let gap = 2u32;
    let mut panel = image::RgbImage::from_pixel(3 * n + 2 * gap, n, image::Rgb([255, 255, 255]));
    let clamp = |v: f64| v.clamp(0.0, 255.0) as u8;
    for y in 0..n {
        for x in 0..n {
            let (yy, xx) = (y as usize, x as usize);
            panel.put_pixel(
                x,
                y,
                image::Rgb([
                    clamp(raw[[0, yy, xx]]),
                    clamp(raw[[1, yy, xx]]),
                    clamp(raw[[2, yy, xx]]),
                ]),
            );
            let g = gt[[yy, xx]] * 255;
            panel.put_pixel(n + gap + x, y, image::Rgb([g, g, g]));
            let p = pred.get_pixel(x, y).0[0];
            panel.put_pixel(2 * (n + gap) + x, y, image::Rgb([p, p, p]));
        }
    }
    Ok(panel)
}

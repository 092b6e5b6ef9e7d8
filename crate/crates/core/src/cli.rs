//! Command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval;
use crate::explainer::{explainer_error_rate, ExplainerNet};
use crate::imageio;
use crate::performer::{error_rate, train_performer, PerformerNet, PerformerTrainConfig};
use crate::synth::{generate_dataset, Dataset, SynthSample, SynthSpec};
use crate::tensor::Tensor;
use crate::trainer::{CategoryMode, FilterGradient, TrainConfig, TrainHistory, TrainMode, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "explainer",
    version,
    about = "Distill a CNN into an explainer with part-localizing filters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic part-structured dataset.
    GenData(GenDataArgs),
    /// Train the performer classifier.
    TrainPerformer(TrainPerformerArgs),
    /// Train an explainer for a performer.
    TrainExplainer(TrainExplainerArgs),
    /// Location instability and classification reports.
    Eval(EvalArgs),
    /// Heatmaps and receptive-field overlays for selected filters.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_train: Option<usize>,
    #[arg(long)]
    pub num_test: Option<usize>,
    /// Number of object categories (label 0 is background).
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainPerformerArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Multi-category classification (more than one object category).
    #[arg(long)]
    pub multi: bool,
    /// Metrics CSV, default `<out>.metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainExplainerArgs {
    #[arg(long)]
    pub performer: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Reconstruction weight of fc-dec-1 (reconstruction mode only).
    #[arg(long)]
    pub lambda_fc1: Option<f64>,
    /// Reconstruction weight of fc-dec-2 (reconstruction mode only).
    #[arg(long)]
    pub lambda_fc2: Option<f64>,
    /// Replace the reconstruction loss with the classification loss.
    #[arg(long)]
    pub with_cls_loss: bool,
    /// Estimate norm-layer magnitudes from positive images only.
    #[arg(long)]
    pub positive_only_alpha: bool,
    /// Use the exact filter-loss gradient instead of the approximation.
    #[arg(long)]
    pub exact_filter_grad: bool,
    /// Metrics CSV, default `<out>.metrics.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub performer: PathBuf,
    #[arg(long)]
    pub explainer: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub explainer: PathBuf,
    #[arg(long)]
    pub performer: PathBuf,
    /// PPM image.
    #[arg(long)]
    pub image: PathBuf,
    /// Comma-separated conv-interp-2 filter ids.
    #[arg(long, value_delimiter = ',')]
    pub filters: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub const GEN_DATA_KEYS: &[&str] = &["seed", "num-train", "num-test", "categories"];
pub const TRAIN_PERFORMER_KEYS: &[&str] = &["epochs", "lr", "seed", "batch-size", "multi"];
pub const TRAIN_EXPLAINER_KEYS: &[&str] = &[
    "eta",
    "epochs",
    "seed",
    "lr",
    "batch-size",
    "lambda-fc1",
    "lambda-fc2",
    "with-cls-loss",
    "positive-only-alpha",
    "exact-filter-grad",
];

/// Columns of the performer metrics CSV.
pub const PERFORMER_METRICS_HEADER: &str = "epoch,lr,loss,train_accuracy";
/// Columns of the explainer metrics CSV.
pub const EXPLAINER_METRICS_HEADER: &str =
    "epoch,recon_fc1,recon_fc2,neg_log_p,filter_loss_total,total,cross_entropy,p,mean_lambda_interp1,mean_lambda_interp2";

fn load_config(path: Option<&Path>, keys: &[&str]) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p, keys),
        None => Ok(RunConfig::default()),
    }
}

fn metrics_path(out: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".metrics.csv");
        PathBuf::from(s)
    })
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{} does not exist", path.display())));
    }
    Ok(())
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::Config(format!(
            "output directory {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

pub fn load_performer(path: &Path) -> Result<PerformerNet> {
    checkpoint::performer_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn load_explainer(path: &Path) -> Result<ExplainerNet> {
    checkpoint::explainer_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::TrainPerformer(a) => cmd_train_performer(&a),
        Command::TrainExplainer(a) => cmd_train_explainer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Visualize(a) => cmd_visualize(&a),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), GEN_DATA_KEYS)?;
    let seed = cfg.resolve(a.seed, "seed", 42)?;
    let n_train = cfg.resolve(a.num_train, "num-train", 2000)?;
    let n_test = cfg.resolve(a.num_test, "num-test", 400)?;
    let k = cfg.resolve(a.categories, "categories", 1)?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("num-train and num-test must be positive".into()));
    }
    let spec = SynthSpec::with_categories(k, seed)?;
    let data = generate_dataset(&spec, n_train, n_test)?;
    data.save(&a.out, &spec)?;
    info!(
        "wrote {} train and {} test images to {}",
        n_train,
        n_test,
        a.out.display()
    );
    Ok(())
}

pub fn cmd_train_performer(a: &TrainPerformerArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), TRAIN_PERFORMER_KEYS)?;
    require_dir(&a.data)?;
    require_parent(&a.out)?;
    let defaults = PerformerTrainConfig::default();
    let tc = PerformerTrainConfig {
        epochs: cfg.resolve(a.epochs, "epochs", defaults.epochs)?,
        lr: cfg.resolve(a.lr, "lr", defaults.lr)?,
        seed: cfg.resolve(a.seed, "seed", defaults.seed)?,
        batch_size: cfg.resolve(a.batch_size, "batch-size", defaults.batch_size)?,
        ..defaults
    };
    let multi = cfg.switch(a.multi, "multi")?;
    let data = Dataset::load(&a.data)?;
    match (multi, data.num_labels) {
        (false, 2) => {}
        (true, n) if n > 2 => {}
        (m, n) => {
            return Err(Error::Config(format!(
                "dataset has {} object categories, which conflicts with {}",
                n - 1,
                if m { "--multi" } else { "single-category training" }
            )))
        }
    }
    let (net, history) = train_performer(&data.train, data.num_labels, &tc)?;
    let hash = checkpoint::config_hash(&format!("{tc:?} multi={multi}"));
    checkpoint::performer_to_checkpoint(&net, tc.seed, hash).save(&a.out)?;
    let mut csv = format!("{PERFORMER_METRICS_HEADER}\n");
    for e in &history {
        let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.lr, e.loss, e.train_accuracy);
    }
    write(&metrics_path(&a.out, a.metrics.as_ref()), &csv)?;
    info!("performer test error {:.4}", error_rate(&net, &data.test)?);
    Ok(())
}

/// Resolves explainer training settings from flags and an optional file.
pub fn explainer_train_config(a: &TrainExplainerArgs, num_labels: usize) -> Result<TrainConfig> {
    let cfg = load_config(a.config.as_deref(), TRAIN_EXPLAINER_KEYS)?;
    let d = TrainConfig::default();
    let with_cls = cfg.switch(a.with_cls_loss, "with-cls-loss")?;
    let l1: Option<f64> = a.lambda_fc1.map_or_else(|| cfg.get("lambda-fc1"), |v| Ok(Some(v)))?;
    let l2: Option<f64> = a.lambda_fc2.map_or_else(|| cfg.get("lambda-fc2"), |v| Ok(Some(v)))?;
    if with_cls && (l1.is_some() || l2.is_some()) {
        return Err(Error::Config(
            "--with-cls-loss conflicts with reconstruction weights --lambda-fc1/--lambda-fc2".into(),
        ));
    }
    let lambda_l = match (l1, l2) {
        (None, None) => None,
        (Some(a), Some(b)) => Some((a, b)),
        _ => return Err(Error::Config("set both lambda-fc1 and lambda-fc2 or neither".into())),
    };
    let mode = if with_cls {
        TrainMode::Classification
    } else {
        TrainMode::Reconstruction
    };
    let tc = TrainConfig {
        eta: cfg.resolve(a.eta, "eta", d.eta)?,
        lambda_l,
        lr: cfg.resolve(a.lr, "lr", TrainConfig::default_lr(mode))?,
        epochs: cfg.resolve(a.epochs, "epochs", d.epochs)?,
        batch_size: cfg.resolve(a.batch_size, "batch-size", d.batch_size)?,
        seed: cfg.resolve(a.seed, "seed", d.seed)?,
        mode,
        category_mode: if num_labels > 2 {
            CategoryMode::Multi
        } else {
            CategoryMode::Single
        },
        filter_gradient: if cfg.switch(a.exact_filter_grad, "exact-filter-grad")? {
            FilterGradient::Exact
        } else {
            FilterGradient::Approximate
        },
        positive_only_alpha: cfg.switch(a.positive_only_alpha, "positive-only-alpha")?,
        ..d
    };
    tc.validate()?;
    Ok(tc)
}

pub fn explainer_metrics_csv(history: &TrainHistory) -> String {
    let mut csv = format!("{EXPLAINER_METRICS_HEADER}\n");
    for e in &history.epochs {
        let b = &e.breakdown;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            b.recon_fc1,
            b.recon_fc2,
            b.neg_log_p,
            b.filter_loss_total,
            b.total,
            b.cross_entropy,
            e.p,
            e.mean_lambda_interp1,
            e.mean_lambda_interp2
        );
    }
    csv
}

pub fn cmd_train_explainer(a: &TrainExplainerArgs) -> Result<()> {
    require_file(&a.performer)?;
    require_dir(&a.data)?;
    require_parent(&a.out)?;
    let performer = load_performer(&a.performer)?;
    let data = Dataset::load(&a.data)?;
    if data.num_labels != performer.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} labels but the performer classifies {}",
            data.num_labels, performer.config.num_classes
        )));
    }
    let tc = explainer_train_config(a, data.num_labels)?;
    let hash = checkpoint::config_hash(&format!("{tc:?}"));
    let (net, history) = Trainer::new(&performer, &data.train, tc.clone())?.train()?;
    checkpoint::explainer_to_checkpoint(&net, tc.seed, hash).save(&a.out)?;
    write(
        &metrics_path(&a.out, a.metrics.as_ref()),
        &explainer_metrics_csv(&history),
    )?;
    Ok(())
}

/// `[L, L, D]` maps of the three compared layers for every sample.
pub struct LayerMaps {
    pub explainer_interp2: Vec<Tensor>,
    pub performer_top: Vec<Tensor>,
    pub performer_target: Vec<Tensor>,
}

pub fn collect_layer_maps(
    performer: &PerformerNet,
    explainer: &ExplainerNet,
    samples: &[SynthSample],
) -> Result<LayerMaps> {
    let mut m = LayerMaps {
        explainer_interp2: Vec::with_capacity(samples.len()),
        performer_top: Vec::with_capacity(samples.len()),
        performer_target: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let d = performer.extract_features(&s.image)?;
        let out = explainer.forward_values(&d.target)?;
        m.explainer_interp2.push(out.interp2_masked);
        m.performer_top.push(d.top);
        m.performer_target.push(d.target);
    }
    Ok(m)
}

/// Names and reports of the three-way instability comparison.
pub fn instability_comparison(
    performer: &PerformerNet,
    explainer: &ExplainerNet,
    samples: &[SynthSample],
) -> Result<Vec<(&'static str, eval::InstabilityReport)>> {
    let maps = collect_layer_maps(performer, explainer, samples)?;
    let refs: Vec<&SynthSample> = samples.iter().collect();
    let geom = performer.config.target_geometry();
    let n = performer.config.num_classes;
    let size = performer.config.image_size;
    Ok(vec![
        (
            "explainer_conv_interp_2",
            eval::layer_instability(&maps.explainer_interp2, &refs, n, geom, size)?,
        ),
        (
            "performer_top_conv",
            eval::layer_instability(&maps.performer_top, &refs, n, geom, size)?,
        ),
        (
            "performer_target",
            eval::layer_instability(&maps.performer_target, &refs, n, geom, size)?,
        ),
    ])
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    require_file(&a.performer)?;
    require_file(&a.explainer)?;
    require_dir(&a.data)?;
    let performer = load_performer(&a.performer)?;
    let explainer = load_explainer(&a.explainer)?;
    let data = Dataset::load(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut summary = String::from("layer,instability\n");
    for (name, report) in instability_comparison(&performer, &explainer, &data.test)? {
        eval::export_report(&report, &a.out.join(format!("instability_{name}.csv")))?;
        let _ = writeln!(summary, "{name},{}", report.overall);
    }
    write(&a.out.join("instability_summary.csv"), &summary)?;
    let perf_err = error_rate(&performer, &data.test)?;
    let expl_err = explainer_error_rate(&performer, &explainer, &data.test)?;
    write(
        &a.out.join("classification.csv"),
        &format!(
            "model,test_error\nperformer,{perf_err}\nexplainer,{expl_err}\ndelta,{}\n",
            expl_err - perf_err
        ),
    )?;
    Ok(())
}

pub fn cmd_visualize(a: &VisualizeArgs) -> Result<()> {
    require_file(&a.performer)?;
    require_file(&a.explainer)?;
    require_file(&a.image)?;
    let performer = load_performer(&a.performer)?;
    let explainer = load_explainer(&a.explainer)?;
    let image = imageio::read_ppm(&a.image)?;
    let d = explainer.config.channels;
    if let Some(f) = a.filters.iter().find(|&&f| f >= d) {
        return Err(Error::Config(format!("filter {f} out of range, explainer has {d}")));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let dump = performer.extract_features(&image)?;
    let out = explainer.forward_values(&dump.target)?;
    let geom = performer.config.target_geometry();
    let size = performer.config.image_size;
    for &f in &a.filters {
        let map = eval::normalize_unit(&out.interp2_masked.channel(f));
        eval::render_heatmap(
            &map,
            Some(&image),
            &a.out.join(format!("filter_{f:02}.pgm")),
            Some(&a.out.join(format!("filter_{f:02}_overlay.ppm"))),
        )?;
        let rf = eval::round_rf_overlay(&out.interp2_masked.channel(f), geom, geom.stride, size)?;
        imageio::write_ppm(
            &a.out.join(format!("filter_{f:02}_rf.ppm")),
            &eval::overlay(&rf, &image),
        )?;
    }
    let class = performer.head_logits(&out.fc_dec_2)?.argmax();
    let cam = eval::explainer_grad_cam(&explainer, &dump.target, class)?;
    eval::render_heatmap(
        &cam,
        Some(&image),
        &a.out.join("gradcam.pgm"),
        Some(&a.out.join("gradcam_overlay.ppm")),
    )?;
    Ok(())
}

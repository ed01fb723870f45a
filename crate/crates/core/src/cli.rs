//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::conv::ConvNet;
use crate::correlation::{unary_costs, Sign};
use crate::crf::row_min_marginals;
use crate::error::{Error, Result};
use crate::eval::{colorize, sublabel_refine, EvalReport, DEFAULT_THRESHOLDS};
use crate::pairwise::PenaltyParams;
use crate::stereo_io::{
    load_sample, read_ground_truth, read_manifest, read_pfm, synth_random_dot, write_pfm, write_pgm, write_ppm,
    ManifestEntry, PfmMap, StereoSample, SynthParams,
};
use crate::training::{
    dataset_cross_entropy, grid_search_crf, train_joint, train_unary, CrfGrid, JointStage, ModelParams, PairwiseMode,
    TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "stereo-crf", version, about = "CNN + CRF stereo matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic random-dot dataset and its manifest.
    Synth(SynthArgs),
    /// Train the feature network with pixel-wise cross-entropy.
    TrainUnary(TrainUnaryArgs),
    /// Structured-SVM training of the full model.
    TrainJoint(TrainJointArgs),
    /// Predict disparity maps.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SignArg {
    Positive,
    Negative,
}

impl From<SignArg> for Sign {
    fn from(s: SignArg) -> Self {
        match s {
            SignArg::Positive => Sign::Positive,
            SignArg::Negative => Sign::Negative,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Seed of the first pair; pair `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 48)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    labels: usize,
    #[arg(long, default_value_t = 3)]
    shapes: usize,
    #[arg(long, value_enum, default_value = "positive")]
    sign: SignArg,
}

#[derive(Args, Debug)]
struct TrainCommon {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    labels: usize,
    /// Output checkpoint, rewritten after every epoch.
    #[arg(long)]
    out: PathBuf,
    /// `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Per-epoch (unary) or per-step (joint) CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Validation set; the best epoch is also written to `<out>.best`.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainUnaryArgs {
    #[command(flatten)]
    common: TrainCommon,
    #[arg(long)]
    coord_features: bool,
    #[arg(long, value_enum, default_value = "positive")]
    sign: SignArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Contrast,
    Learned,
}

#[derive(Args, Debug)]
struct TrainJointArgs {
    #[command(flatten)]
    common: TrainCommon,
    /// Starting checkpoint (usually from train-unary).
    #[arg(long)]
    init: PathBuf,
    #[arg(long, value_enum, default_value = "contrast")]
    stage: StageArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PairwiseArg {
    Off,
    Contrast,
    Learned,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, requires_all = ["right", "out"], conflicts_with = "manifest")]
    left: Option<PathBuf>,
    #[arg(long)]
    right: Option<PathBuf>,
    /// Output PFM; the colour image goes next to it with extension `.ppm`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Batch mode: predict every pair of the manifest into `--out-dir`.
    #[arg(long, requires = "out_dir")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    labels: usize,
    #[arg(long, default_value_t = 5)]
    crf_iters: usize,
    /// Defaults to the checkpoint's mode.
    #[arg(long, value_enum)]
    pairwise: Option<PairwiseArg>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long)]
    sublabel: bool,
    #[arg(long)]
    coord_features: bool,
    /// Defaults to the checkpoint's sign.
    #[arg(long, value_enum)]
    sign: Option<SignArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Table,
    Csv,
    Json,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory with `<left stem>.pfm` predictions.
    #[arg(long)]
    pred_dir: PathBuf,
    /// Score against the all-pixel ground truth (fourth manifest column).
    #[arg(long)]
    all_pixels: bool,
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
    thresholds: Vec<f64>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainUnary(a) => cmd_train_unary(a),
        Command::TrainJoint(a) => cmd_train_joint(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir)?;
    let mut manifest = String::new();
    for i in 0..a.count {
        let params = SynthParams {
            seed: a.seed + i as u64,
            height: a.height,
            width: a.width,
            labels: a.labels,
            shapes: a.shapes,
            sign: a.sign.into(),
        };
        let s = synth_random_dot(&params)?;
        let names = [
            format!("left_{i:04}.pgm"),
            format!("right_{i:04}.pgm"),
            format!("gt_{i:04}.pfm"),
            format!("gtall_{i:04}.pfm"),
        ];
        fs::write(a.out_dir.join(&names[0]), write_pgm(&s.left))?;
        fs::write(a.out_dir.join(&names[1]), write_pgm(&s.right))?;
        let gt = s.gt.as_ref().expect("synthetic pairs carry ground truth");
        let gt_all = s.gt_all.as_ref().expect("synthetic pairs carry ground truth");
        fs::write(a.out_dir.join(&names[2]), write_pfm(&PfmMap::from_ground_truth(gt)))?;
        fs::write(a.out_dir.join(&names[3]), write_pfm(&PfmMap::from_ground_truth(gt_all)))?;
        manifest.push_str(&names.join(" "));
        manifest.push('\n');
    }
    fs::write(a.out_dir.join("manifest.txt"), manifest)?;
    Ok(())
}

fn load_config(c: &TrainCommon) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_set(path: &Path, labels: usize) -> Result<Vec<StereoSample>> {
    let entries = read_manifest(path)?;
    if entries.is_empty() {
        return Err(Error::Config(format!("{}: empty manifest", path.display())));
    }
    entries.iter().map(|e| load_sample(e, labels)).collect()
}

fn mean_bad1(model: &ModelParams, set: &[StereoSample], crf_iters: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        let p = model.predict(s, crf_iters)?;
        let gt =
            s.gt.as_ref()
                .ok_or_else(|| Error::Config("validation pair without ground truth".into()))?;
        total += crate::eval::badx(&p.labeling.to_disparity(), gt, 1.0)?;
    }
    Ok(total / set.len() as f64)
}

fn best_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

/// Saves every epoch and tracks the best validation score.
struct EpochSaver<'a> {
    out: &'a Path,
    val: Option<Vec<StereoSample>>,
    crf_iters: usize,
    best: f64,
}

impl EpochSaver<'_> {
    fn save(&mut self, epoch: usize, model: &ModelParams) -> Result<()> {
        checkpoint::save(self.out, model)?;
        if let Some(val) = &self.val {
            let score = mean_bad1(model, val, self.crf_iters)?;
            eprintln!("epoch {epoch}: validation bad1 {score:.3}");
            if score < self.best {
                self.best = score;
                checkpoint::save(&best_path(self.out), model)?;
            }
        }
        Ok(())
    }
}

fn cmd_train_unary(a: TrainUnaryArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let train = load_set(&a.common.manifest, a.common.labels)?;
    let val = a
        .common
        .val_manifest
        .as_deref()
        .map(|p| load_set(p, a.common.labels))
        .transpose()?;
    let model = ModelParams::new_unary(train[0].left.channels, &cfg, a.coord_features, a.sign.into());
    let initial = dataset_cross_entropy(&model, &train)?;
    let mut saver = EpochSaver {
        out: &a.common.out,
        val,
        crf_iters: cfg.crf_iterations,
        best: f64::INFINITY,
    };
    let (model, report) = train_unary(&train, &cfg, model, |e, m| saver.save(e, m))?;
    checkpoint::save(&a.common.out, &model)?;
    if let Some(log) = &a.common.log {
        let mut csv = format!("epoch,cross_entropy\n0,{initial}\n");
        for (e, l) in report.epoch_losses.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", e + 1));
        }
        fs::write(log, csv)?;
    }
    eprintln!(
        "train-unary: cross-entropy {initial:.4} -> {:.4} over {} epochs",
        report.epoch_losses.last().copied().unwrap_or(initial),
        cfg.epochs
    );
    Ok(())
}

fn cmd_train_joint(a: TrainJointArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let train = load_set(&a.common.manifest, a.common.labels)?;
    let val = a
        .common
        .val_manifest
        .as_deref()
        .map(|p| load_set(p, a.common.labels))
        .transpose()?;
    let mut model = checkpoint::load(&a.init)?;
    let stage = match a.stage {
        StageArg::Contrast => JointStage::Contrast,
        StageArg::Learned => JointStage::Learned,
    };
    match stage {
        JointStage::Contrast => {
            if !matches!(model.mode, PairwiseMode::Contrast { .. }) {
                if cfg.grid_search {
                    let g = grid_search_crf(&model, &train, &CrfGrid::default(), cfg.crf_iterations)?;
                    eprintln!(
                        "grid search: alpha {} beta {} P1 {} P2 {} (bad1 {:.3})",
                        g.alpha, g.beta, g.penalty.p1, g.penalty.p2, g.bad1
                    );
                    model.mode = PairwiseMode::Contrast {
                        alpha: g.alpha,
                        beta: g.beta,
                    };
                    model.penalty = g.penalty;
                } else {
                    model.mode = PairwiseMode::Contrast { alpha: 1.0, beta: 1.0 };
                    model.penalty = PenaltyParams::new(0.1, 0.4);
                }
            }
        }
        JointStage::Learned => {
            if model.pairwise.is_none() {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
                model.pairwise = Some(ConvNet::pairwise(
                    model.unary.in_channels(),
                    cfg.pairwise_filters,
                    &mut rng,
                ));
            }
            if model.penalty.p2 == 0.0 {
                model.penalty = PenaltyParams::new(0.1, 0.4);
            }
            model.mode = PairwiseMode::Learned;
        }
    }
    let mut saver = EpochSaver {
        out: &a.common.out,
        val,
        crf_iters: cfg.crf_iterations,
        best: f64::INFINITY,
    };
    let (model, log) = train_joint(&train, &cfg, model, stage, |e, m| saver.save(e, m))?;
    checkpoint::save(&a.common.out, &model)?;
    if let Some(path) = &a.common.log {
        fs::write(path, log.to_csv())?;
    }
    eprintln!(
        "train-joint: {} steps, P1 {:.4} P2 {:.4}",
        log.entries.len(),
        model.penalty.p1,
        model.penalty.p2
    );
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "prediction".into())
}

fn predict_one(model: &ModelParams, sample: &StereoSample, a: &InferArgs, out: &Path) -> Result<()> {
    let pred = model.predict(sample, a.crf_iters)?;
    let disparity = if a.sublabel {
        let costs = match (&pred.problem, &pred.dual) {
            (Some(prob), Some(dual)) => row_min_marginals(prob, dual)?,
            _ => unary_costs(&pred.probabilities),
        };
        sublabel_refine(&costs, &pred.labeling)?
    } else {
        pred.labeling.to_disparity()
    };
    let (h, w) = (pred.labeling.height, pred.labeling.width);
    fs::write(out, write_pfm(&PfmMap::from_values(h, w, &disparity)))?;
    let color = colorize(&disparity, h, w, (sample.label_count - 1) as f64)?;
    fs::write(out.with_extension("ppm"), write_ppm(&color)?)?;
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let mut model = checkpoint::load(&a.checkpoint)?;
    if a.coord_features {
        model.coord_features = true;
    }
    if let Some(s) = a.sign {
        model.sign = s.into();
    }
    match a.pairwise {
        None => {}
        Some(PairwiseArg::Off) => model.mode = PairwiseMode::Off,
        Some(PairwiseArg::Contrast) => {
            if !matches!(model.mode, PairwiseMode::Contrast { .. }) {
                model.mode = PairwiseMode::Contrast {
                    alpha: a.alpha,
                    beta: a.beta,
                };
            }
        }
        Some(PairwiseArg::Learned) => {
            if model.pairwise.is_none() {
                return Err(Error::Config("checkpoint has no pairwise network".into()));
            }
            model.mode = PairwiseMode::Learned;
        }
    }

    match (&a.manifest, &a.left) {
        (Some(manifest), _) => {
            let dir = a.out_dir.as_ref().expect("clap enforces --out-dir");
            fs::create_dir_all(dir)?;
            for entry in read_manifest(manifest)? {
                let sample = load_sample(&entry, a.labels)?;
                predict_one(&model, &sample, &a, &dir.join(format!("{}.pfm", stem(&entry.left))))?;
            }
            Ok(())
        }
        (None, Some(left)) => {
            let entry = ManifestEntry {
                left: left.clone(),
                right: a.right.clone().expect("clap enforces --right"),
                gt: None,
                gt_all: None,
            };
            let sample = load_sample(&entry, a.labels)?;
            predict_one(&model, &sample, &a, a.out.as_ref().expect("clap enforces --out"))
        }
        (None, None) => Err(Error::Config(
            "give --left/--right/--out or --manifest/--out-dir".into(),
        )),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let entries = read_manifest(&a.manifest)?;
    let mut rows = Vec::with_capacity(entries.len());
    for e in &entries {
        let gt_path = if a.all_pixels { &e.gt_all } else { &e.gt };
        let gt_path = gt_path.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "{}: manifest entry lacks the requested ground truth",
                e.left.display()
            ))
        })?;
        let gt = read_ground_truth(gt_path)?;
        let name = stem(&e.left);
        let pred = read_pfm(&fs::read(a.pred_dir.join(format!("{name}.pfm")))?)?;
        let values: Vec<f64> = pred.data.iter().map(|v| *v as f64).collect();
        rows.push((name, EvalReport::compute(&values, &gt, &a.thresholds, !a.all_pixels)?));
    }
    let reports: Vec<EvalReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    let pooled = EvalReport::pool(&reports)?;
    let text = match a.format {
        FormatArg::Table => {
            let mut s = pooled.table_header() + "\n";
            for (n, r) in &rows {
                s += &(r.table_row(n) + "\n");
            }
            s + &pooled.table_row("all") + "\n"
        }
        FormatArg::Csv => {
            let mut s = pooled.csv_header() + "\n";
            for (n, r) in &rows {
                s += &(r.csv_row(n) + "\n");
            }
            s + &pooled.csv_row("all") + "\n"
        }
        FormatArg::Json => {
            let items: Vec<String> = rows
                .iter()
                .map(|(n, r)| {
                    format!(
                        "{{\"name\":{},\"report\":{}}}",
                        serde_json::to_string(n).unwrap(),
                        r.to_json()
                    )
                })
                .collect();
            format!("{{\"images\":[{}],\"all\":{}}}\n", items.join(","), pooled.to_json())
        }
    };
    print!("{text}");
    Ok(())
}

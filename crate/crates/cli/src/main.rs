mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mambatrans_core::data::{
    encode_text, generate_samples, load_dataset, read_gray, read_rgb, save_dataset, write_rgb_png, Dataset, Sample,
    Split, MANIFEST,
};
use mambatrans_core::gradcheck::suites::{run_suite, CaseResult, SuiteModule, GRAD_TOLERANCE};
use mambatrans_core::losses::{DetectionTargets, ScoredBox, SurrogateDetector};
use mambatrans_core::metrics::{coco_thresholds, mean_average_precision, ImageMetrics, MetricReport};
use mambatrans_core::model::TranslatorModel;
use mambatrans_core::trainer::{loss_curve_csv, pretrain_detector, train, CheckpointSink};
use mambatrans_core::{Error, Tensor};
use serde::{Deserialize, Serialize};

use config::{model_diff, RunConfig};

/// Bad flags, config keys or values; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

const DATASET_DIRS: [&str; 5] = ["images", "ir", "fused", "masks", "seg"];

#[derive(Parser)]
#[command(name = "mambatrans", version, about = "Fused-image to visible-domain translation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Pre-train the surrogate detector on visible images.
    PretrainDet(PretrainArgs),
    /// Train the translator against a frozen detector.
    Train(TrainArgs),
    /// Translate one image or a whole dataset split.
    Translate(TranslateArgs),
    /// Compute image-quality and detection metrics.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat JSON config with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.lr=3e-4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Args)]
struct DataRoot {
    #[arg(long, env = "MTRANS_DATA_ROOT")]
    data_root: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Side length of the square images.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Samples at the end of the list assigned to the test split.
    #[arg(long, default_value_t = 0)]
    test: usize,
    /// Samples just before the test block assigned to the validation split.
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing dataset in the output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataRoot,
    /// Output directory for detector.ckpt, the loss curve and the config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    data: DataRoot,
    /// Frozen detector checkpoint.
    #[arg(long)]
    det_ckpt: PathBuf,
    /// Start from this translator checkpoint instead of a fresh model.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory for checkpoints, the loss curve and the config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    ckpt: PathBuf,
    /// Fused RGB image (single-image mode).
    #[arg(long, requires_all = ["mask", "text"], conflicts_with = "data_root")]
    image: Option<PathBuf>,
    /// 8-bit grayscale target mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Text file holding the prompt.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Dataset to translate (batch mode).
    #[arg(long, env = "MTRANS_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Output PNG (single-image mode) or directory (batch mode).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn samples(self, ds: &Dataset) -> Vec<String> {
        let split = match self {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
            SplitArg::All => return ds.manifest.samples.iter().map(|r| r.id.clone()).collect(),
        };
        ds.manifest.split(split).to_vec()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Prediction box file (box mode).
    #[arg(long, requires = "targets", conflicts_with = "data_root")]
    pred: Option<PathBuf>,
    /// Ground-truth box file (box mode).
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Dataset supplying references and targets (image mode).
    #[arg(long, env = "MTRANS_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Directory of `<id>.png` images to score; defaults to the dataset's fused inputs.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Detector used to score detection on the evaluated images.
    #[arg(long)]
    det_ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    #[value(name = "64")]
    F64,
    #[value(name = "32")]
    F32,
}

#[derive(Args)]
struct GradCheckArgs {
    /// substrate, ssm, attention, blocks, losses or all.
    #[arg(long, default_value = "all", value_parser = parse_modules)]
    module: Modules,
    /// 32-bit results are informational and never fail the run.
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
}

#[derive(Clone)]
struct Modules(Vec<SuiteModule>);

fn parse_modules(s: &str) -> Result<Modules, String> {
    if s == "all" {
        return Ok(Modules(SuiteModule::ALL.to_vec()));
    }
    s.parse::<SuiteModule>().map(|m| Modules(vec![m])).map_err(|e| e.to_string())
}

/// One image's boxes in a box file; `scores` is omitted for ground truth.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxEntry {
    width: usize,
    height: usize,
    boxes: Vec<[f64; 4]>,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<f64>>,
}

impl BoxEntry {
    fn targets(&self) -> DetectionTargets {
        DetectionTargets {
            boxes: self.boxes.clone(),
            labels: self.labels.clone(),
            width: self.width,
            height: self.height,
        }
    }

    fn predictions(&self, path: &Path) -> anyhow::Result<Vec<ScoredBox>> {
        let scores = self.scores.clone().unwrap_or_else(|| vec![1.0; self.boxes.len()]);
        if scores.len() != self.boxes.len() || self.labels.len() != self.boxes.len() {
            bail!(Error::Format(format!(
                "{}: boxes, labels and scores differ in length",
                path.display()
            )));
        }
        Ok(self
            .boxes
            .iter()
            .zip(&self.labels)
            .zip(scores)
            .map(|((b, &label), score)| ScoredBox { bbox: *b, label, score })
            .collect())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<Error>() {
            return match core {
                Error::Config(_) => 2,
                Error::Numeric(_) => 4,
                _ => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::PretrainDet(a) => pretrain_det(a),
        Command::Train(a) => train_cmd(a),
        Command::Translate(a) => translate(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    if a.size < mambatrans_core::data::MIN_SCENE_SIDE {
        bail!(Usage(format!(
            "--size {} is below the generator minimum of {}",
            a.size,
            mambatrans_core::data::MIN_SCENE_SIDE
        )));
    }
    if a.val + a.test > a.count {
        bail!(Usage(format!("--val {} plus --test {} exceed --count {}", a.val, a.test, a.count)));
    }
    let occupied = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !a.force {
            bail!(Usage(format!(
                "{} is not empty; pass --force to replace the dataset in it",
                a.out.display()
            )));
        }
        // only the generator's own outputs are removed
        for dir in DATASET_DIRS {
            let p = a.out.join(dir);
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
        let m = a.out.join(MANIFEST);
        if m.is_file() {
            fs::remove_file(&m).with_context(|| format!("removing {}", m.display()))?;
        }
    }
    let samples = generate_samples(a.seed, a.count, a.size)?;
    let train = a.count - a.val - a.test;
    let splits: Vec<Split> = (0..a.count)
        .map(|i| match i {
            i if i < train => Split::Train,
            i if i < train + a.val => Split::Val,
            _ => Split::Test,
        })
        .collect();
    let manifest = save_dataset(&a.out, a.seed, &samples, &splits)?;
    println!("wrote {} samples to {}", manifest.samples.len(), a.out.display());
    Ok(())
}

/// Training samples: the train split, or every sample when it is empty.
fn training_samples(ds: &Dataset) -> anyhow::Result<Vec<Sample>> {
    let samples = ds.load_split(Split::Train)?;
    if samples.is_empty() {
        return Ok(ds.load_all()?);
    }
    Ok(samples)
}

fn pretrain_det(a: PretrainArgs) -> anyhow::Result<()> {
    let cfg = a.config.resolve()?;
    let ds = load_dataset(&a.data.data_root)?;
    let samples = training_samples(&ds)?;
    create_dir(&a.out)?;
    write(&a.out.join("config.json"), cfg.to_flat_json()?)?;
    let (det, curve) = pretrain_detector::<f32>(&samples, &cfg.detector, &cfg.pretrain)?;
    det.save(&a.out.join("detector.ckpt"))?;
    write(&a.out.join("loss_curve.csv"), loss_curve_csv(&curve))?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!("detector loss {:.4} -> {:.4} over {} steps", first.total, last.total, curve.len());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = a.config.resolve()?;
    let ds = load_dataset(&a.data.data_root)?;
    let samples = training_samples(&ds)?;
    let det = SurrogateDetector::<f32>::load(&a.det_ckpt)?;
    let mut model = match &a.ckpt {
        Some(path) => {
            let model = TranslatorModel::<f32>::load(path)?;
            check_model(&model, &cfg, path)?;
            model
        }
        None => TranslatorModel::<f32>::new(cfg.model.clone(), cfg.train.seed)?,
    };
    create_dir(&a.out)?;
    write(&a.out.join("config.json"), cfg.to_flat_json()?)?;
    model.save(&a.out.join("initial.ckpt"))?;
    let ckpt_dir = a.out.join("checkpoints");
    if cfg.train.checkpoint_every > 0 {
        create_dir(&ckpt_dir)?;
    }
    let sink = CheckpointSink { dir: &ckpt_dir };
    let sink = (cfg.train.checkpoint_every > 0).then_some(&sink);
    let curve = train(&mut model, &samples, &det, &cfg.train, &cfg.loss, sink)?;
    model.save(&a.out.join("final.ckpt"))?;
    write(&a.out.join("loss_curve.csv"), loss_curve_csv(&curve))?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        println!("tac loss {:.4} -> {:.4} over {} steps", first.total, last.total, curve.len());
    }
    Ok(())
}

/// Rejects a checkpoint whose model configuration differs from the run's.
fn check_model(model: &TranslatorModel<f32>, cfg: &RunConfig, path: &Path) -> anyhow::Result<()> {
    let diff = model_diff(&model.config, &cfg.model);
    if !diff.is_empty() {
        bail!(Error::Format(format!(
            "checkpoint {} was built with a different model config: {}",
            path.display(),
            diff.join(", ")
        )));
    }
    Ok(())
}

fn translate(a: TranslateArgs) -> anyhow::Result<()> {
    let model = TranslatorModel::<f32>::load(&a.ckpt)?;
    if a.config.config.is_some() || !a.config.overrides.is_empty() {
        check_model(&model, &a.config.resolve()?, &a.ckpt)?;
    }
    if let Some(image) = &a.image {
        let (mask, text) = (a.mask.as_ref().expect("clap"), a.text.as_ref().expect("clap"));
        let fused = read_rgb(image)?;
        let mask = read_gray(mask, 255.0)?;
        let prompt = fs::read_to_string(text).with_context(|| format!("reading {}", text.display()))?;
        let ids = encode_text(&prompt)?;
        let out = model.translate(&fused, &mask, &ids)?;
        write_rgb_png(&a.out, &out)?;
        return Ok(());
    }
    let Some(root) = &a.data_root else {
        bail!(Usage("translate needs either --image/--mask/--text or --data-root".into()));
    };
    let ds = load_dataset(root)?;
    create_dir(&a.out)?;
    let ids = a.split.samples(&ds);
    for id in &ids {
        let s = ds.load_id(id)?;
        let out = model.translate(&s.fused, &s.voted_mask, &s.text_ids)?;
        write_rgb_png(&a.out.join(format!("{id}.png")), &out)?;
    }
    println!("translated {} images into {}", ids.len(), a.out.display());
    Ok(())
}

fn read_box_file(path: &Path) -> anyhow::Result<Vec<BoxEntry>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())).into())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let cfg = a.config.resolve()?;
    let report = if let Some(pred) = &a.pred {
        let target_path = a.targets.as_ref().expect("clap");
        let preds = read_box_file(pred)?;
        let targets = read_box_file(target_path)?;
        if preds.len() != targets.len() {
            bail!(Error::Format(format!(
                "{} lists {} images but {} lists {}",
                pred.display(),
                preds.len(),
                target_path.display(),
                targets.len()
            )));
        }
        let preds = preds.iter().map(|e| e.predictions(pred)).collect::<anyhow::Result<Vec<_>>>()?;
        let targets: Vec<_> = targets.iter().map(BoxEntry::targets).collect();
        let det = mean_average_precision(&preds, &targets, &coco_thresholds(), cfg.eval.interpolation)?;
        MetricReport::new(Vec::new(), Some(det))
    } else {
        let Some(root) = &a.data_root else {
            bail!(Usage("eval needs either --pred/--targets or --data-root".into()));
        };
        let ds = load_dataset(root)?;
        let detector = a.det_ckpt.as_deref().map(SurrogateDetector::<f32>::load).transpose()?;
        let mut images = Vec::new();
        let (mut preds, mut targets) = (Vec::new(), Vec::new());
        for id in a.split.samples(&ds) {
            let s = ds.load_id(&id)?;
            let img: Tensor<f32> = match &a.images {
                Some(dir) => read_rgb(&dir.join(format!("{id}.png")))?,
                None => s.fused.clone(),
            };
            if img.shape() != s.visible.shape() {
                bail!(Error::Format(format!(
                    "image {id} is {:?} but its reference is {:?}",
                    img.shape(),
                    s.visible.shape()
                )));
            }
            images.push(ImageMetrics::compute(id.clone(), &img, Some(&s.visible))?);
            if let Some(det) = &detector {
                preds.push(det.detect(&img, cfg.eval.min_score)?);
                targets.push(s.det_targets.clone());
            }
        }
        let det = match detector {
            Some(_) => Some(mean_average_precision(&preds, &targets, &coco_thresholds(), cfg.eval.interpolation)?),
            None => None,
        };
        MetricReport::new(images, det)
    };
    let text = match a.format {
        Format::Json => report.to_json()? + "\n",
        Format::Table => report.to_table(),
    };
    match &a.out {
        Some(path) => write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> anyhow::Result<()> {
    let informational = a.precision == PrecisionArg::F32;
    let mut failed = 0;
    for module in a.module.0 {
        let cases: Vec<CaseResult> = match a.precision {
            PrecisionArg::F64 => run_suite::<f64>(module)?,
            PrecisionArg::F32 => run_suite::<f32>(module)?,
        };
        for c in cases {
            let ok = c.passed();
            failed += usize::from(!ok);
            println!(
                "{} {}/{} max_rel_error {:.3e}",
                match (informational, ok) {
                    (true, _) => "INFO",
                    (false, true) => "PASS",
                    (false, false) => "FAIL",
                },
                c.module,
                c.name,
                c.report.max_rel_error
            );
        }
    }
    if informational {
        println!("32-bit results are informational (tolerance {GRAD_TOLERANCE:e} applies to 64-bit only)");
        return Ok(());
    }
    if failed > 0 {
        bail!(Error::Numeric(format!("{failed} gradient checks exceeded {GRAD_TOLERANCE:e}")));
    }
    println!("all gradient checks passed");
    Ok(())
}

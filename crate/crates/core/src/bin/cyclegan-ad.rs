use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use cyclegan_ad::calibrate::{self, Metric, Policy};
use cyclegan_ad::dataset::{
    augment, make_split, save_image, synthesize_toy_dataset, DefectKind, Image, Label, SplitRecord, SyntheticSpec,
};
use cyclegan_ad::experiment::{
    self, calibrate_file, demo_reconstruct, preprocess_set, report_from_runs, score_images, write_report,
    AugmentPreset, DataSource, ExperimentManifest, ExtractorChoice,
};
use cyclegan_ad::model::{file_sha256, Checkpoint, CHECKPOINT_FORMAT_VERSION};
use cyclegan_ad::scoring::{write_scores, FeatureExtractor, ScoreFileMeta};
use cyclegan_ad::train::{load_generator, train, RunConfig, TrainState, Trainer, ARTIFACT_VERSION};
use cyclegan_ad::{Error, Result};

#[derive(Parser)]
#[command(name = "cyclegan-ad", about = "Cycle-GAN anomaly detection: train, score, calibrate, report")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model pair on a dataset's training split.
    Train(TrainArgs),
    /// Reconstruct one image and write its triptych.
    Reconstruct(ReconstructArgs),
    /// Score a dataset (or the test half of a recorded split).
    Score(ScoreArgs),
    /// Calibrate one threshold on a score file.
    Calibrate(CalibrateArgs),
    /// Evaluate a score file into a single-run report.
    Evaluate(EvaluateArgs),
    /// Aggregate `run_<i>/scores.csv` files into a report with plots.
    Report(ReportArgs),
    /// Run a full multi-run experiment from a manifest.
    Experiment(ExperimentArgs),
    /// Write a synthetic dataset as PNG files.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root with `normal/` and `abnormal/` subdirectories.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// TOML synthetic dataset recipe.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    #[arg(long)]
    grayscale: bool,
    /// File listing source ids to leave out, one per line.
    #[arg(long)]
    exclusions: Option<PathBuf>,
}

impl DataArgs {
    fn source(&self) -> Result<DataSource> {
        let synthetic = self
            .synthetic
            .as_deref()
            .map(|p| -> Result<SyntheticSpec> {
                let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
                Ok(toml::from_str(&text)?)
            })
            .transpose()?;
        Ok(DataSource {
            path: self.data.clone(),
            grayscale: self.grayscale,
            exclusions: self.exclusions.clone(),
            synthetic,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Flat TOML with training and model keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Seed of the train/test split; the split is saved to `split.json`.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, value_enum, default_value = "full")]
    augmentation: AugmentArg,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AugmentArg {
    None,
    HorizontalFlip,
    Full,
}

impl From<AugmentArg> for AugmentPreset {
    fn from(a: AugmentArg) -> Self {
        match a {
            AugmentArg::None => AugmentPreset::None,
            AugmentArg::HorizontalFlip => AugmentPreset::HorizontalFlip,
            AugmentArg::Full => AugmentPreset::Full,
        }
    }
}

#[derive(Args)]
struct ExtractorArgs {
    /// Seeded random convolutional feature extractor for FID scores.
    #[arg(long, conflicts_with = "extractor")]
    extractor_seed: Option<u64>,
    /// Feature extractor checkpoint for FID scores.
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Expected SHA-256 of `--extractor`.
    #[arg(long, requires = "extractor")]
    extractor_sha256: Option<String>,
}

impl ExtractorArgs {
    fn choice(&self) -> ExtractorChoice {
        match (&self.extractor, self.extractor_seed) {
            (Some(path), _) => ExtractorChoice::File { path: path.clone(), sha256: self.extractor_sha256.clone() },
            (None, Some(seed)) => ExtractorChoice::Random { seed },
            (None, None) => ExtractorChoice::None,
        }
    }
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    extractor: ExtractorArgs,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Score only the test half of this split record.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    extractor: ExtractorArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    policy: Policy,
    #[arg(long, default_value = "sse")]
    metric: Metric,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scores: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "dataset")]
    dataset: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding `run_<i>/` subdirectories.
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "dataset")]
    dataset: String,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML recipe; the flags below are used when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 200)]
    n_normal: usize,
    #[arg(long, default_value_t = 100)]
    n_abnormal: usize,
    #[arg(long, default_value_t = 0.8)]
    contrast: f64,
    #[arg(long, value_enum, default_value = "blob")]
    defect: DefectArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DefectArg {
    Blob,
    Crack,
    Scratch,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let set = a.data.source()?.load()?;
    let (state, split) = match &a.resume {
        Some(ckpt) => {
            let state = TrainState::load(ckpt)?;
            let record = SplitRecord::load(&a.out.join("split.json"))?;
            (Some(state), record.apply(&set)?)
        }
        None => (None, make_split(&set, a.split_seed)?),
    };
    let run = match (&state, &a.config) {
        (Some(s), _) => RunConfig { train: s.config.clone(), model: s.model.clone() },
        (None, Some(p)) => RunConfig::from_file(p)?,
        (None, None) => RunConfig::default(),
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::file(&a.out, e))?;
    write_text(&a.out.join("config.toml"), &run.to_toml_string())?;
    SplitRecord::of(&split, set.name()).save(&a.out.join("split.json"))?;
    let train_set = preprocess_set(&split.train, run.model.resolution)?;
    let train_set = augment(&train_set, &AugmentPreset::from(a.augmentation).policy())?;
    let mut trainer = match state {
        Some(s) => Trainer::from_state(s, &train_set)?,
        None => Trainer::new(&run, &train_set)?,
    };
    let written = train(&mut trainer, Some(&a.out), &mut ())?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let ext = a.extractor.choice().build(3)?;
    let files = demo_reconstruct(&a.checkpoint, &a.image, &a.out, ext.as_ref().map(|e| e as &dyn FeatureExtractor))?;
    for p in files {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let g = load_generator(&Checkpoint::read(&a.checkpoint)?)?;
    let set = a.data.source()?.load()?;
    let set = match &a.split {
        Some(p) => SplitRecord::load(p)?.apply(&set)?.test,
        None => set,
    };
    let set = preprocess_set(&set, g.spec.resolution)?;
    let ext = a.extractor.choice().build(g.spec.in_channels)?;
    let ext = ext.as_ref().map(|e| e as &dyn FeatureExtractor);
    let (_, scores) = score_images(&g, set.images(), ext)?;
    let meta = ScoreFileMeta {
        artifact_version: ARTIFACT_VERSION.into(),
        checkpoint_sha256: file_sha256(&a.checkpoint)?,
        extractor: ext.map(|e| e.describe()),
    };
    write_scores(&a.out, &meta, &scores)?;
    println!("wrote {} scores to {}", scores.len(), a.out.display());
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let (tau, c) = calibrate_file(&a.scores, a.policy, a.metric)?;
    println!("threshold={tau}");
    println!("tp={} fp={} tn={} fn={}", c.tp, c.fp, c.tn, c.fn_);
    println!("accuracy={:.4} recall={:.4}", c.accuracy(), c.recall());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let metrics = calibrate::evaluate_run(&a.scores, &a.dataset, None)?;
    let report = calibrate::aggregate_runs(std::slice::from_ref(&metrics))?;
    report.write(&a.out)?;
    print!("{}", calibrate::render_table(std::slice::from_ref(&report)));
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let report = report_from_runs(&a.runs, &a.dataset)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::file(&a.out, e))?;
    write_report(&report, &a.out)?;
    // `completed_runs` and the report list runs in the same order.
    for ((i, dir), run) in experiment::completed_runs(&a.runs)?.into_iter().zip(&report.runs) {
        let (_, scores) = cyclegan_ad::scoring::read_scores(&dir.join("scores.csv"))?;
        experiment::write_histograms(&scores, run, &a.out.join(format!("run_{i}")))?;
    }
    print!("{}", calibrate::render_table(std::slice::from_ref(&report)));
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let m = ExperimentManifest::from_file(&a.manifest)?;
    let report = experiment::run_experiment(&m)?;
    print!("{}", calibrate::render_table(std::slice::from_ref(&report)));
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            toml::from_str(&text)?
        }
        None => {
            let mut s = SyntheticSpec::blobs(a.resolution, a.n_normal, a.n_abnormal, a.seed);
            s.contrast = a.contrast;
            s.defect = match a.defect {
                DefectArg::Blob => DefectKind::Blob,
                DefectArg::Crack => DefectKind::Crack,
                DefectArg::Scratch => DefectKind::Scratch,
            };
            s
        }
    };
    let set = synthesize_toy_dataset(&spec)?;
    for (i, img) in set.images().iter().enumerate() {
        let stem = format!("{}_{i:05}", img.label);
        save_image(&img.image, &a.out.join(img.label.as_str()).join(format!("{stem}.png")))?;
        if let (Label::Abnormal, Some(mask)) = (img.label, &img.meta.defect_mask) {
            let m = Image::new(1, mask.height, mask.width, mask.bits.iter().map(|b| *b as u8 as f32).collect())?;
            save_image(&m, &a.out.join("masks").join(format!("{stem}.png")))?;
        }
    }
    write_text(&a.out.join("synthetic.toml"), &toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?)?;
    println!("wrote {} normal and {} abnormal images to {}", set.n_normal(), set.n_abnormal(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let version = format!("{ARTIFACT_VERSION} (checkpoint format {CHECKPOINT_FORMAT_VERSION})");
    let matches = Cli::command().version(&*version.leak()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Score(a) => cmd_score(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

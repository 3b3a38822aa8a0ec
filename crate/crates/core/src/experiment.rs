//! Multi-run experiments: split, train, score, calibrate and report, with
//! every number in the final report recoverable from the per-run score
//! files.
//!
//! Layout of an experiment directory:
//!
//! ```text
//! out/manifest.toml
//! out/run_<i>/split.json
//! out/run_<i>/log.csv
//! out/run_<i>/ckpt/{epoch_NNNN,final}.ckpt
//! out/run_<i>/scores.csv
//! out/run_<i>/localization.json      (synthetic data only)
//! out/run_<i>/figs/hist_<metric>.png
//! out/run_<i>/figs/{top,bottom}_<k>_*.png
//! out/report.json
//! out/report.txt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::{self, HistogramSpec, Metric, MetricsReport, RunMetrics};
use crate::dataset::{
    augment, load_dataset, load_image, make_split, preprocess, save_image, synthesize_toy_dataset, AugmentPolicy,
    ExclusionManifest, Image, LabeledImage, LabeledImageSet, SplitRecord, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::model::{file_sha256, Checkpoint, Generator};
use crate::scoring::{
    difference_map, read_scores, reconstruct, reconstruct_all, score_reconstruction, write_scores, ConvExtractor,
    FeatureExtractor, Reconstruction, ScoreFileMeta, ScoreRecord,
};
use crate::train::{load_generator, train, RunConfig, TrainState, Trainer, ARTIFACT_VERSION, FINAL_CHECKPOINT};

/// Where the images come from: a `normal/` + `abnormal/` directory tree or
/// a synthetic recipe. Exactly one must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub grayscale: bool,
    pub exclusions: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

impl DataSource {
    pub fn load(&self) -> Result<LabeledImageSet> {
        match (&self.path, &self.synthetic) {
            (Some(path), None) => {
                let excl = self.exclusions.as_deref().map(ExclusionManifest::from_file).transpose()?;
                let (set, report) = load_dataset(path, self.grayscale, excl.as_ref())?;
                for s in &report.skipped {
                    log::warn!("skipped {}: {}", s.path, s.reason);
                }
                Ok(set)
            }
            (None, Some(spec)) => synthesize_toy_dataset(spec),
            _ => Err(Error::Config("data source needs exactly one of `path` or `synthetic`".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentPreset {
    None,
    HorizontalFlip,
    #[default]
    Full,
}

impl AugmentPreset {
    pub fn policy(self) -> AugmentPolicy {
        match self {
            AugmentPreset::None => AugmentPolicy::identity(),
            AugmentPreset::HorizontalFlip => AugmentPolicy::horizontal_flip(),
            AugmentPreset::Full => AugmentPolicy::full(),
        }
    }
}

/// Feature network for FID scores; `none` disables them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ExtractorChoice {
    #[default]
    None,
    Random {
        seed: u64,
    },
    File {
        path: PathBuf,
        sha256: Option<String>,
    },
}

impl ExtractorChoice {
    pub fn build(&self, channels: usize) -> Result<Option<ConvExtractor>> {
        match self {
            ExtractorChoice::None => Ok(None),
            ExtractorChoice::Random { seed } => Ok(Some(ConvExtractor::random(channels.max(3), *seed))),
            ExtractorChoice::File { path, sha256 } => Ok(Some(ConvExtractor::load(path, sha256.as_deref())?)),
        }
    }
}

fn default_runs() -> usize {
    5
}

fn default_top_k() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    /// Dataset label in the report; defaults to the loaded set's name.
    pub name: Option<String>,
    pub data: DataSource,
    /// Training and model configuration. `seed` is replaced per run by
    /// `base_seed + i`.
    pub run: RunConfig,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub augmentation: AugmentPreset,
    #[serde(default)]
    pub extractor: ExtractorChoice,
    /// Triptychs are written for this many highest- and lowest-scoring
    /// test images per run.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl ExperimentManifest {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        // `run` flattens two structs, which serde cannot check for typos.
        if let Some(toml::Value::Table(run)) = table.get("run") {
            RunConfig::from_toml_str(&toml::to_string(run).map_err(|e| Error::Config(e.to_string()))?)?;
        }
        let m: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut m = Self::from_toml_str(&text)?;
        // Relative paths are taken relative to the manifest.
        if let Some(base) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut m.out_dir);
            m.data.path.as_mut().map(fix);
            m.data.exclusions.as_mut().map(fix);
            if let ExtractorChoice::File { path, .. } = &mut m.extractor {
                fix(path);
            }
        }
        Ok(m)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if self.data.path.is_some() == self.data.synthetic.is_some() {
            return Err(Error::Config("data source needs exactly one of `path` or `synthetic`".into()));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate()?;
        }
        self.run.train.validate()?;
        self.run.model.validate()
    }

    pub fn run_config(&self, run: usize) -> RunConfig {
        let mut cfg = self.run.clone();
        cfg.train.seed = self.base_seed + run as u64;
        cfg
    }
}

pub fn run_dir(out: &Path, run: usize) -> PathBuf {
    out.join(format!("run_{run}"))
}

fn stage<T>(stage: &'static str, run: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage, run, source: Box::new(e) })
}

/// Resizes to `resolution` where needed.
pub fn preprocess_set(set: &LabeledImageSet, resolution: usize) -> Result<LabeledImageSet> {
    set.map_images(|img| {
        if img.image.height() == resolution && img.image.width() == resolution {
            Ok(img.clone())
        } else {
            preprocess(img, resolution)
        }
    })
}

/// Scores every image in `images` with `G`.
pub fn score_images(
    g: &Generator<f32>,
    images: &[LabeledImage],
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<(Vec<Reconstruction>, Vec<ScoreRecord>)> {
    let recs = reconstruct_all(g, images, 8)?;
    let scores = recs.iter().map(|r| score_reconstruction(r, extractor)).collect::<Result<_>>()?;
    Ok((recs, scores))
}

/// Difference-map localization on images with a known defect mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// Abnormal images whose top-1% brightest difference pixels touch the mask.
    pub hits: usize,
    pub abnormal_with_mask: usize,
    pub hit_rate: f64,
    pub normal_mean_intensity: f64,
    pub abnormal_mean_intensity: f64,
    /// `normal_mean_intensity / abnormal_mean_intensity`.
    pub intensity_ratio: f64,
}

pub const TOP_FRACTION: f64 = 0.01;

/// `None` when no abnormal image carries a mask.
pub fn localization(recs: &[Reconstruction], images: &[LabeledImage]) -> Result<Option<Localization>> {
    let (mut hits, mut with_mask) = (0, 0);
    let (mut normal, mut abnormal) = (Vec::new(), Vec::new());
    for (rec, img) in recs.iter().zip(images) {
        let map = difference_map(rec)?;
        if rec.label.is_abnormal() {
            abnormal.push(map.mean());
            if let Some(mask) = &img.meta.defect_mask {
                with_mask += 1;
                let top = map.top_fraction(TOP_FRACTION);
                if top.iter().zip(&mask.bits).any(|(t, m)| *t && *m) {
                    hits += 1;
                }
            }
        } else {
            normal.push(map.mean());
        }
    }
    if with_mask == 0 || normal.is_empty() {
        return Ok(None);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (nm, am) = (mean(&normal), mean(&abnormal));
    Ok(Some(Localization {
        hits,
        abnormal_with_mask: with_mask,
        hit_rate: hits as f64 / with_mask as f64,
        normal_mean_intensity: nm,
        abnormal_mean_intensity: am,
        intensity_ratio: if am > 0.0 { nm / am } else { f64::INFINITY },
    }))
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// Original | generated | normalized squared difference, side by side.
fn triptych_panel(rec: &Reconstruction) -> Result<Image> {
    let (c, h, w) = (rec.original.channels(), rec.original.height(), rec.original.width());
    let diff = difference_map(rec)?;
    Image::from_fn(c, h, 3 * w, |ch, y, x| match x / w {
        0 => rec.original.get(ch, y, x),
        1 => rec.generated.get(ch, y, x - w),
        _ => diff.normalized[y * w + (x - 2 * w)] as f32,
    })
}

/// Writes `<stem>_original.png`, `<stem>_generated.png`,
/// `<stem>_difference.png`, `<stem>_triptych.png` and `<stem>.txt` with the
/// scores.
pub fn write_triptych(rec: &Reconstruction, score: &ScoreRecord, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let diff = difference_map(rec)?;
    let (h, w) = (diff.height, diff.width);
    let diff_img = Image::new(1, h, w, diff.normalized.iter().map(|v| *v as f32).collect())?;
    let mut out = Vec::new();
    for (suffix, img) in [
        ("original", rec.original.clone()),
        ("generated", rec.generated.clone()),
        ("difference", diff_img),
        ("triptych", triptych_panel(rec)?),
    ] {
        let p = dir.join(format!("{stem}_{suffix}.png"));
        save_image(&img, &p)?;
        out.push(p);
    }
    let mut text = format!(
        "source_id={}\nlabel={}\nsse={}\ndifference_max={}\n",
        score.source_id,
        score.label,
        score.sse,
        diff.raw.iter().copied().fold(0.0, f64::max)
    );
    if let Some(f) = score.fid {
        text.push_str(&format!("fid={f}\n"));
    }
    let p = dir.join(format!("{stem}.txt"));
    fs::write(&p, text).map_err(|e| Error::file(&p, e))?;
    out.push(p);
    Ok(out)
}

/// Histograms with both thresholds for every metric a run has, written
/// to `figs/hist_<metric>.png`. Everything is recomputed from the scores.
pub fn write_histograms(scores: &[ScoreRecord], metrics: &RunMetrics, figs: &Path) -> Result<()> {
    for (&metric, d) in &metrics.metrics {
        let labeled = calibrate::labeled_scores(scores, metric)?;
        let normal: Vec<f64> = labeled.iter().filter(|s| !s.1).map(|s| s.0).collect();
        let abnormal: Vec<f64> = labeled.iter().filter(|s| s.1).map(|s| s.0).collect();
        let spec = HistogramSpec {
            bins: 30,
            zfn_threshold: Some(d.zfn_threshold),
            acc_threshold: Some(d.acc_threshold),
        };
        calibrate::plot_histogram(&normal, &abnormal, &spec, &figs.join(format!("hist_{metric}.png")))?;
    }
    Ok(())
}

fn reusable_state(ckpt: &Path, cfg: &RunConfig) -> Option<TrainState> {
    if !ckpt.exists() {
        return None;
    }
    match TrainState::load(ckpt) {
        Ok(s) if s.is_finished() && s.config == cfg.train && s.model == cfg.model => Some(s),
        Ok(_) => None,
        Err(e) => {
            log::warn!("ignoring unreadable {}: {e}", ckpt.display());
            None
        }
    }
}

/// One run: split, train (or reuse a finished checkpoint with the same
/// configuration), score the test half, write figures.
fn execute_run(m: &ExperimentManifest, set: &LabeledImageSet, dataset: &str, i: usize) -> Result<RunMetrics> {
    let dir = run_dir(&m.out_dir, i);
    let seed = m.base_seed + i as u64;
    let cfg = m.run_config(i);
    let split = stage("split", i, make_split(set, seed))?;
    stage("split", i, fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e)))?;
    stage("split", i, SplitRecord::of(&split, dataset).save(&dir.join("split.json")))?;
    let train_set = stage("augment", i, augment(&split.train, &m.augmentation.policy()))?;

    let final_ckpt = dir.join("ckpt").join(FINAL_CHECKPOINT);
    let state = match reusable_state(&final_ckpt, &cfg) {
        Some(s) => {
            log::info!("run {i}: reusing {}", final_ckpt.display());
            stage("train", i, Trainer::from_state(s, &train_set))?.into_state()
        }
        None => {
            log::info!("run {i}: training on {} images (seed {seed})", train_set.len());
            let mut trainer = stage("train", i, Trainer::new(&cfg, &train_set))?;
            stage("train", i, train(&mut trainer, Some(&dir), &mut ()))?;
            trainer.into_state()
        }
    };

    let extractor = stage("score", i, m.extractor.build(cfg.model.channels))?;
    let ext = extractor.as_ref().map(|e| e as &dyn FeatureExtractor);
    let test = split.test.images();
    let (recs, scores) = stage("score", i, score_images(&state.pair.g, test, ext))?;
    let meta = ScoreFileMeta {
        artifact_version: ARTIFACT_VERSION.into(),
        checkpoint_sha256: stage("score", i, file_sha256(&final_ckpt))?,
        extractor: ext.map(|e| e.describe()),
    };
    let scores_path = dir.join("scores.csv");
    stage("score", i, write_scores(&scores_path, &meta, &scores))?;

    let metrics = stage("evaluate", i, calibrate::evaluate_run(&scores_path, dataset, Some(seed)))?;
    if let Some(loc) = stage("evaluate", i, localization(&recs, test))? {
        let p = dir.join("localization.json");
        stage("evaluate", i, fs::write(&p, serde_json::to_string_pretty(&loc)?).map_err(|e| Error::file(&p, e)))?;
    }

    let figs = dir.join("figs");
    stage("figures", i, write_histograms(&scores, &metrics, &figs))?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].sse.total_cmp(&scores[a].sse).then(a.cmp(&b)));
    let k = m.top_k.min(order.len());
    for (rank, &j) in order[..k].iter().enumerate() {
        let stem = format!("top_{}_{}", rank + 1, sanitize(&scores[j].source_id));
        stage("figures", i, write_triptych(&recs[j], &scores[j], &figs, &stem))?;
    }
    for (rank, &j) in order.iter().rev().take(k).enumerate() {
        let stem = format!("bottom_{}_{}", rank + 1, sanitize(&scores[j].source_id));
        stage("figures", i, write_triptych(&recs[j], &scores[j], &figs, &stem))?;
    }
    Ok(metrics)
}

/// Runs every configured run in order, then aggregates. A failing stage
/// stops the experiment; finished runs keep their outputs.
pub fn run_experiment(m: &ExperimentManifest) -> Result<MetricsReport> {
    m.validate()?;
    fs::create_dir_all(&m.out_dir).map_err(|e| Error::file(&m.out_dir, e))?;
    let manifest_path = m.out_dir.join("manifest.toml");
    fs::write(&manifest_path, m.to_toml_string()?).map_err(|e| Error::file(&manifest_path, e))?;

    let raw = stage("load", 0, m.data.load())?;
    let dataset = m.name.clone().unwrap_or_else(|| raw.name().to_owned());
    let set = stage("preprocess", 0, preprocess_set(&raw, m.run.model.resolution))?;
    for i in 0..m.n_runs {
        execute_run(m, &set, &dataset, i)?;
    }
    let report = report_from_runs(&m.out_dir, &dataset)?;
    write_report(&report, &m.out_dir)?;
    Ok(report)
}

/// The `run_<i>` directories under `dir` that hold a score file, by index.
pub fn completed_runs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut runs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(idx) = name.to_str().and_then(|n| n.strip_prefix("run_")).and_then(|n| n.parse().ok()) else {
            continue;
        };
        if entry.path().join("scores.csv").is_file() {
            runs.push((idx, entry.path()));
        }
    }
    runs.sort();
    Ok(runs)
}

/// Recomputes every run's metrics from its score file. The seed comes from
/// `split.json` when present.
pub fn report_from_runs(dir: &Path, dataset: &str) -> Result<MetricsReport> {
    let runs = completed_runs(dir)?;
    if runs.is_empty() {
        return Err(Error::Aggregation(format!("no run_<i>/scores.csv under {}", dir.display())));
    }
    let metrics = runs
        .iter()
        .map(|(_, p)| {
            let seed = SplitRecord::load(&p.join("split.json")).ok().map(|s| s.seed);
            calibrate::evaluate_run(&p.join("scores.csv"), dataset, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    calibrate::aggregate_runs(&metrics)
}

/// `report.json`, `report.txt` and per-run histograms.
pub fn write_report(report: &MetricsReport, out: &Path) -> Result<()> {
    report.write(&out.join("report.json"))?;
    let p = out.join("report.txt");
    fs::write(&p, calibrate::render_table(std::slice::from_ref(report))).map_err(|e| Error::file(&p, e))
}

/// Reconstructs one image file with a checkpoint's `G` and writes its
/// triptych and scores into `out`.
pub fn demo_reconstruct(
    checkpoint: &Path,
    image_path: &Path,
    out: &Path,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<Vec<PathBuf>> {
    let g = load_generator(&Checkpoint::read(checkpoint)?)?;
    let (res, ch) = (g.spec.resolution, g.spec.in_channels);
    let img = load_image(image_path, ch == 1)?;
    let id = image_path.file_name().map_or_else(|| "image".into(), |n| n.to_string_lossy().into_owned());
    let mut labeled = LabeledImage::new(img, crate::dataset::Label::Abnormal, id.clone());
    if labeled.image.height() != res || labeled.image.width() != res {
        log::info!(
            "resizing {} from {}×{} to the model resolution {res}×{res}",
            image_path.display(),
            labeled.image.height(),
            labeled.image.width()
        );
        labeled = preprocess(&labeled, res)?;
    }
    let rec = reconstruct(&g, &labeled)?;
    let score = score_reconstruction(&rec, extractor)?;
    let stem = sanitize(image_path.file_stem().map_or("image".into(), |s| s.to_string_lossy()).as_ref());
    write_triptych(&rec, &score, out, &stem)
}

/// Reads a score file and evaluates it under one policy and metric.
pub fn calibrate_file(path: &Path, policy: calibrate::Policy, metric: Metric) -> Result<(f64, calibrate::Confusion)> {
    let (_, records) = read_scores(path)?;
    let labeled = calibrate::labeled_scores(&records, metric)?;
    let tau = match policy {
        calibrate::Policy::Zfn => calibrate::zfn_threshold(&labeled)?,
        calibrate::Policy::Acc => calibrate::acc_threshold(&labeled)?.0,
    };
    Ok((tau, calibrate::Confusion::at(&labeled, tau)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
name = "toy"
n_runs = 2
out_dir = "out"
augmentation = "none"

[data.synthetic]
resolution = 16
n_normal = 8
n_abnormal = 8
defect = "blob"
contrast = 0.8
size_fraction = 0.2
background = "stripes"
seed = 1

[run]
epochs = 1
resolution = 16
base_width = 4
n_residual_blocks = 1
disc_widths = [4, 8]
"#;

    #[test]
    fn manifest_parses_and_round_trips() {
        let m = ExperimentManifest::from_toml_str(TOY).unwrap();
        assert_eq!(m.n_runs, 2);
        assert_eq!(m.top_k, 4);
        assert_eq!(m.extractor, ExtractorChoice::None);
        assert_eq!(m.run_config(1).train.seed, 1);
        let back = ExperimentManifest::from_toml_str(&m.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_rejects_ambiguous_data() {
        let both = TOY.replace("[data.synthetic]", "[data]\npath = \"x\"\n[data.synthetic]");
        assert!(matches!(ExperimentManifest::from_toml_str(&both), Err(Error::Config(_))));
        let typo = TOY.replace("n_runs = 2", "n_run = 2");
        assert!(ExperimentManifest::from_toml_str(&typo).is_err());
        let nested_typo = TOY.replace("epochs = 1", "epoch = 1");
        assert!(matches!(ExperimentManifest::from_toml_str(&nested_typo), Err(Error::Config(_))));
    }
}

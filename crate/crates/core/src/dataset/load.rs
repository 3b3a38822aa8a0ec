use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Image, ImageMeta, Label, LabeledImage, LabeledImageSet, BICUBIC_KERNEL};
use crate::error::{Error, Result};

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// Source ids to leave out at load time (one per line, `#` comments).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExclusionManifest {
    ids: BTreeSet<String>,
}

impl ExclusionManifest {
    pub fn parse(text: &str) -> Self {
        let ids = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_owned)
            .collect();
        Self { ids }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub root: String,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub excluded: usize,
    pub skipped: Vec<SkippedFile>,
    pub resample_kernel: String,
}

/// Reads one image file as grayscale or RGB with intensities in `[0, 1]`.
pub fn load_image(path: &Path, grayscale: bool) -> Result<Image> {
    let dynamic = image::open(path)?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    if grayscale {
        let buf = dynamic.to_luma32f();
        Image::new(1, h, w, buf.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    } else {
        let buf = dynamic.to_rgb32f().into_raw();
        let plane = h * w;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in buf.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c].clamp(0.0, 1.0);
            }
        }
        Image::new(3, h, w, data)
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Image files directly under `dir`, plus one level of sub-class folders.
fn collect_files(dir: &Path) -> Result<Vec<(PathBuf, Option<String>)>> {
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            let sub = path.file_name().and_then(|n| n.to_str()).map(str::to_owned);
            let mut files: Vec<PathBuf> = fs::read_dir(&path)
                .map_err(|e| Error::file(&path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && has_image_extension(p))
                .collect();
            files.sort();
            out.extend(files.into_iter().map(|f| (f, sub.clone())));
        } else if has_image_extension(&path) {
            out.push((path, None));
        }
    }
    Ok(out)
}

/// Writes an image as 8-bit PNG (grayscale or RGB by channel count).
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    match img.channels() {
        1 => image::GrayImage::from_fn(w, h, |x, y| image::Luma([q(img.get(0, y as usize, x as usize))])).save(path)?,
        3 => image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([0, 1, 2].map(|c| q(img.get(c, y as usize, x as usize))))
        })
        .save(path)?,
        c => return Err(Error::Shape(format!("cannot write a {c}-channel image"))),
    }
    Ok(())
}

/// Loads `<root>/normal` and `<root>/abnormal`. Abnormal sub-class folders
/// are merged into the single abnormal label; unreadable files are skipped
/// and listed in the report.
pub fn load_dataset(
    root: &Path,
    grayscale: bool,
    exclusions: Option<&ExclusionManifest>,
) -> Result<(LabeledImageSet, LoadReport)> {
    let mut report = LoadReport {
        root: root.display().to_string(),
        resample_kernel: BICUBIC_KERNEL.to_string(),
        ..Default::default()
    };
    let mut images = Vec::new();
    for label in [Label::Normal, Label::Abnormal] {
        let dir = root.join(label.as_str());
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "dataset root {} has no `{}/` subdirectory",
                root.display(),
                label
            )));
        }
        for (path, subclass) in collect_files(&dir)? {
            let source_id = path
                .strip_prefix(root)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            if exclusions.is_some_and(|m| m.contains(&source_id)) {
                report.excluded += 1;
                continue;
            }
            match load_image(&path, grayscale) {
                Ok(image) => {
                    let meta = ImageMeta { subclass, defect_mask: None };
                    images.push(LabeledImage { image, label, source_id, meta });
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    report.skipped.push(SkippedFile { path: source_id, reason: e.to_string() });
                }
            }
        }
    }
    let name = root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_owned();
    let set = LabeledImageSet::new(name, images);
    report.n_normal = set.n_normal();
    report.n_abnormal = set.n_abnormal();
    set.require_both_classes()?;
    Ok((set, report))
}

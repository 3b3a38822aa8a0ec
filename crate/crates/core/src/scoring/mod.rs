//! Anomaly scores from the abnormal-to-normal generator `G`.
//!
//! Every test image, normal or abnormal, goes through `G`; the score is the
//! discrepancy between the image and its reconstruction, either as a pixel
//! SSE or as a Fréchet distance between per-image feature statistics.
//! Scores are computed on `[0, 1]` images.

mod features;
mod frechet;
mod io;

use crate::dataset::{Image, Label, LabeledImage};
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::tensor::Tensor;

pub use features::{extract_features, ConvExtractor, ConvLayer, FeatureExtractor, FeatureStats};
pub use frechet::{frechet_distance, FRECHET_EPS};
pub use io::{read_scores, write_scores, ScoreFileMeta, ScoreRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub original: Image,
    pub generated: Image,
    pub source_id: String,
    pub label: Label,
}

/// Reconstructs a batch of images with `G`, `batch` images per forward pass.
pub fn reconstruct_all(g: &Generator<f32>, images: &[LabeledImage], batch: usize) -> Result<Vec<Reconstruction>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let tensors: Vec<Tensor<f32>> = chunk.iter().map(|i| i.image.to_model_tensor()).collect();
        let refs: Vec<&Tensor<f32>> = tensors.iter().collect();
        let x = Tensor::concat(&refs)?;
        let y = g.forward_tensor(&x)?;
        for (i, img) in chunk.iter().enumerate() {
            out.push(Reconstruction {
                original: img.image.clone(),
                generated: Image::from_model_tensor(&y, i)?,
                source_id: img.source_id.clone(),
                label: img.label,
            });
        }
    }
    Ok(out)
}

pub fn reconstruct(g: &Generator<f32>, image: &LabeledImage) -> Result<Reconstruction> {
    Ok(reconstruct_all(g, std::slice::from_ref(image), 1)?.remove(0))
}

/// Channel-summed squared difference per pixel, `H × W` row-major.
fn squared_difference(a: &Image, b: &Image) -> Result<Vec<f64>> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "images differ in shape: {}×{}×{} vs {}×{}×{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    let plane = a.height() * a.width();
    let mut map = vec![0.0f64; plane];
    for c in 0..a.channels() {
        for ((m, &x), &y) in map.iter_mut().zip(a.plane(c)).zip(b.plane(c)) {
            let d = x as f64 - y as f64;
            *m += d * d;
        }
    }
    Ok(map)
}

/// `Σ (o − g)²` over all pixels and channels.
pub fn sse_score(original: &Image, generated: &Image) -> Result<f64> {
    Ok(squared_difference(original, generated)?.iter().sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceMap {
    pub height: usize,
    pub width: usize,
    /// Channel-summed squared differences; sums to the SSE score.
    pub raw: Vec<f64>,
    /// `raw` divided by its maximum (all zero if the maximum is zero).
    pub normalized: Vec<f64>,
}

impl DifferenceMap {
    pub fn sum(&self) -> f64 {
        self.raw.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.raw.len() as f64
    }

    /// Boolean mask of the brightest `fraction` of pixels (at least one).
    pub fn top_fraction(&self, fraction: f64) -> Vec<bool> {
        let k = ((self.raw.len() as f64 * fraction).ceil() as usize).clamp(1, self.raw.len());
        let mut idx: Vec<usize> = (0..self.raw.len()).collect();
        idx.sort_by(|&a, &b| self.raw[b].total_cmp(&self.raw[a]).then(a.cmp(&b)));
        let mut mask = vec![false; self.raw.len()];
        for &i in &idx[..k] {
            mask[i] = true;
        }
        mask
    }
}

pub fn difference_map(rec: &Reconstruction) -> Result<DifferenceMap> {
    let raw = squared_difference(&rec.original, &rec.generated)?;
    let max = raw.iter().copied().fold(0.0, f64::max);
    let normalized = if max > 0.0 { raw.iter().map(|v| v / max).collect() } else { vec![0.0; raw.len()] };
    Ok(DifferenceMap { height: rec.original.height(), width: rec.original.width(), raw, normalized })
}

/// Fréchet distance between the feature statistics of the original and
/// the reconstruction.
pub fn fid_score(extractor: &dyn FeatureExtractor, rec: &Reconstruction) -> Result<f64> {
    let a = extract_features(extractor, &rec.original)?;
    let b = extract_features(extractor, &rec.generated)?;
    frechet_distance(&a, &b)
}

pub fn score_reconstruction(rec: &Reconstruction, extractor: Option<&dyn FeatureExtractor>) -> Result<ScoreRecord> {
    Ok(ScoreRecord {
        source_id: rec.source_id.clone(),
        label: rec.label,
        sse: sse_score(&rec.original, &rec.generated)?,
        fid: extractor.map(|e| fid_score(e, rec)).transpose()?,
    })
}

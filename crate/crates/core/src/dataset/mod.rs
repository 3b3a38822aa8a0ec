//! Labeled image corpora: loading, balanced splitting, resampling,
//! dihedral augmentation and a seeded synthetic defect generator.
//!
//! Images are stored planar (channel-major) with intensities in `[0, 1]`.
//! Conversion to the model's `[-1, 1]` range happens at the model boundary.

mod augment;
mod load;
mod resample;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub use augment::{augment, AugmentPolicy, Dihedral, Flip, Rotation};
pub use load::{load_dataset, load_image, save_image, ExclusionManifest, LoadReport, SkippedFile};
pub use resample::{preprocess, resize_bicubic, BICUBIC_KERNEL};
pub use split::{make_split, split_counts, SplitCounts, SplitPair, SplitRecord};
pub use synth::{
    synthesize_toy_dataset, synthesize_with_backgrounds, BackgroundKind, DefectKind, SyntheticSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            other => Err(Error::Config(format!("unknown label `{other}`"))),
        }
    }
}

/// Planar `C × H × W` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::Shape(format!("images need 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}×{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values do not fill a {channels}×{height}×{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    /// Builds an image from a generator, clamping into `[0, 1]`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Batch-of-one tensor in the model range `[-1, 1]`.
    pub fn to_model_tensor(&self) -> Tensor<f32> {
        let shape = Shape::new(1, self.channels, self.height, self.width);
        Tensor::from_vec(shape, self.data.iter().map(|v| v * 2.0 - 1.0).collect())
            .expect("image buffer matches its shape")
    }

    /// Inverse of [`Image::to_model_tensor`] for sample `index` of a batch;
    /// values are clamped into `[0, 1]`.
    pub fn from_model_tensor(t: &Tensor<f32>, index: usize) -> Result<Self> {
        let s = t.shape();
        if index >= s.n {
            return Err(Error::Shape(format!("sample {index} out of batch {}", s.n)));
        }
        let data = t.sample(index).iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
        Self::new(s.c, s.h, s.w, data)
    }
}

/// Binary pixel mask (`H × W`), used for synthetic defect ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn coverage(&self) -> f64 {
        self.area() as f64 / self.bits.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageMeta {
    /// Original abnormal sub-class, when the corpus had several.
    pub subclass: Option<String>,
    pub defect_mask: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: Label,
    pub source_id: String,
    pub meta: ImageMeta,
}

impl LabeledImage {
    pub fn new(image: Image, label: Label, source_id: impl Into<String>) -> Self {
        Self { image, label, source_id: source_id.into(), meta: ImageMeta::default() }
    }
}

/// Immutable collection of labeled images with cached class counts.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    name: String,
    images: Vec<LabeledImage>,
    n_normal: usize,
    n_abnormal: usize,
}

impl LabeledImageSet {
    pub fn new(name: impl Into<String>, images: Vec<LabeledImage>) -> Self {
        let n_abnormal = images.iter().filter(|i| i.label.is_abnormal()).count();
        let n_normal = images.len() - n_abnormal;
        Self { name: name.into(), images, n_normal, n_abnormal }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_normal(&self) -> usize {
        self.n_normal
    }

    pub fn n_abnormal(&self) -> usize {
        self.n_abnormal
    }

    pub fn count(&self, label: Label) -> usize {
        match label {
            Label::Normal => self.n_normal,
            Label::Abnormal => self.n_abnormal,
        }
    }

    pub fn iter_label(&self, label: Label) -> impl Iterator<Item = &LabeledImage> {
        self.images.iter().filter(move |i| i.label == label)
    }

    pub fn into_images(self) -> Vec<LabeledImage> {
        self.images
    }

    /// Errors unless both classes are present.
    pub fn require_both_classes(&self) -> Result<()> {
        if self.n_normal == 0 {
            return Err(Error::EmptyClass(Label::Normal.to_string()));
        }
        if self.n_abnormal == 0 {
            return Err(Error::EmptyClass(Label::Abnormal.to_string()));
        }
        Ok(())
    }

    /// Applies `f` to every image, keeping labels, ids and metadata.
    pub fn map_images(&self, mut f: impl FnMut(&LabeledImage) -> Result<LabeledImage>) -> Result<Self> {
        let images = self.images.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Ok(Self::new(self.name.clone(), images))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range_and_bad_channels() {
        assert!(Image::new(1, 1, 2, vec![0.2, 1.5]).is_err());
        assert!(Image::new(2, 1, 1, vec![0.2, 0.5]).is_err());
        assert!(Image::new(1, 0, 1, vec![]).is_err());
    }

    #[test]
    fn model_tensor_round_trip() {
        let img = Image::from_fn(3, 4, 5, |c, y, x| (c + y + x) as f32 / 10.0).unwrap();
        let t = img.to_model_tensor();
        assert_eq!(t.shape(), Shape::new(1, 3, 4, 5));
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = Image::from_model_tensor(&t, 0).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn set_counts_by_label() {
        let px = Image::filled(1, 1, 1, 0.5).unwrap();
        let set = LabeledImageSet::new(
            "t",
            vec![
                LabeledImage::new(px.clone(), Label::Normal, "a"),
                LabeledImage::new(px.clone(), Label::Abnormal, "b"),
                LabeledImage::new(px, Label::Normal, "c"),
            ],
        );
        assert_eq!((set.n_normal(), set.n_abnormal()), (2, 1));
        assert_eq!(set.iter_label(Label::Normal).count(), 2);
        assert!(set.require_both_classes().is_ok());
        assert_eq!("abnormal".parse::<Label>().unwrap(), Label::Abnormal);
    }
}

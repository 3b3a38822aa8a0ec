use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Image, ImageMeta, Label, LabeledImage, LabeledImageSet, Mask};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Blob,
    Crack,
    Scratch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Stripes,
    Checker,
    Noise,
}

fn default_channels() -> usize {
    3
}

fn default_noise() -> f64 {
    0.01
}

/// Recipe for a seeded toy corpus of textured backgrounds, where every
/// abnormal image carries exactly one injected defect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub resolution: usize,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub defect: DefectKind,
    /// Blend factor towards the defect intensity, in `[0, 1]`.
    pub contrast: f64,
    /// Defect extent relative to the image side, in `(0, 0.5)`.
    pub size_fraction: f64,
    pub background: BackgroundKind,
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Standard deviation of per-pixel sensor noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn blobs(resolution: usize, n_normal: usize, n_abnormal: usize, seed: u64) -> Self {
        Self {
            resolution,
            n_normal,
            n_abnormal,
            defect: DefectKind::Blob,
            contrast: 0.8,
            size_fraction: 0.15,
            background: BackgroundKind::Stripes,
            seed,
            channels: 3,
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_normal == 0 || self.n_abnormal == 0 {
            return Err(Error::Spec("synthetic corpus needs at least one image per class".into()));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(Error::Spec(format!("contrast {} outside [0, 1]", self.contrast)));
        }
        if !(self.size_fraction > 0.0 && self.size_fraction < 0.5) {
            return Err(Error::Spec(format!("size fraction {} outside (0, 0.5)", self.size_fraction)));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Spec(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Spec("noise must be a finite non-negative value".into()));
        }
        let extent = self.size_fraction * self.resolution as f64;
        if extent * extent * PI / 4.0 < 1.0 {
            return Err(Error::Spec(format!(
                "defect of size fraction {} covers less than one pixel at resolution {}",
                self.size_fraction, self.resolution
            )));
        }
        Ok(())
    }
}

fn background(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let r = spec.resolution;
    let rf = r as f64;
    let mut v = vec![0.0; r * r];
    match spec.background {
        BackgroundKind::Stripes => {
            let theta = rng.gen_range(0.0..PI);
            let period = rng.gen_range(rf / 5.0..rf / 2.5).max(2.5);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(0.2..0.3);
            let (c, s) = (theta.cos(), theta.sin());
            for y in 0..r {
                for x in 0..r {
                    let t = (x as f64 * c + y as f64 * s) * 2.0 * PI / period + phase;
                    v[y * r + x] = 0.5 + amp * t.sin();
                }
            }
        }
        BackgroundKind::Checker => {
            let cell = rng.gen_range((rf / 8.0).max(2.0)..(rf / 4.0).max(3.0));
            let (ox, oy) = (rng.gen_range(0.0..cell), rng.gen_range(0.0..cell));
            let lo = rng.gen_range(0.2..0.4);
            let hi = rng.gen_range(0.6..0.8);
            for y in 0..r {
                for x in 0..r {
                    let cx = ((x as f64 + ox) / cell).floor() as i64;
                    let cy = ((y as f64 + oy) / cell).floor() as i64;
                    v[y * r + x] = if (cx + cy).rem_euclid(2) == 0 { lo } else { hi };
                }
            }
        }
        BackgroundKind::Noise => {
            // Smooth value noise over three octaves.
            let mut amp_total = 0.0;
            for (octave, amp) in [(4usize, 1.0), (8, 0.5), (16, 0.25)] {
                let cells = octave.min(r.max(2));
                let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f64>()).collect();
                let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                for y in 0..r {
                    let gy = y as f64 / rf * cells as f64;
                    let (iy, ty) = (gy.floor() as usize, smooth(gy.fract()));
                    for x in 0..r {
                        let gx = x as f64 / rf * cells as f64;
                        let (ix, tx) = (gx.floor() as usize, smooth(gx.fract()));
                        let at = |a: usize, b: usize| grid[a * (cells + 1) + b];
                        let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                        let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                        v[y * r + x] += amp * (top * (1.0 - ty) + bot * ty);
                    }
                }
                amp_total += amp;
            }
            v.iter_mut().for_each(|p| *p = 0.2 + 0.6 * *p / amp_total);
        }
    }
    v
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Rasterizes a thick polyline, translated so its bounding box lands at a
/// random position fully inside the image.
fn stroke_mask(r: usize, points: &[(f64, f64)], thickness: f64, rng: &mut ChaCha8Rng) -> Mask {
    let half = thickness / 2.0;
    let min_x = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - half;
    let max_x = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) + half;
    let min_y = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) - half;
    let max_y = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) + half;
    let rf = r as f64;
    let slack_x = (rf - (max_x - min_x)).max(0.0);
    let slack_y = (rf - (max_y - min_y)).max(0.0);
    let sx = rng.gen_range(0.0..=slack_x) - min_x;
    let sy = rng.gen_range(0.0..=slack_y) - min_y;
    let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.0 + sx, p.1 + sy)).collect();
    let mut mask = Mask::empty(r, r);
    for y in 0..r {
        for x in 0..r {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = pts
                .windows(2)
                .map(|w| segment_distance(px, py, w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            mask.bits[y * r + x] = d <= half;
        }
    }
    mask
}

fn defect_mask(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Mask {
    let r = spec.resolution;
    let rf = r as f64;
    let extent = spec.size_fraction * rf;
    match spec.defect {
        DefectKind::Blob => {
            // Ellipse with the area of a disc of diameter `extent`.
            let aspect: f64 = rng.gen_range(0.8..1.25);
            let a = extent / 2.0 * aspect.sqrt();
            let b = extent / 2.0 / aspect.sqrt();
            let rot = rng.gen_range(0.0..PI);
            let reach = a.max(b);
            let cx = rng.gen_range(reach..=(rf - reach));
            let cy = rng.gen_range(reach..=(rf - reach));
            let (c, s) = (rot.cos(), rot.sin());
            let mut mask = Mask::empty(r, r);
            for y in 0..r {
                for x in 0..r {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                    mask.bits[y * r + x] = (u / a).powi(2) + (v / b).powi(2) <= 1.0;
                }
            }
            mask
        }
        DefectKind::Crack => {
            // Jagged four-segment walk with area close to extent².
            let thickness = extent / 2.0;
            let length = (2.0 * extent).min(0.8 * rf - thickness);
            let mut heading = rng.gen_range(0.0..2.0 * PI);
            let mut pts = vec![(0.0, 0.0)];
            for _ in 0..4 {
                heading += rng.gen_range(-PI / 4.0..PI / 4.0);
                let last = *pts.last().expect("non-empty");
                pts.push((last.0 + length / 4.0 * heading.cos(), last.1 + length / 4.0 * heading.sin()));
            }
            stroke_mask(r, &pts, thickness, rng)
        }
        DefectKind::Scratch => {
            let length = (4.0 * extent).min(0.9 * rf);
            let thickness = extent * extent / length;
            let angle = rng.gen_range(0.0..PI);
            let pts = [(0.0, 0.0), (length * angle.cos(), length * angle.sin())];
            stroke_mask(r, &pts, thickness, rng)
        }
    }
}

struct Sample {
    image: Image,
    background: Image,
    mask: Option<Mask>,
}

fn render(spec: &SyntheticSpec, label: Label, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = spec.resolution;
    let base = background(spec, &mut rng);
    let tint: Vec<f64> = (0..spec.channels).map(|_| rng.gen_range(0.85..1.0)).collect();
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut bg = vec![0.0f64; spec.channels * r * r];
    for (c, t) in tint.iter().enumerate() {
        for i in 0..r * r {
            let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            bg[c * r * r + i] = (base[i] * t + n).clamp(0.0, 1.0);
        }
    }
    let mask = label.is_abnormal().then(|| defect_mask(spec, &mut rng));
    let mut img = bg.clone();
    if let Some(m) = &mask {
        for i in (0..r * r).filter(|&i| m.bits[i]) {
            // Push towards the far end of the intensity range.
            let lum = (0..spec.channels).map(|c| bg[c * r * r + i]).sum::<f64>() / spec.channels as f64;
            let target = if lum < 0.5 { 1.0 } else { 0.0 };
            for c in 0..spec.channels {
                let v = bg[c * r * r + i];
                img[c * r * r + i] = v + spec.contrast * (target - v);
            }
        }
    }
    let to_image = |d: Vec<f64>| Image::new(spec.channels, r, r, d.into_iter().map(|v| v as f32).collect());
    Ok(Sample { image: to_image(img)?, background: to_image(bg)?, mask })
}

/// Seeded synthetic corpus plus the defect-free background behind each image.
pub fn synthesize_with_backgrounds(spec: &SyntheticSpec) -> Result<(LabeledImageSet, Vec<Image>)> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::with_capacity(spec.n_normal + spec.n_abnormal);
    let mut backgrounds = Vec::with_capacity(images.capacity());
    let plan = std::iter::repeat(Label::Normal)
        .take(spec.n_normal)
        .chain(std::iter::repeat(Label::Abnormal).take(spec.n_abnormal));
    for (i, label) in plan.enumerate() {
        let sample = render(spec, label, master.next_u64())?;
        let source_id = format!("synthetic/{}/{}_{:05}", spec.seed, label, i);
        let meta = ImageMeta { subclass: None, defect_mask: sample.mask };
        images.push(LabeledImage { image: sample.image, label, source_id, meta });
        backgrounds.push(sample.background);
    }
    let name = format!("synthetic-{:?}-{:?}", spec.defect, spec.background).to_lowercase();
    Ok((LabeledImageSet::new(name, images), backgrounds))
}

pub fn synthesize_toy_dataset(spec: &SyntheticSpec) -> Result<LabeledImageSet> {
    Ok(synthesize_with_backgrounds(spec)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSpec::blobs(32, 100, 100, 7);
        let a = synthesize_toy_dataset(&spec).unwrap();
        let b = synthesize_toy_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let bytes = |s: &LabeledImageSet| -> Vec<u8> {
            s.images().iter().flat_map(|i| i.image.data().iter().flat_map(|v| v.to_le_bytes())).collect()
        };
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn zero_contrast_leaves_background() {
        let spec = SyntheticSpec { contrast: 0.0, ..SyntheticSpec::blobs(32, 3, 5, 1) };
        let (set, bgs) = synthesize_with_backgrounds(&spec).unwrap();
        for (img, bg) in set.images().iter().zip(&bgs) {
            assert_eq!(&img.image, bg);
        }
        assert_eq!(set.iter_label(Label::Abnormal).count(), 5);
    }

    #[test]
    fn masks_only_on_abnormal_images() {
        for defect in [DefectKind::Blob, DefectKind::Crack, DefectKind::Scratch] {
            for background in [BackgroundKind::Stripes, BackgroundKind::Checker, BackgroundKind::Noise] {
                let spec = SyntheticSpec { defect, background, ..SyntheticSpec::blobs(32, 4, 4, 3) };
                let (set, bgs) = synthesize_with_backgrounds(&spec).unwrap();
                for (img, bg) in set.images().iter().zip(&bgs) {
                    match img.label {
                        Label::Normal => {
                            assert!(img.meta.defect_mask.is_none());
                            assert_eq!(&img.image, bg);
                        }
                        Label::Abnormal => {
                            let m = img.meta.defect_mask.as_ref().expect("mask");
                            assert!(m.area() > 0);
                            assert_ne!(&img.image, bg);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_sub_pixel_defects_and_bad_specs() {
        let tiny = SyntheticSpec { size_fraction: 0.02, ..SyntheticSpec::blobs(32, 1, 1, 0) };
        assert!(matches!(synthesize_toy_dataset(&tiny), Err(Error::Spec(_))));
        let big = SyntheticSpec { size_fraction: 0.5, ..SyntheticSpec::blobs(32, 1, 1, 0) };
        assert!(big.validate().is_err());
        let empty = SyntheticSpec { n_normal: 0, ..SyntheticSpec::blobs(32, 1, 1, 0) };
        assert!(empty.validate().is_err());
    }
}

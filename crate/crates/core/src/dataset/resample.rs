use super::{Image, LabeledImage};
use crate::error::{Error, Result};

/// Identifier of the resampling kernel, recorded in load reports.
pub const BICUBIC_KERNEL: &str = "bicubic catmull-rom (a = -0.5), antialiased when downscaling";

const A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per-output-sample taps `(first input index, weights)` along one axis.
/// Input indices are clamped at the borders.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    let filter_scale = scale.max(1.0);
    let support = 2.0 * filter_scale;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|j| {
                    let w = cubic((j as f64 - center) / filter_scale);
                    (w != 0.0).then(|| (j.clamp(0, in_len as isize - 1) as usize, w))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resampling to `out_h × out_w`; output clamped to `[0, 1]`.
pub fn resize_bicubic(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!("resolution must be positive, got {out_h}×{out_w}")));
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let xtaps = axis_taps(w, out_w);
    let ytaps = axis_taps(h, out_h);
    let mut data = Vec::with_capacity(ch * out_h * out_w);
    let mut rows = vec![0.0f64; h * out_w];
    for c in 0..ch {
        let plane = img.plane(c);
        for y in 0..h {
            let line = &plane[y * w..(y + 1) * w];
            for (x, taps) in xtaps.iter().enumerate() {
                rows[y * out_w + x] = taps.iter().map(|&(j, wt)| wt * line[j] as f64).sum();
            }
        }
        for taps in &ytaps {
            for x in 0..out_w {
                let v: f64 = taps.iter().map(|&(j, wt)| wt * rows[j * out_w + x]).sum();
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(ch, out_h, out_w, data)
}

/// Bicubic resize to a square `resolution`, preserving label and id.
pub fn preprocess(image: &LabeledImage, resolution: usize) -> Result<LabeledImage> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let resized = resize_bicubic(&image.image, resolution, resolution)?;
    let mut meta = image.meta.clone();
    if let Some(mask) = &meta.defect_mask {
        if (mask.height, mask.width) != (resolution, resolution) {
            meta.defect_mask = Some(resize_mask(mask, resolution));
        }
    }
    Ok(LabeledImage { image: resized, label: image.label, source_id: image.source_id.clone(), meta })
}

fn resize_mask(mask: &super::Mask, resolution: usize) -> super::Mask {
    let mut out = super::Mask::empty(resolution, resolution);
    for y in 0..resolution {
        let sy = ((y as f64 + 0.5) * mask.height as f64 / resolution as f64) as usize;
        for x in 0..resolution {
            let sx = ((x as f64 + 0.5) * mask.width as f64 / resolution as f64) as usize;
            out.bits[y * resolution + x] = mask.get(sy.min(mask.height - 1), sx.min(mask.width - 1));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;

    fn ramp(ch: usize, h: usize, w: usize) -> Image {
        Image::from_fn(ch, h, w, |c, y, x| ((y * 7 + x * 3 + c) % 17) as f32 / 16.0).unwrap()
    }

    #[test]
    fn kernel_interpolates_at_integer_offsets() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        let s: f64 = (-2..=2).map(|k| cubic(k as f64 + 0.3)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_input_downscales_to_target() {
        let img = LabeledImage::new(ramp(3, 1024, 1024), Label::Normal, "big");
        let out = preprocess(&img, 256).unwrap();
        assert_eq!((out.image.height(), out.image.width(), out.image.channels()), (256, 256, 3));
        assert_eq!(out.label, Label::Normal);
        assert_eq!(out.source_id, "big");
    }

    #[test]
    fn matching_resolution_is_identity() {
        let img = ramp(1, 256, 256);
        let out = resize_bicubic(&img, 256, 256).unwrap();
        let max = img.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(max <= 1e-6, "max delta {max}");
    }

    #[test]
    fn constant_stays_constant() {
        for (h, w, r) in [(37, 53, 16), (10, 10, 64), (300, 200, 256)] {
            let img = Image::filled(3, h, w, 0.5).unwrap();
            let out = resize_bicubic(&img, r, r).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
        }
    }

    #[test]
    fn non_positive_resolution_is_config_error() {
        let img = LabeledImage::new(ramp(1, 4, 4), Label::Normal, "x");
        assert!(matches!(preprocess(&img, 0), Err(Error::Config(_))));
    }

    #[test]
    fn output_is_clamped() {
        // Catmull-Rom overshoots near hard edges.
        let img = Image::from_fn(1, 8, 8, |_, _, x| if x < 4 { 0.0 } else { 1.0 }).unwrap();
        let out = resize_bicubic(&img, 21, 21).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

//! Score histograms as PNG: normal scores as a solid green outline,
//! abnormal scores dashed red, the ZFN threshold in grey and the ACC
//! threshold in black.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;

const GREEN: Rgb<u8> = Rgb([0, 150, 0]);
const RED: Rgb<u8> = Rgb([210, 0, 0]);
const GREY: Rgb<u8> = Rgb([150, 150, 150]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);

#[derive(Clone, Debug)]
pub struct HistogramSpec {
    pub bins: usize,
    pub zfn_threshold: Option<f64>,
    pub acc_threshold: Option<f64>,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bins: 30, zfn_threshold: None, acc_threshold: None }
    }
}

struct Canvas {
    img: RgbImage,
    lo: f64,
    hi: f64,
    ymax: f64,
}

impl Canvas {
    fn px(&self, v: f64) -> i64 {
        let t = if self.hi > self.lo { (v - self.lo) / (self.hi - self.lo) } else { 0.5 };
        MARGIN as i64 + (t * (WIDTH - 2 * MARGIN) as f64).round() as i64
    }

    fn py(&self, frac: f64) -> i64 {
        let t = if self.ymax > 0.0 { frac / self.ymax } else { 0.0 };
        (HEIGHT - MARGIN) as i64 - (t * (HEIGHT - 2 * MARGIN) as f64).round() as i64
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    /// Axis-aligned segment; `dash` > 0 draws `dash` pixels on, `dash` off.
    fn segment(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, dash: i64) {
        let n = (x1 - x0).abs().max((y1 - y0).abs());
        for i in 0..=n {
            if dash > 0 && (i / dash) % 2 == 1 {
                continue;
            }
            let x = x0 + (x1 - x0).signum() * i.min((x1 - x0).abs());
            let y = y0 + (y1 - y0).signum() * i.min((y1 - y0).abs());
            self.put(x, y, c);
            self.put(x, y + 1, c);
        }
    }
}

fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if values.is_empty() {
        return h;
    }
    for &v in values {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        h[((t * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    h.iter_mut().for_each(|c| *c /= values.len() as f64);
    h
}

/// Per-class normalized histograms over the common score range.
pub fn plot_histogram(normal: &[f64], abnormal: &[f64], spec: &HistogramSpec, path: &Path) -> Result<()> {
    let bins = spec.bins.max(1);
    let all = normal.iter().chain(abnormal).chain(spec.zfn_threshold.iter()).chain(spec.acc_threshold.iter());
    let finite: Vec<f64> = all.copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Calibration("no finite scores to plot".into()));
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hn = histogram(normal, lo, hi, bins);
    let ha = histogram(abnormal, lo, hi, bins);
    let ymax = hn.iter().chain(&ha).copied().fold(0.0, f64::max) * 1.1;
    let mut c = Canvas { img: RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255])), lo, hi, ymax };

    let base = c.py(0.0);
    c.segment((MARGIN as i64, base), ((WIDTH - MARGIN) as i64, base), BLACK, 0);
    c.segment((MARGIN as i64, base), (MARGIN as i64, MARGIN as i64), BLACK, 0);

    let edge = |i: usize| lo + (hi - lo) * i as f64 / bins as f64;
    for (h, colour, dash) in [(&hn, GREEN, 0), (&ha, RED, 6)] {
        let mut prev_y = base;
        for (i, &v) in h.iter().enumerate() {
            let (x0, x1, y) = (c.px(edge(i)), c.px(edge(i + 1)), c.py(v));
            c.segment((x0, prev_y), (x0, y), colour, dash);
            c.segment((x0, y), (x1, y), colour, dash);
            prev_y = y;
        }
        let x_end = c.px(hi);
        c.segment((x_end, prev_y), (x_end, base), colour, dash);
    }
    for (tau, colour) in [(spec.zfn_threshold, GREY), (spec.acc_threshold, BLACK)] {
        if let Some(t) = tau.filter(|t| t.is_finite()) {
            let x = c.px(t);
            c.segment((x, base), (x, MARGIN as i64 / 2), colour, 4);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    c.img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_both_classes_and_threshold_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.png");
        let spec = HistogramSpec { bins: 10, zfn_threshold: Some(2.5), acc_threshold: Some(3.5) };
        plot_histogram(&[1.0, 2.0, 2.0, 3.0], &[3.0, 4.0, 5.0, 2.5], &spec, &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        for colour in [GREEN, RED, GREY, BLACK] {
            assert!(img.pixels().any(|px| *px == colour), "missing colour {colour:?}");
        }
        assert!(plot_histogram(&[], &[], &HistogramSpec::default(), &p).is_err());
    }
}

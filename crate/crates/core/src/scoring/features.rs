use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::model::{file_sha256, Checkpoint};
use crate::tensor::{Shape, Tensor};

/// Gaussian statistics of one activation grid, treating each spatial
/// position as a sample of a `dim`-dimensional feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// Row-major `dim × dim` unbiased covariance.
    pub sigma: Vec<f64>,
    pub n_samples: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, n_samples: usize) -> Result<Self> {
        if sigma.len() != mu.len() * mu.len() {
            return Err(Error::Shape(format!("covariance of {} entries for dimension {}", sigma.len(), mu.len())));
        }
        Ok(Self { mu, sigma, n_samples })
    }

    /// Statistics of a channel-major grid: `grid[c * positions + p]`.
    pub fn from_grid(grid: &[f64], channels: usize) -> Result<Self> {
        if channels == 0 || grid.len() % channels != 0 {
            return Err(Error::Shape(format!("{} values do not split into {channels} channels", grid.len())));
        }
        let n = grid.len() / channels;
        if n < 2 {
            return Err(Error::InsufficientSamples(format!(
                "covariance needs at least 2 spatial positions, got {n}"
            )));
        }
        let rows: Vec<&[f64]> = grid.chunks(n).collect();
        let mu: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let centered: Vec<Vec<f64>> = rows.iter().zip(&mu).map(|(r, m)| r.iter().map(|v| v - m).collect()).collect();
        let mut sigma = vec![0.0; channels * channels];
        for i in 0..channels {
            for j in i..channels {
                let s: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / (n - 1) as f64;
                sigma[i * channels + j] = s;
                sigma[j * channels + i] = s;
            }
        }
        Ok(Self { mu, sigma, n_samples: n })
    }
}

/// Maps an image to a `1 × C × H' × W'` activation grid.
pub trait FeatureExtractor {
    fn activations(&self, image: &Image) -> Result<Tensor<f32>>;
    fn describe(&self) -> String;
}

pub fn extract_features(extractor: &dyn FeatureExtractor, image: &Image) -> Result<FeatureStats> {
    let act = extractor.activations(image)?;
    let grid: Vec<f64> = act.data().iter().map(|v| *v as f64).collect();
    FeatureStats::from_grid(&grid, act.shape().c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, k, k]`.
    pub weight: Tensor<f32>,
    /// `[1, out, 1, 1]`.
    pub bias: Tensor<f32>,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    stride: usize,
    padding: usize,
    relu: bool,
}

const EXTRACTOR_KIND: &str = "feature-extractor";

/// A plain convolution stack applied to images mapped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvExtractor {
    pub name: String,
    pub layers: Vec<ConvLayer>,
}

impl ConvExtractor {
    /// Seeded random stand-in for a pretrained network: 3×3 conv to 16
    /// channels, ReLU, stride-2 3×3 conv to 32 channels, ReLU. He-normal
    /// weights, zero biases.
    pub fn random(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for (cout, stride) in [(16, 1), (32, 2)] {
            let fan_in = (cin * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let shape = Shape::new(cout, cin, 3, 3);
            let w = (0..shape.numel()).map(|_| normal.sample(&mut rng) as f32).collect();
            layers.push(ConvLayer {
                weight: Tensor::from_vec(shape, w).expect("shape"),
                bias: Tensor::zeros(Shape::new(1, cout, 1, 1)),
                stride,
                padding: 1,
                relu: true,
            });
            cin = cout;
        }
        Self { name: format!("random-conv(seed={seed})"), layers }
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.shape().c)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta: Vec<LayerMeta> =
            self.layers.iter().map(|l| LayerMeta { stride: l.stride, padding: l.padding, relu: l.relu }).collect();
        let mut ckpt = Checkpoint::new(serde_json::json!({
            "kind": EXTRACTOR_KIND,
            "name": self.name,
            "layers": serde_json::to_value(meta)?,
        }));
        for (i, l) in self.layers.iter().enumerate() {
            ckpt.push(format!("layer{i}.weight"), l.weight.clone());
            ckpt.push(format!("layer{i}.bias"), l.bias.clone());
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    /// Loads weights from a checkpoint file, checking its SHA-256 first
    /// when `expected_sha256` is given.
    pub fn load(path: &Path, expected_sha256: Option<&str>) -> Result<Self> {
        if let Some(want) = expected_sha256 {
            let got = file_sha256(path)?;
            if !got.eq_ignore_ascii_case(want) {
                return Err(Error::Checkpoint(format!(
                    "{}: checksum {got} does not match expected {want}",
                    path.display()
                )));
            }
        }
        let ckpt = Checkpoint::read(path)?;
        if ckpt.metadata.get("kind").and_then(|k| k.as_str()) != Some(EXTRACTOR_KIND) {
            return Err(Error::Checkpoint(format!("{} is not a feature extractor", path.display())));
        }
        let meta: Vec<LayerMeta> = serde_json::from_value(ckpt.metadata["layers"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad layer list: {e}")))?;
        let mut layers = Vec::with_capacity(meta.len());
        let mut cin = None;
        for (i, m) in meta.into_iter().enumerate() {
            let weight = ckpt.get(&format!("layer{i}.weight"))?.clone();
            let bias = ckpt.get(&format!("layer{i}.bias"))?.clone();
            let ws = weight.shape();
            if ws.h != ws.w || bias.shape() != Shape::new(1, ws.n, 1, 1) || cin.is_some_and(|c| c != ws.c) {
                return Err(Error::Checkpoint(format!("layer {i} has inconsistent shapes")));
            }
            cin = Some(ws.n);
            layers.push(ConvLayer { weight, bias, stride: m.stride.max(1), padding: m.padding, relu: m.relu });
        }
        if layers.is_empty() {
            return Err(Error::Checkpoint("feature extractor has no layers".into()));
        }
        let name = ckpt.metadata["name"].as_str().unwrap_or("conv-extractor").to_owned();
        Ok(Self { name, layers })
    }
}

impl FeatureExtractor for ConvExtractor {
    fn activations(&self, image: &Image) -> Result<Tensor<f32>> {
        let want = self.in_channels();
        let mut x = image.to_model_tensor();
        if image.channels() != want {
            // Grayscale into a colour network: replicate the plane.
            if image.channels() == 1 && want == 3 {
                let refs = [&x, &x, &x];
                let s = x.shape();
                let stacked = Tensor::concat(&refs)?;
                x = Tensor::from_vec(Shape::new(1, 3, s.h, s.w), stacked.into_vec())?;
            } else {
                return Err(Error::Shape(format!(
                    "extractor expects {want} channels, image has {}",
                    image.channels()
                )));
            }
        }
        let mut tape = Tape::new();
        let mut h = tape.leaf(x, false);
        for l in &self.layers {
            let k = l.weight.shape().h;
            let s = tape.shape(h);
            if s.h + 2 * l.padding < k || s.w + 2 * l.padding < k {
                return Err(Error::Shape(format!("image {}×{} too small for the extractor", image.height(), image.width())));
            }
            let w = tape.leaf(l.weight.clone(), false);
            let b = tape.leaf(l.bias.clone(), false);
            h = tape.conv2d(h, w, Some(b), l.stride, l.padding);
            if l.relu {
                h = tape.relu(h);
            }
        }
        Ok(tape.value(h).clone())
    }

    fn describe(&self) -> String {
        self.name.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_grid_has_zero_covariance() {
        let grid = [vec![2.0; 9], vec![-1.0; 9]].concat();
        let s = FeatureStats::from_grid(&grid, 2).unwrap();
        assert_eq!(s.mu, vec![2.0, -1.0]);
        assert!(s.sigma.iter().all(|v| *v == 0.0));
        assert_eq!(s.n_samples, 9);
    }

    #[test]
    fn two_by_two_grid_by_hand() {
        // channel 0 at the four positions: 1, 2, 3, 6; channel 1: 0, 0, 1, 3
        let grid = [1.0, 2.0, 3.0, 6.0, 0.0, 0.0, 1.0, 3.0];
        let s = FeatureStats::from_grid(&grid, 2).unwrap();
        assert_eq!(s.mu, vec![3.0, 1.0]);
        // deviations: (-2,-1,0,3) and (-1,-1,0,2)
        assert!((s.sigma[0] - 14.0 / 3.0).abs() < 1e-12);
        assert!((s.sigma[3] - 6.0 / 3.0).abs() < 1e-12);
        assert!((s.sigma[1] - 9.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.sigma[1], s.sigma[2]);
    }

    #[test]
    fn single_position_is_insufficient() {
        assert!(matches!(FeatureStats::from_grid(&[1.0, 2.0, 3.0], 3), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn random_extractor_is_deterministic_and_round_trips() {
        let img = Image::from_fn(3, 16, 16, |c, y, x| ((c * 5 + y * 3 + x) % 11) as f32 / 10.0).unwrap();
        let e = ConvExtractor::random(3, 7);
        let a = extract_features(&e, &img).unwrap();
        let b = extract_features(&ConvExtractor::random(3, 7), &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 32);
        assert_eq!(a.n_samples, 64);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.ckpt");
        e.save(&path).unwrap();
        let sha = file_sha256(&path).unwrap();
        let back = ConvExtractor::load(&path, Some(&sha)).unwrap();
        assert_eq!(back, e);
        assert!(matches!(ConvExtractor::load(&path, Some("00")), Err(Error::Checkpoint(_))));
    }
}

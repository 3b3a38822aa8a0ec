//! Residual generators and PatchGAN discriminators.
//!
//! Layer layout, widths, reflection padding, `tanh` output and the
//! `N(0, 0.02)` initialization follow the reference Cycle-GAN setup.
//! Instance normalization has no affine parameters.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{conv_out, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub use checkpoint::{file_sha256, Checkpoint, CHECKPOINT_FORMAT_VERSION};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    /// Stride-2 transpose convolution.
    #[default]
    Transpose,
    /// Nearest-neighbour ×2 followed by a 3×3 convolution.
    ResizeConv,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_residual_blocks: usize,
    #[serde(default)]
    pub upsample: UpsampleMode,
}

impl GeneratorSpec {
    /// Full-resolution configuration: 256², 9 residual blocks.
    pub fn default_256(channels: usize) -> Self {
        Self {
            resolution: 256,
            in_channels: channels,
            out_channels: channels,
            base_width: 64,
            n_residual_blocks: 9,
            upsample: UpsampleMode::Transpose,
        }
    }

    /// Low-resolution configuration: 64², 6 residual blocks.
    pub fn default_64(channels: usize) -> Self {
        Self { resolution: 64, n_residual_blocks: 6, ..Self::default_256(channels) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_residual_blocks == 0 {
            return Err(Error::Spec("generator needs at least one residual block".into()));
        }
        if self.resolution % 4 != 0 || self.resolution < 8 {
            return Err(Error::Spec(format!(
                "generator resolution {} must be a multiple of 4 and at least 8",
                self.resolution
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Spec("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// `(name, shape)` of every parameter tensor, in forward order.
    fn layout(&self) -> Vec<(String, Shape)> {
        let w = self.base_width;
        let mut out = Vec::new();
        let mut layer = |name: String, weight: Shape, cout: usize| {
            out.push((format!("{name}.weight"), weight));
            out.push((format!("{name}.bias"), Shape::new(1, cout, 1, 1)));
        };
        let conv = |cin: usize, cout: usize, k: usize| Shape::new(cout, cin, k, k);
        layer("stem".into(), conv(self.in_channels, w, 7), w);
        layer("down1".into(), conv(w, 2 * w, 3), 2 * w);
        layer("down2".into(), conv(2 * w, 4 * w, 3), 4 * w);
        for b in 0..self.n_residual_blocks {
            layer(format!("res{b}.conv1"), conv(4 * w, 4 * w, 3), 4 * w);
            layer(format!("res{b}.conv2"), conv(4 * w, 4 * w, 3), 4 * w);
        }
        for (i, (cin, cout)) in [(4 * w, 2 * w), (2 * w, w)].into_iter().enumerate() {
            let weight = match self.upsample {
                // transpose weights are [in, out, k, k]
                UpsampleMode::Transpose => Shape::new(cin, cout, 3, 3),
                UpsampleMode::ResizeConv => conv(cin, cout, 3),
            };
            layer(format!("up{}", i + 1), weight, cout);
        }
        layer("head".into(), conv(w, self.out_channels, 7), self.out_channels);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl DiscriminatorSpec {
    /// 70×70 PatchGAN: widths 64-128-256-512, strides 2-2-2-1-1.
    pub fn patchgan_70(channels: usize) -> Self {
        Self { in_channels: channels, widths: vec![64, 128, 256, 512] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() {
            return Err(Error::Spec("discriminator needs input channels and at least one width".into()));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Spec(format!(
                "discriminator widths {:?} must be positive and strictly increasing",
                self.widths
            )));
        }
        Ok(())
    }

    /// `(kernel, stride)` for every convolution, including the 1-channel head.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let n = self.widths.len();
        let mut out: Vec<(usize, usize)> =
            (0..n).map(|i| (4, if i + 1 < n || n == 1 { 2 } else { 1 })).collect();
        out.push((4, 1));
        out
    }

    fn layout(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("conv{i}.weight"), Shape::new(w, cin, 4, 4)));
            out.push((format!("conv{i}.bias"), Shape::new(1, w, 1, 1)));
            cin = w;
        }
        out.push(("head.weight".into(), Shape::new(1, cin, 4, 4)));
        out.push(("head.bias".into(), Shape::new(1, 1, 1, 1)));
        out
    }

    /// Spatial size of the patch map for a square input, if any.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        self.layers().iter().try_fold(input, |s, &(k, st)| conv_out(s, k, st, 1).filter(|&o| o > 0))
    }
}

/// Receptive field of one output unit of a stack of `(kernel, stride)`
/// convolutions: `r += (k - 1) · jump`, `jump *= stride`.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    let mut r = 1;
    let mut jump = 1;
    for &(k, s) in layers {
        r += (k - 1) * jump;
        jump *= s;
    }
    r
}

/// Named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    fn init(layout: Vec<(String, Shape)>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let data = (0..shape.numel()).map(|_| T::of_f64(normal.sample(&mut rng))).collect();
                Tensor::from_vec(shape, data).expect("layout shape")
            };
            names.push(name);
            tensors.push(t);
        }
        Self { names, tensors }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Checkpoint("parameter names and tensors differ in count".into()));
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All parameters concatenated in layout order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Puts every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
    }

    fn check_layout(&self, layout: &[(String, Shape)]) -> Result<()> {
        if layout.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (n, t)) in layout.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || *shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{n}` {} does not match expected `{name}` {shape}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

fn conv_block<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &[Var], stride: usize, pad: usize) -> Var {
    tape.conv2d(x, p[0], Some(p[1]), stride, pad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub params: ParamSet<T>,
}

/// Residual encoder–decoder with deterministic `N(0, 0.02)` initialization.
pub fn build_generator<T: Scalar>(spec: &GeneratorSpec, init_seed: u64) -> Result<Generator<T>> {
    spec.validate()?;
    Ok(Generator { spec: spec.clone(), params: ParamSet::init(spec.layout(), init_seed) })
}

impl<T: Scalar> Generator<T> {
    pub fn from_params(spec: GeneratorSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        params.check_layout(&spec.layout())?;
        Ok(Self { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let s = &self.spec;
        if shape.c != s.in_channels || shape.h != s.resolution || shape.w != s.resolution || shape.n == 0 {
            return Err(Error::Shape(format!(
                "generator expects [N, {}, {r}, {r}], got {shape}",
                s.in_channels,
                r = s.resolution
            )));
        }
        Ok(())
    }

    /// Forward pass on `tape` with parameters already bound as `params`.
    /// Input and output are in `[-1, 1]`.
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Var {
        let eps = INSTANCE_NORM_EPS;
        let mut p = params.chunks(2);
        let mut next = || p.next().expect("parameter layout exhausted");

        let h = tape.reflect_pad(x, 3);
        let h = conv_block(tape, h, next(), 1, 0);
        let h = tape.instance_norm(h, eps);
        let mut h = tape.relu(h);
        for _ in 0..2 {
            h = conv_block(tape, h, next(), 2, 1);
            h = tape.instance_norm(h, eps);
            h = tape.relu(h);
        }
        for _ in 0..self.spec.n_residual_blocks {
            let r = tape.reflect_pad(h, 1);
            let r = conv_block(tape, r, next(), 1, 0);
            let r = tape.instance_norm(r, eps);
            let r = tape.relu(r);
            let r = tape.reflect_pad(r, 1);
            let r = conv_block(tape, r, next(), 1, 0);
            let r = tape.instance_norm(r, eps);
            h = tape.add(h, r);
        }
        for _ in 0..2 {
            let w = next();
            h = match self.spec.upsample {
                UpsampleMode::Transpose => tape.conv_transpose2d(h, w[0], Some(w[1]), 2, 1, 1),
                UpsampleMode::ResizeConv => {
                    let u = tape.upsample_nearest(h, 2);
                    conv_block(tape, u, w, 1, 1)
                }
            };
            h = tape.instance_norm(h, eps);
            h = tape.relu(h);
        }
        let h = tape.reflect_pad(h, 3);
        let h = conv_block(tape, h, next(), 1, 0);
        tape.tanh(h)
    }

    /// Inference on a batch in `[-1, 1]`.
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let y = self.forward(&mut tape, &vars, xv);
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub spec: DiscriminatorSpec,
    pub params: ParamSet<T>,
}

/// PatchGAN with 4×4 kernels; outputs a map of raw (unsquashed) scores.
pub fn build_discriminator<T: Scalar>(spec: &DiscriminatorSpec, init_seed: u64) -> Result<Discriminator<T>> {
    spec.validate()?;
    Ok(Discriminator { spec: spec.clone(), params: ParamSet::init(spec.layout(), init_seed) })
}

impl<T: Scalar> Discriminator<T> {
    pub fn from_params(spec: DiscriminatorSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        params.check_layout(&spec.layout())?;
        Ok(Self { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.spec.layers())
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {shape}",
                self.spec.in_channels
            )));
        }
        if self.spec.output_size(shape.h).is_none() || self.spec.output_size(shape.w).is_none() {
            return Err(Error::Shape(format!("input {shape} too small for the discriminator")));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], x: Var) -> Var {
        let layers = self.spec.layers();
        let n = self.spec.widths.len();
        let mut h = x;
        for (i, p) in params.chunks(2).enumerate() {
            let (_, stride) = layers[i];
            h = conv_block(tape, h, p, stride, 1);
            if i == n {
                break;
            }
            if i > 0 {
                h = tape.instance_norm(h, INSTANCE_NORM_EPS);
            }
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        h
    }

    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let y = self.forward(&mut tape, &vars, xv);
        Ok(tape.value(y).clone())
    }
}

/// `G: 𝒳 ∪ 𝒴 → 𝒴` (towards normal), `F: 𝒳 ∪ 𝒴 → 𝒳` (towards abnormal)
/// and their discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair<T> {
    pub g: Generator<T>,
    pub f: Generator<T>,
    pub d_x: Discriminator<T>,
    pub d_y: Discriminator<T>,
}

impl<T: Scalar> ModelPair<T> {
    pub fn new(gen: &GeneratorSpec, disc: &DiscriminatorSpec, seed: u64) -> Result<Self> {
        if gen.in_channels != gen.out_channels || disc.in_channels != gen.out_channels {
            return Err(Error::Spec("generator and discriminator channel counts must agree".into()));
        }
        let sub = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        Ok(Self {
            g: build_generator(gen, sub(1))?,
            f: build_generator(gen, sub(2))?,
            d_x: build_discriminator(disc, sub(3))?,
            d_y: build_discriminator(disc, sub(4))?,
        })
    }
}

//! Alternating optimization of the two generators and two discriminators.
//!
//! Each step pairs a mini-batch of abnormal images `x` with one of normal
//! images `y`, updates `G` and `F` on the full generator objective, then
//! updates `D_X` and `D_Y` on fakes drawn through the history pools. All
//! randomness comes from the state's own ChaCha stream, so a run is a pure
//! function of its config, seed and training set, and a checkpoint resumes
//! bit-identically.

mod adam;
mod config;
mod pool;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::dataset::{Label, LabeledImageSet};
use crate::error::{Error, Result};
use crate::losses::{self, AdvMode, LossBreakdown, LossComponents, LossWeights};
use crate::model::{Checkpoint, Generator, ModelPair, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub use adam::{Adam, ADAM_EPS};
pub use config::{lr_at, ModelConfig, RunConfig, TrainConfig};
pub use pool::ImagePool;

/// Crate version written into every artifact.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Result of one generator forward (and optionally backward) pass.
pub struct GeneratorPass<T> {
    pub adv_g: f64,
    pub adv_f: f64,
    pub cyc: f64,
    pub ide: f64,
    pub total: f64,
    /// [`Tape::branch_fingerprint`] of the forward pass.
    pub branches: u64,
    /// `F(y)`, detached.
    pub fake_x: Tensor<T>,
    /// `G(x)`, detached.
    pub fake_y: Tensor<T>,
    pub grads_g: Vec<Tensor<T>>,
    pub grads_f: Vec<Tensor<T>>,
}

fn scalar<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().as_f64()
}

/// Full generator objective `adv_G + adv_F + λ_cyc·cyc + λ_ide·ide` on one
/// pair of batches, with the discriminators frozen. `x` is abnormal
/// (domain 𝒳), `y` normal (domain 𝒴), both in `[-1, 1]`.
pub fn generator_pass<T: Scalar>(
    pair: &ModelPair<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    mode: AdvMode,
    weights: LossWeights,
    with_grads: bool,
) -> Result<GeneratorPass<T>> {
    pair.g.check_input(x.shape())?;
    pair.g.check_input(y.shape())?;
    let mut tape = Tape::new();
    let pg = pair.g.params.bind(&mut tape, with_grads);
    let pf = pair.f.params.bind(&mut tape, with_grads);
    let pdx = pair.d_x.params.bind(&mut tape, false);
    let pdy = pair.d_y.params.bind(&mut tape, false);
    let xv = tape.leaf(x.clone(), false);
    let yv = tape.leaf(y.clone(), false);

    let fake_y = pair.g.forward(&mut tape, &pg, xv);
    let fake_x = pair.f.forward(&mut tape, &pf, yv);
    let rec_x = pair.f.forward(&mut tape, &pf, fake_y);
    let rec_y = pair.g.forward(&mut tape, &pg, fake_x);
    let idt_x = pair.f.forward(&mut tape, &pf, xv);
    let idt_y = pair.g.forward(&mut tape, &pg, yv);

    let dy = pair.d_y.forward(&mut tape, &pdy, fake_y);
    let dy = losses::squash(&mut tape, mode, dy);
    let adv_g = losses::gen_adv_loss(&mut tape, mode, dy);
    let dx = pair.d_x.forward(&mut tape, &pdx, fake_x);
    let dx = losses::squash(&mut tape, mode, dx);
    let adv_f = losses::gen_adv_loss(&mut tape, mode, dx);

    let cx = losses::l1(&mut tape, rec_x, xv);
    let cy = losses::l1(&mut tape, rec_y, yv);
    let cyc = tape.add(cx, cy);
    let ix = losses::l1(&mut tape, idt_x, xv);
    let iy = losses::l1(&mut tape, idt_y, yv);
    let ide = tape.add(ix, iy);
    let total = tape.weighted_sum(&[(adv_g, 1.0), (adv_f, 1.0), (cyc, weights.lambda_cyc), (ide, weights.lambda_ide)]);

    let (grads_g, grads_f) = if with_grads {
        let mut grads = tape.backward(total);
        let mut take = |vars: &[Var], params: &ParamSet<T>| -> Vec<Tensor<T>> {
            vars.iter()
                .zip(params.tensors())
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect()
        };
        (take(&pg, &pair.g.params), take(&pf, &pair.f.params))
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(GeneratorPass {
        adv_g: scalar(&tape, adv_g),
        adv_f: scalar(&tape, adv_f),
        cyc: scalar(&tape, cyc),
        ide: scalar(&tape, ide),
        total: scalar(&tape, total),
        branches: tape.branch_fingerprint(),
        fake_x: tape.value(fake_x).clone(),
        fake_y: tape.value(fake_y).clone(),
        grads_g,
        grads_f,
    })
}

struct DiscriminatorPass {
    adv_dx: f64,
    adv_dy: f64,
    grads_dx: Vec<Tensor<f32>>,
    grads_dy: Vec<Tensor<f32>>,
}

fn discriminator_pass(
    pair: &ModelPair<f32>,
    real_x: &Tensor<f32>,
    fake_x: &Tensor<f32>,
    real_y: &Tensor<f32>,
    fake_y: &Tensor<f32>,
    mode: AdvMode,
) -> DiscriminatorPass {
    let mut tape = Tape::new();
    let pdx = pair.d_x.params.bind(&mut tape, true);
    let pdy = pair.d_y.params.bind(&mut tape, true);
    let side = |tape: &mut Tape<f32>, d: &crate::model::Discriminator<f32>, p: &[Var], real: &Tensor<f32>, fake: &Tensor<f32>| {
        let r = tape.leaf(real.clone(), false);
        let f = tape.leaf(fake.clone(), false);
        let r = d.forward(tape, p, r);
        let r = losses::squash(tape, mode, r);
        let f = d.forward(tape, p, f);
        let f = losses::squash(tape, mode, f);
        losses::disc_loss(tape, mode, r, f)
    };
    let lx = side(&mut tape, &pair.d_x, &pdx, real_x, fake_x);
    let ly = side(&mut tape, &pair.d_y, &pdy, real_y, fake_y);
    let total = tape.add(lx, ly);
    let mut grads = tape.backward(total);
    let mut take = |vars: &[Var], params: &ParamSet<f32>| -> Vec<Tensor<f32>> {
        vars.iter()
            .zip(params.tensors())
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };
    let grads_dx = take(&pdx, &pair.d_x.params);
    let grads_dy = take(&pdy, &pair.d_y.params);
    DiscriminatorPass { adv_dx: scalar(&tape, lx), adv_dy: scalar(&tape, ly), grads_dx, grads_dy }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub pair: ModelPair<f32>,
    opt_g: Adam,
    opt_f: Adam,
    opt_dx: Adam,
    opt_dy: Adam,
    pool_x: ImagePool,
    pool_y: ImagePool,
    rng: ChaCha8Rng,
    pub epochs_done: usize,
    pub step_in_epoch: usize,
    pub iteration: u64,
    order_x: Vec<usize>,
    order_y: Vec<usize>,
    data_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    artifact_version: String,
    train: TrainConfig,
    model: ModelConfig,
    epochs_done: usize,
    step_in_epoch: usize,
    iteration: u64,
    rng: ChaCha8Rng,
    adam_t: [u64; 4],
    order_x: Vec<usize>,
    order_y: Vec<usize>,
    pool_x_len: usize,
    pool_y_len: usize,
    data_fingerprint: String,
}

const STATE_KIND: &str = "cyclegan-train-state";

impl TrainState {
    pub fn new(run: &RunConfig, data_fingerprint: String) -> Result<Self> {
        run.train.validate()?;
        run.model.validate()?;
        let pair = ModelPair::new(&run.model.generator_spec(), &run.model.discriminator_spec(), run.train.seed)?;
        let (b1, b2) = (run.train.beta1, run.train.beta2);
        Ok(Self {
            opt_g: Adam::new(&pair.g.params, b1, b2),
            opt_f: Adam::new(&pair.f.params, b1, b2),
            opt_dx: Adam::new(&pair.d_x.params, b1, b2),
            opt_dy: Adam::new(&pair.d_y.params, b1, b2),
            pair,
            pool_x: ImagePool::new(run.train.buffer_size),
            pool_y: ImagePool::new(run.train.buffer_size),
            rng: ChaCha8Rng::seed_from_u64(run.train.seed),
            config: run.train.clone(),
            model: run.model.clone(),
            epochs_done: 0,
            step_in_epoch: 0,
            iteration: 0,
            order_x: Vec::new(),
            order_y: Vec::new(),
            data_fingerprint,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = StateMeta {
            kind: STATE_KIND.into(),
            artifact_version: ARTIFACT_VERSION.into(),
            train: self.config.clone(),
            model: self.model.clone(),
            epochs_done: self.epochs_done,
            step_in_epoch: self.step_in_epoch,
            iteration: self.iteration,
            rng: self.rng.clone(),
            adam_t: [self.opt_g.t, self.opt_f.t, self.opt_dx.t, self.opt_dy.t],
            order_x: self.order_x.clone(),
            order_y: self.order_y.clone(),
            pool_x_len: self.pool_x.images().len(),
            pool_y_len: self.pool_y.images().len(),
            data_fingerprint: self.data_fingerprint.clone(),
        };
        let mut ckpt = Checkpoint::new(serde_json::to_value(&meta)?);
        let nets = [
            ("G", &self.pair.g.params, &self.opt_g),
            ("F", &self.pair.f.params, &self.opt_f),
            ("DX", &self.pair.d_x.params, &self.opt_dx),
            ("DY", &self.pair.d_y.params, &self.opt_dy),
        ];
        for (name, params, opt) in nets {
            ckpt.push_params(name, params);
            opt.save(&mut ckpt, &format!("adam_{name}"), params.names());
        }
        for (name, pool) in [("pool_x", &self.pool_x), ("pool_y", &self.pool_y)] {
            for (i, img) in pool.images().iter().enumerate() {
                ckpt.push(format!("{name}:{i}"), img.clone());
            }
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: StateMeta = serde_json::from_value(ckpt.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("not a training checkpoint: {e}")))?;
        if meta.kind != STATE_KIND {
            return Err(Error::Checkpoint(format!("unexpected checkpoint kind `{}`", meta.kind)));
        }
        let gspec = meta.model.generator_spec();
        let dspec = meta.model.discriminator_spec();
        let pair = ModelPair {
            g: Generator::from_params(gspec.clone(), ckpt.params("G")?)?,
            f: Generator::from_params(gspec, ckpt.params("F")?)?,
            d_x: crate::model::Discriminator::from_params(dspec.clone(), ckpt.params("DX")?)?,
            d_y: crate::model::Discriminator::from_params(dspec, ckpt.params("DY")?)?,
        };
        let (b1, b2) = (meta.train.beta1, meta.train.beta2);
        let t = meta.adam_t;
        let pool = |name: &str, len: usize| -> Result<ImagePool> {
            let imgs = (0..len).map(|i| ckpt.get(&format!("{name}:{i}")).cloned()).collect::<Result<_>>()?;
            Ok(ImagePool::with_images(meta.train.buffer_size, imgs))
        };
        Ok(Self {
            opt_g: Adam::load(ckpt, "adam_G", &pair.g.params, (b1, b2, t[0]))?,
            opt_f: Adam::load(ckpt, "adam_F", &pair.f.params, (b1, b2, t[1]))?,
            opt_dx: Adam::load(ckpt, "adam_DX", &pair.d_x.params, (b1, b2, t[2]))?,
            opt_dy: Adam::load(ckpt, "adam_DY", &pair.d_y.params, (b1, b2, t[3]))?,
            pool_x: pool("pool_x", meta.pool_x_len)?,
            pool_y: pool("pool_y", meta.pool_y_len)?,
            pair,
            rng: meta.rng,
            config: meta.train,
            model: meta.model,
            epochs_done: meta.epochs_done,
            step_in_epoch: meta.step_in_epoch,
            iteration: meta.iteration,
            order_x: meta.order_x,
            order_y: meta.order_y,
            data_fingerprint: meta.data_fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// The `G` generator (abnormal → normal) stored in a training checkpoint.
pub fn load_generator(ckpt: &Checkpoint) -> Result<Generator<f32>> {
    let model: ModelConfig = ckpt
        .metadata
        .get("model")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("checkpoint metadata lacks the model configuration".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Checkpoint(e.to_string())))?;
    Generator::from_params(model.generator_spec(), ckpt.params("G")?)
}

/// Identifies a training set by its ordered source ids and labels.
pub fn data_fingerprint(set: &LabeledImageSet) -> String {
    let mut h = Sha256::new();
    for img in set.images() {
        h.update(img.label.as_str().as_bytes());
        h.update([0]);
        h.update(img.source_id.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
}

/// Hooks called synchronously from the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_epoch_end(&mut self, _state: &TrainState) {}
}

impl TrainObserver for () {}

pub struct Trainer {
    state: TrainState,
    xs: Vec<Tensor<f32>>,
    ys: Vec<Tensor<f32>>,
}

impl Trainer {
    /// `train_set` must already be preprocessed to the model resolution.
    pub fn new(run: &RunConfig, train_set: &LabeledImageSet) -> Result<Self> {
        let state = TrainState::new(run, data_fingerprint(train_set))?;
        Self::from_state(state, train_set)
    }

    pub fn from_state(state: TrainState, train_set: &LabeledImageSet) -> Result<Self> {
        train_set.require_both_classes().map_err(|e| Error::Config(e.to_string()))?;
        if data_fingerprint(train_set) != state.data_fingerprint {
            return Err(Error::Config("training set differs from the one the checkpoint was trained on".into()));
        }
        let tensors = |label: Label| -> Result<Vec<Tensor<f32>>> {
            train_set
                .iter_label(label)
                .map(|img| {
                    let t = img.image.to_model_tensor();
                    state.pair.g.check_input(t.shape()).map_err(|e| {
                        Error::Config(format!("{}: {e} (preprocess to the model resolution first)", img.source_id))
                    })?;
                    Ok(t)
                })
                .collect()
        };
        let xs = tensors(Label::Abnormal)?;
        let ys = tensors(Label::Normal)?;
        Ok(Self { state, xs, ys })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// `ceil(max(|x|, |y|) / batch_size)`.
    pub fn steps_per_epoch(&self) -> usize {
        self.xs.len().max(self.ys.len()).div_ceil(self.state.config.batch_size)
    }

    fn epoch_order(n: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len + n);
        while out.len() < len {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            out.extend(p);
        }
        out.truncate(len);
        out
    }

    fn batch(pool: &[Tensor<f32>], idx: &[usize]) -> Tensor<f32> {
        let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &pool[i]).collect();
        Tensor::concat(&refs).expect("images share a shape")
    }

    /// One generator update followed by one discriminator update.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.state.is_finished() {
            return Err(Error::Config("training already finished".into()));
        }
        let steps = self.steps_per_epoch();
        let bs = self.state.config.batch_size;
        let s = &mut self.state;
        if s.step_in_epoch == 0 {
            s.order_x = Self::epoch_order(self.xs.len(), steps * bs, &mut s.rng);
            s.order_y = Self::epoch_order(self.ys.len(), steps * bs, &mut s.rng);
        }
        let epoch = s.epochs_done + 1;
        let iteration = s.iteration + 1;
        let lr = lr_at(epoch, &s.config)?;
        let range = s.step_in_epoch * bs..(s.step_in_epoch + 1) * bs;
        let x = Self::batch(&self.xs, &s.order_x[range.clone()]);
        let y = Self::batch(&self.ys, &s.order_y[range]);

        let weights = s.config.weights();
        let gp = generator_update(s, &x, &y, lr, iteration, epoch)?;
        let dp = discriminator_update(s, &x, &y, &gp, lr, iteration, epoch)?;

        let losses = losses::total_objective(
            LossComponents {
                adv_g: gp.adv_g,
                adv_f: gp.adv_f,
                adv_dx: dp.adv_dx,
                adv_dy: dp.adv_dy,
                cyc: gp.cyc,
                ide: gp.ide,
            },
            weights,
        )?;
        s.iteration = iteration;
        s.step_in_epoch += 1;
        if s.step_in_epoch == steps {
            s.step_in_epoch = 0;
            s.epochs_done += 1;
            s.order_x.clear();
            s.order_y.clear();
        }
        Ok(StepRecord { iteration, epoch, lr, losses })
    }
}

fn finite(term: &'static str, value: f64, iteration: u64, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { iteration, epoch, term, value })
    }
}

/// Adam step on `G` and `F` with both discriminators frozen.
fn generator_update(
    s: &mut TrainState,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    lr: f64,
    iteration: u64,
    epoch: usize,
) -> Result<GeneratorPass<f32>> {
    let gp = generator_pass(&s.pair, x, y, s.config.adv_mode, s.config.weights(), true)?;
    for (term, v) in [("adv_G", gp.adv_g), ("adv_F", gp.adv_f), ("cyc", gp.cyc), ("ide", gp.ide)] {
        finite(term, v, iteration, epoch)?;
    }
    s.opt_g.step(&mut s.pair.g.params, &gp.grads_g, lr);
    s.opt_f.step(&mut s.pair.f.params, &gp.grads_f, lr);
    Ok(gp)
}

/// Adam step on `D_X` and `D_Y` against pooled fakes, generators frozen.
fn discriminator_update(
    s: &mut TrainState,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    gp: &GeneratorPass<f32>,
    lr: f64,
    iteration: u64,
    epoch: usize,
) -> Result<DiscriminatorPass> {
    let fake_x = s.pool_x.push_batch(&gp.fake_x, &mut s.rng);
    let fake_y = s.pool_y.push_batch(&gp.fake_y, &mut s.rng);
    let dp = discriminator_pass(&s.pair, x, &fake_x, y, &fake_y, s.config.adv_mode);
    finite("adv_DX", dp.adv_dx, iteration, epoch)?;
    finite("adv_DY", dp.adv_dy, iteration, epoch)?;
    s.opt_dx.step(&mut s.pair.d_x.params, &dp.grads_dx, lr);
    s.opt_dy.step(&mut s.pair.d_y.params, &dp.grads_dy, lr);
    Ok(dp)
}

/// Append-only CSV of per-step losses.
pub struct TrainLog {
    file: fs::File,
}

impl TrainLog {
    pub const HEADER: &'static str =
        "iteration,epoch,lr,adv_G,adv_F,adv_DX,adv_DY,cyc,ide,total_generator,total_discriminator";

    /// Opens `path`, dropping rows past `keep_through` left by an
    /// interrupted run.
    pub fn open(path: &Path, keep_through: u64) -> Result<Self> {
        let mut kept = String::from(Self::HEADER);
        kept.push('\n');
        if keep_through > 0 {
            if let Ok(text) = fs::read_to_string(path) {
                for line in text.lines().skip(1) {
                    let it: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
                    if it <= keep_through {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        fs::write(path, kept).map_err(|e| Error::file(path, e))?;
        let file = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::file(path, e))?;
        Ok(Self { file })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        let mut line = format!("{},{},{:e}", r.iteration, r.epoch, r.lr);
        for v in r.losses.values() {
            line.push_str(&format!(",{v:e}"));
        }
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}

/// Parses a training log back into records.
pub fn read_train_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            row.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse { line, message: format!("bad field {i}") })
        };
        let v: Vec<f64> = (3..11).map(num).collect::<Result<_>>()?;
        out.push(StepRecord {
            iteration: num(0)? as u64,
            epoch: num(1)? as usize,
            lr: num(2)?,
            losses: LossBreakdown {
                adv_g: v[0],
                adv_f: v[1],
                adv_dx: v[2],
                adv_dy: v[3],
                cyc: v[4],
                ide: v[5],
                total_generator: v[6],
                total_discriminator: v[7],
            },
        });
    }
    Ok(out)
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Runs the remaining epochs. With an output directory, writes
/// `log.csv` and `ckpt/epoch_NNNN.ckpt` every `checkpoint_every` epochs
/// plus `ckpt/final.ckpt`; returns the checkpoint paths written.
pub fn train(trainer: &mut Trainer, out: Option<&Path>, observer: &mut dyn TrainObserver) -> Result<Vec<PathBuf>> {
    let mut log = out.map(|d| TrainLog::open(&d.join("log.csv"), trainer.state.iteration)).transpose()?;
    let mut written = Vec::new();
    while !trainer.state.is_finished() {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                if let (Some(dir), Error::NonFiniteLoss { iteration, epoch, term, value }) = (out, &e) {
                    let snap = serde_json::json!({
                        "iteration": iteration, "epoch": epoch, "term": term, "value": value.to_string()
                    });
                    let _ = fs::write(dir.join("nonfinite.json"), snap.to_string());
                }
                return Err(e);
            }
        };
        if let Some(log) = log.as_mut() {
            log.append(&rec)?;
        }
        observer.on_step(&rec);
        if trainer.state.step_in_epoch == 0 {
            let s = &trainer.state;
            observer.on_epoch_end(s);
            log::info!(
                "epoch {}/{} done: G {:.4} D {:.4}",
                s.epochs_done,
                s.config.epochs,
                rec.losses.total_generator,
                rec.losses.total_discriminator
            );
            if let Some(dir) = out {
                let ckpt_dir = dir.join("ckpt");
                if s.epochs_done % s.config.checkpoint_every == 0 || s.is_finished() {
                    let p = checkpoint_path(&ckpt_dir, s.epochs_done);
                    s.save(&p)?;
                    written.push(p);
                }
                if s.is_finished() {
                    let p = ckpt_dir.join(FINAL_CHECKPOINT);
                    s.save(&p)?;
                    written.push(p);
                }
            }
        }
    }
    Ok(written)
}

//! Adversarial, cycle-consistency and identity losses and their weighted
//! composition.
//!
//! Every loss is a mean over pixels (or patch units) and batch. The tensor
//! functions here evaluate the same tape graph that training differentiates,
//! so the reported numbers and the optimized objective cannot drift apart.
//!
//! Least-squares adversarial loss is the training default. The log form
//! (`E log D(y) + E log(1 - D(G(x)))`, non-saturating on the generator side)
//! is available through [`AdvMode::Log`].

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Clamp applied before every logarithm in log mode.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvMode {
    #[default]
    LeastSquares,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_ide: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cyc: 10.0, lambda_ide: 5.0 }
    }
}

impl LossWeights {
    pub fn new(lambda_cyc: f64, lambda_ide: f64) -> Result<Self> {
        let w = Self { lambda_cyc, lambda_ide };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cyc", self.lambda_cyc), ("lambda_ide", self.lambda_ide)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-step loss values. Discriminator terms are the quantities each
/// discriminator minimizes (in log mode, the negated log-likelihood).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_f: f64,
    pub adv_dx: f64,
    pub adv_dy: f64,
    pub cyc: f64,
    pub ide: f64,
    pub total_generator: f64,
    pub total_discriminator: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 8] =
        ["adv_G", "adv_F", "adv_DX", "adv_DY", "cyc", "ide", "total_generator", "total_discriminator"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.adv_g,
            self.adv_f,
            self.adv_dx,
            self.adv_dy,
            self.cyc,
            self.ide,
            self.total_generator,
            self.total_discriminator,
        ]
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        Self::FIELDS.iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, v)| (*n, v))
    }
}

/// Raw component values fed to [`total_objective`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub adv_g: f64,
    pub adv_f: f64,
    pub adv_dx: f64,
    pub adv_dy: f64,
    pub cyc: f64,
    pub ide: f64,
}

pub fn total_objective(c: LossComponents, weights: LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(LossBreakdown {
        adv_g: c.adv_g,
        adv_f: c.adv_f,
        adv_dx: c.adv_dx,
        adv_dy: c.adv_dy,
        cyc: c.cyc,
        ide: c.ide,
        total_generator: c.adv_g + c.adv_f + weights.lambda_cyc * c.cyc + weights.lambda_ide * c.ide,
        total_discriminator: c.adv_dx + c.adv_dy,
    })
}

/// Maps raw discriminator outputs to the space the loss expects:
/// a sigmoid in log mode, unchanged for least squares.
pub fn squash<T: Scalar>(tape: &mut Tape<T>, mode: AdvMode, raw: Var) -> Var {
    match mode {
        AdvMode::LeastSquares => raw,
        AdvMode::Log => tape.sigmoid(raw),
    }
}

/// Discriminator loss to minimize on already-squashed scores.
pub fn disc_loss<T: Scalar>(tape: &mut Tape<T>, mode: AdvMode, real: Var, fake: Var) -> Var {
    match mode {
        AdvMode::LeastSquares => {
            let r = tape.affine(real, 1.0, -1.0);
            let r = tape.square(r);
            let r = tape.mean(r);
            let f = tape.square(fake);
            let f = tape.mean(f);
            tape.weighted_sum(&[(r, 0.5), (f, 0.5)])
        }
        AdvMode::Log => {
            let lr = tape.log_clamped(real, LOG_EPS);
            let lr = tape.mean(lr);
            let inv = tape.affine(fake, -1.0, 1.0);
            let lf = tape.log_clamped(inv, LOG_EPS);
            let lf = tape.mean(lf);
            tape.weighted_sum(&[(lr, -1.0), (lf, -1.0)])
        }
    }
}

/// Generator adversarial loss to minimize on already-squashed fake scores.
pub fn gen_adv_loss<T: Scalar>(tape: &mut Tape<T>, mode: AdvMode, fake: Var) -> Var {
    match mode {
        AdvMode::LeastSquares => {
            let f = tape.affine(fake, 1.0, -1.0);
            let f = tape.square(f);
            tape.mean(f)
        }
        AdvMode::Log => {
            let l = tape.log_clamped(fake, LOG_EPS);
            let l = tape.mean(l);
            tape.affine(l, -1.0, 0.0)
        }
    }
}

/// `mean |a - b|`.
pub fn l1<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.abs(d);
    tape.mean(d)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Adversarial loss on score maps that are already in the loss's space
/// (probabilities in log mode). The discriminator side in log mode returns
/// the maximized quantity `mean log r + mean log(1 - f)`; every other case
/// returns the minimized loss.
pub fn adversarial_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, mode: AdvMode, side: Side) -> Result<f64> {
    same_shape(real, fake, "patch score maps differ")?;
    let mut tape = Tape::new();
    let f = tape.leaf(fake.clone(), false);
    Ok(match side {
        Side::Generator => {
            let l = gen_adv_loss(&mut tape, mode, f);
            tape.value(l).item().as_f64()
        }
        Side::Discriminator => {
            let r = tape.leaf(real.clone(), false);
            let l = disc_loss(&mut tape, mode, r, f);
            let v = tape.value(l).item().as_f64();
            if mode == AdvMode::Log {
                -v
            } else {
                v
            }
        }
    })
}

fn paired_l1<T: Scalar>(a: &Tensor<T>, a_hat: &Tensor<T>, b: &Tensor<T>, b_hat: &Tensor<T>) -> Result<f64> {
    same_shape(a, a_hat, "first pair")?;
    same_shape(b, b_hat, "second pair")?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = [a, a_hat, b, b_hat].iter().map(|t| tape.leaf((*t).clone(), false)).collect();
    let la = l1(&mut tape, vars[1], vars[0]);
    let lb = l1(&mut tape, vars[3], vars[2]);
    let s = tape.add(la, lb);
    Ok(tape.value(s).item().as_f64())
}

/// `mean|F(G(x)) - x| + mean|G(F(y)) - y|`.
pub fn cycle_loss<T: Scalar>(x: &Tensor<T>, f_g_x: &Tensor<T>, y: &Tensor<T>, g_f_y: &Tensor<T>) -> Result<f64> {
    paired_l1(x, f_g_x, y, g_f_y)
}

/// `mean|F(x) - x| + mean|G(y) - y|`.
pub fn identity_loss<T: Scalar>(x: &Tensor<T>, f_x: &Tensor<T>, y: &Tensor<T>, g_y: &Tensor<T>) -> Result<f64> {
    paired_l1(x, f_x, y, g_y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn full(v: f64) -> Tensor<f64> {
        Tensor::full(Shape::new(2, 1, 3, 3), v)
    }

    #[test]
    fn adversarial_examples() {
        let half = full(0.5);
        let log_d = adversarial_loss(&half, &half, AdvMode::Log, Side::Discriminator).unwrap();
        assert!((log_d - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((log_d + 1.3863).abs() < 1e-4);
        assert_eq!(adversarial_loss(&half, &full(1.0), AdvMode::LeastSquares, Side::Generator).unwrap(), 0.0);
        let ls_d = adversarial_loss(&half, &half, AdvMode::LeastSquares, Side::Discriminator).unwrap();
        assert!((ls_d - 0.25).abs() < 1e-12);
    }

    #[test]
    fn log_mode_is_clamped() {
        for (r, f) in [(0.0, 1.0), (1.0, 0.0), (0.0, 0.0)] {
            let d = adversarial_loss(&full(r), &full(f), AdvMode::Log, Side::Discriminator).unwrap();
            let g = adversarial_loss(&full(r), &full(f), AdvMode::Log, Side::Generator).unwrap();
            assert!(d.is_finite() && g.is_finite());
        }
    }

    #[test]
    fn cycle_and_identity_examples() {
        let x = full(0.3);
        let y = full(-0.2);
        assert_eq!(cycle_loss(&x, &x, &y, &y).unwrap(), 0.0);
        let off = |t: &Tensor<f64>| t.map(|v| v + 0.1);
        assert!((cycle_loss(&x, &off(&x), &y, &y).unwrap() - 0.1).abs() < 1e-12);
        assert!((cycle_loss(&x, &off(&x), &y, &off(&y)).unwrap() - 0.2).abs() < 1e-12);
        let y = full(0.5);
        assert!((identity_loss(&x, &x, &y, &y.map(|v| -v)).unwrap() - 1.0).abs() < 1e-12);
        let bad = Tensor::full(Shape::new(1, 1, 3, 3), 0.0);
        assert!(matches!(cycle_loss(&x, &bad, &y, &y), Err(Error::Shape(_))));
    }

    #[test]
    fn composition() {
        let c = LossComponents { adv_g: 0.6, adv_f: 0.4, cyc: 0.2, ide: 0.1, ..Default::default() };
        let b = total_objective(c, LossWeights::default()).unwrap();
        assert!((b.total_generator - 3.5).abs() < 1e-12);
        let b = total_objective(c, LossWeights::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(b.total_generator, 1.0);
        assert_eq!(total_objective(LossComponents::default(), LossWeights::default()).unwrap().total_generator, 0.0);
        assert!(matches!(LossWeights::new(-1.0, 5.0), Err(Error::Config(_))));
        assert!(LossWeights::new(f64::NAN, 5.0).is_err());
    }
}

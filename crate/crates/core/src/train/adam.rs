use crate::error::{Error, Result};
use crate::model::{Checkpoint, ParamSet};
use crate::tensor::Tensor;

pub const ADAM_EPS: f32 = 1e-8;

/// Adam moments for one parameter set, with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub t: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>, beta1: f64, beta2: f64) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { beta1, beta2, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() / bc2_sqrt + ADAM_EPS);
            }
        }
    }

    pub(crate) fn save(&self, ckpt: &mut Checkpoint, prefix: &str, names: &[String]) {
        for (i, name) in names.iter().enumerate() {
            ckpt.push(format!("{prefix}/m/{name}"), self.m[i].clone());
            ckpt.push(format!("{prefix}/v/{name}"), self.v[i].clone());
        }
    }

    pub(crate) fn load(
        ckpt: &Checkpoint,
        prefix: &str,
        params: &ParamSet<f32>,
        (beta1, beta2, t): (f64, f64, u64),
    ) -> Result<Self> {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, p) in params.names().iter().zip(params.tensors()) {
            for (which, dst) in [("m", &mut m), ("v", &mut v)] {
                let t = ckpt.get(&format!("{prefix}/{which}/{name}"))?;
                if t.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state for `{name}` has wrong shape")));
                }
                dst.push(t.clone());
            }
        }
        Ok(Self { beta1, beta2, t, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let p = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 1.0, 1.0]).unwrap();
        let mut params = ParamSet::from_parts(vec!["w".into()], vec![p]).unwrap();
        let mut opt = Adam::new(&params, 0.5, 0.999);
        let g = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![2.0, -0.5, 0.0]).unwrap();
        opt.step(&mut params, &[g], 0.1);
        let d = params.tensors()[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-6);
        assert_eq!(d[2], 1.0);
    }
}

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.dims()), Tensor::zeros(p.dims())))
            .unzip();
        Self { config, step: 0, m, v }
    }

    /// One update over `params[i] -= lr * m_hat / (sqrt(v_hat) + eps)`.
    /// A missing gradient counts as zero.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.dims() != self.m[i].dims() || grads[i].is_some_and(|g| g.dims() != p.dims()) {
                return Err(Error::Shape(format!("adam slot {i} shape changed")));
            }
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of(c.learning_rate);
        let eps = T::of(c.epsilon);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            match grads[i] {
                Some(g) => {
                    for (((pv, mv), vv), &gv) in pd.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mv = b1 * *mv + (one - b1) * gv;
                        *vv = b2 * *vv + (one - b2) * gv * gv;
                        *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                    }
                }
                None => {
                    for ((pv, mv), vv) in pd.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = b1 * *mv;
                        *vv = b2 * *vv;
                        *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::<f64>::from_fn(&[3], |i| i as f64);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        let g = Tensor::zeros(&[3]);
        adam.update(&mut [&mut p], &[Some(&g)]).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::<f64>::new(&[2], vec![1.0, -1.0]).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        let g = Tensor::new(&[2], vec![3.0, -0.2]).unwrap();
        adam.update(&mut [&mut p], &[Some(&g)]).unwrap();
        assert!((p.data()[0] - (1.0 - 5e-4)).abs() < 1e-9);
        assert!((p.data()[1] - (-1.0 + 5e-4)).abs() < 1e-9);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        // f(p) = sum (p - c)^2 with argmin c.
        let target = [0.3, -0.2, 0.05];
        let mut p = Tensor::<f64>::zeros(&[3]);
        let mut adam = AdamState::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            [&p],
        );
        for _ in 0..200 {
            let g = Tensor::from_fn(&[3], |i| 2.0 * (p.data()[i] - target[i]));
            adam.update(&mut [&mut p], &[Some(&g)]).unwrap();
        }
        for (a, b) in p.data().iter().zip(target) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn shape_change_is_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        let g = Tensor::zeros(&[3]);
        assert!(adam.update(&mut [&mut p], &[Some(&g)]).is_err());
    }
}

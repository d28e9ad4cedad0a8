//! Squeeze-and-excitation with an additive offset, and the residual layer
//! that hosts it in the bottleneck.

use rand::Rng;

use super::layers::{BatchNorm2d, Conv2d, Linear, ParamSet, Session};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

/// `v = sigmoid(e) * u + b`, where `[e, b] = FC2(relu(FC1(gap(u))))`.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub channels: usize,
    pub reduction: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeBlock {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Architecture(format!(
                "SE channels {channels} not divisible by reduction {reduction}"
            )));
        }
        let squeezed = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            fc1: Linear::new(params, &format!("{name}.fc1"), channels, squeezed, rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), squeezed, 2 * channels, rng),
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, u: Var) -> Result<Var> {
        let c = s.graph.value(u).dims().get(1).copied();
        if c != Some(self.channels) {
            return Err(Error::Shape(format!(
                "SE block for {} channels got {:?}",
                self.channels,
                s.graph.value(u).dims()
            )));
        }
        let w = s.graph.global_avg_pool(u)?;
        let p = self.fc1.forward(s, w)?;
        let p = s.graph.relu(p);
        let q = self.fc2.forward(s, p)?;
        let e = s.graph.slice_cols(q, 0, self.channels)?;
        let b = s.graph.slice_cols(q, self.channels, self.channels)?;
        let gate = s.graph.sigmoid(e);
        let scaled = s.graph.channel_scale(u, gate)?;
        s.graph.channel_shift(scaled, b)
    }
}

/// `y = relu(x + SE(BN(conv(relu(BN(conv(x)))))))` with 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct ResSeLayer {
    pub channels: usize,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub se: SeBlock,
}

impl ResSeLayer {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        bn_eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            channels,
            conv1: Conv2d::new(params, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            bn1: BatchNorm2d::new(params, &format!("{name}.bn1"), channels, bn_eps),
            conv2: Conv2d::new(params, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(params, &format!("{name}.bn2"), channels, bn_eps),
            se: SeBlock::new(params, &format!("{name}.se"), channels, reduction, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.graph.relu(h);
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let h = self.se.forward(s, h)?;
        let y = s.graph.add(x, h)?;
        Ok(s.graph.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::layers::Mode;
    use crate::tensor::Tensor;

    fn zero_all<T: Scalar>(params: &mut ParamSet<T>) {
        let ids: Vec<_> = params.trainable_ids();
        for id in ids {
            params.get_mut(id).data_mut().fill(T::zero());
        }
    }

    #[test]
    fn squeeze_sizes_follow_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::<f32>::new();
        let se = SeBlock::new(&mut params, "se", 128, 16, &mut rng).unwrap();
        assert_eq!(params.get(se.fc1.weight).dims(), &[8, 128]);
        assert_eq!(params.get(se.fc2.weight).dims(), &[256, 8]);
        assert!(SeBlock::new(&mut params, "bad", 100, 16, &mut rng).is_err());
    }

    #[test]
    fn zero_weights_halve_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::<f64>::new();
        let se = SeBlock::new(&mut params, "se", 32, 16, &mut rng).unwrap();
        zero_all(&mut params);
        let u = Tensor::from_fn(&[2, 32, 3, 3], |i| (i as f64 * 0.1).sin());
        let mut s = Session::new(&params, Mode::Eval, false);
        let x = s.graph.constant(u.clone());
        let v = se.forward(&mut s, x).unwrap();
        assert!(s.graph.value(v).max_abs_diff(&u.map(|x| 0.5 * x)) < 1e-12);
    }

    #[test]
    fn squeeze_of_constant_maps_is_the_constant() {
        let mut params = ParamSet::<f64>::new();
        let mut s = Session::new(&params, Mode::Eval, false);
        let x = s
            .graph
            .constant(Tensor::from_fn(&[1, 4, 5, 5], |i| (i / 25) as f64 * 1.5));
        let w = s.graph.global_avg_pool(x).unwrap();
        assert_eq!(s.graph.value(w).data(), &[0.0, 1.5, 3.0, 4.5]);
        let _ = &mut params;
    }

    #[test]
    fn zeroed_residual_layer_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::<f64>::new();
        let layer = ResSeLayer::new(&mut params, "b1", 32, 16, 1e-5, &mut rng).unwrap();
        zero_all(&mut params);
        let x = Tensor::from_fn(&[2, 32, 4, 4], |i| (i as f64 * 0.7).sin());
        for mode in [Mode::Train, Mode::Eval] {
            let mut s = Session::new(&params, mode, false);
            let xv = s.graph.constant(x.clone());
            let y = layer.forward(&mut s, xv).unwrap();
            assert!(s.graph.value(y).max_abs_diff(&x.map(|v| v.max(0.0))) < 1e-12);
        }
    }

    #[test]
    fn residual_layer_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::<f32>::new();
        let layer = ResSeLayer::new(&mut params, "b1", 128, 16, 1e-5, &mut rng).unwrap();
        let mut s = Session::new(&params, Mode::Eval, false);
        let xv = s.graph.constant(Tensor::full(&[1, 128, 32, 32], 0.1));
        let y = layer.forward(&mut s, xv).unwrap();
        assert_eq!(s.graph.value(y).dims(), &[1, 128, 32, 32]);
    }
}

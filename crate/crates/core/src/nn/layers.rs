//! Parameter storage and the trainable building blocks of the network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; updated from batch statistics, never by the optimizer.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Named, ordered tensors owned by a network.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Mutable views of all trainable tensors, in [`ParamSet::trainable_ids`] order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| &mut e.value)
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces values by name; every entry must be present with its shape.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for e in &mut self.entries {
            let t = lookup(&e.name).ok_or_else(|| Error::Format(format!("missing tensor `{}`", e.name)))?;
            if t.dims() != e.value.dims() {
                return Err(Error::Shape(format!(
                    "tensor `{}` has dims {:?}, network expects {:?}",
                    e.name,
                    t.dims(),
                    e.value.dims()
                )));
            }
            e.value = t;
        }
        Ok(())
    }

    /// Exponential update of running statistics with unbiased batch variance.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>, momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for u in updates {
            let correction = if u.stats.count > 1 {
                T::of(u.stats.count as f64 / (u.stats.count - 1) as f64)
            } else {
                T::one()
            };
            for (r, b) in self.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * *b;
            }
            for (r, b) in self.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = keep * *r + m * *b * correction;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct BnUpdate<T: Scalar> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

/// One forward pass: a tape plus the binding of parameters onto it.
pub struct Session<'p, T: Scalar = f32> {
    pub graph: Graph<T>,
    params: &'p ParamSet<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamSet<T>, mode: Mode, track_grads: bool) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            track_grads,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn bind(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.track_grads {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients for every trainable parameter, in [`ParamSet::trainable_ids`] order.
    pub fn take_grads(&mut self) -> Vec<Option<Tensor<T>>> {
        self.params
            .trainable_ids()
            .into_iter()
            .map(|id| self.bound[id.0].and_then(|v| self.graph.take_grad(v)))
            .collect()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Uniform variance-scaling init with bound `sqrt(6 / fan_in)`.
fn he_uniform<T: Scalar>(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| T::of(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = he_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        Self {
            weight: params.add(format!("{name}.weight"), ParamKind::Trainable, w),
            bias: params.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.bind(self.weight);
        let b = s.bind(self.bias);
        s.graph.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // each output pixel receives about cin * (k / stride)^2 taps
        let fan_in = (cin * kernel * kernel / (stride * stride)).max(1);
        let w = he_uniform(&[cin, cout, kernel, kernel], fan_in, rng);
        Self {
            weight: params.add(format!("{name}.weight"), ParamKind::Trainable, w),
            bias: params.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.bind(self.weight);
        let b = s.bind(self.bias);
        s.graph.conv_transpose2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, channels: usize, eps: f64) -> Self {
        Self {
            gamma: params.add(
                format!("{name}.gamma"),
                ParamKind::Trainable,
                Tensor::full(&[channels], T::one()),
            ),
            beta: params.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels])),
            running_mean: params.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(&[channels]),
            ),
            running_var: params.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::full(&[channels], T::one()),
            ),
            eps,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gamma = s.bind(self.gamma);
        let beta = s.bind(self.beta);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm_train(x, gamma, beta, self.eps)?;
                s.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let p = s.params;
                s.graph.batch_norm_eval(
                    x,
                    gamma,
                    beta,
                    p.get(self.running_mean).data(),
                    p.get(self.running_var).data(),
                    self.eps,
                )
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let w = he_uniform(&[fout, fin], fin, rng);
        Self {
            weight: params.add(format!("{name}.weight"), ParamKind::Trainable, w),
            bias: params.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[fout])),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.bind(self.weight);
        let b = s.bind(self.bias);
        s.graph.linear(x, w, Some(b))
    }
}

use rayon::prelude::*;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics of a training-mode batch norm (biased variance).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    /// `geom` is the forward correlation that maps the output back onto the input.
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Concat {
        a: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ChannelScale {
        u: Var,
        s: Var,
    },
    ChannelShift {
        u: Var,
        b: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Append-only tape of tensor operations; nodes are topologically ordered
/// by construction, so backward is a single reverse sweep.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).nchw()?;
        let [cout, wcin, kh, kw] = self.value(w).nchw()?;
        if wcin != cin || kh != kw {
            return Err(shape_err(format!(
                "conv2d kernel {:?} does not fit input {:?}",
                self.value(w).dims(),
                self.value(x).dims()
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(shape_err("conv2d bias length differs from output channels"));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, kh, stride, pad)
            .ok_or_else(|| shape_err(format!("conv2d output empty for {h}x{wd}, k={kh}, s={stride}, p={pad}")))?;
        let (ho, wo) = (geom.out_h, geom.out_w);
        let mut out = vec![T::zero(); n * cout * ho * wo];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let in_per = cin * h * wd;
            out.par_chunks_mut(cout * ho * wo).enumerate().for_each(|(i, o)| {
                T::with_scratch(geom.col_rows() * geom.col_cols(), |cols| {
                    im2col(&xd[i * in_per..(i + 1) * in_per], &geom, cols);
                    gemm(
                        cout,
                        geom.col_rows(),
                        geom.col_cols(),
                        wdat,
                        false,
                        cols,
                        false,
                        T::zero(),
                        o,
                    );
                });
                if let Some(bias) = bias {
                    for (c, plane) in o.chunks_mut(ho * wo).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bias[c]);
                    }
                }
            });
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).nchw()?;
        let [wcin, cout, kh, kw] = self.value(w).nchw()?;
        if wcin != cin || kh != kw {
            return Err(shape_err(format!(
                "conv_transpose2d kernel {:?} does not fit input {:?}",
                self.value(w).dims(),
                self.value(x).dims()
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(shape_err("conv_transpose2d bias length differs from output channels"));
            }
        }
        let ho = ((h - 1) * stride + kh)
            .checked_sub(2 * pad)
            .filter(|v| *v > 0)
            .ok_or_else(|| shape_err("conv_transpose2d output empty"))?;
        let wo = ((wd - 1) * stride + kh)
            .checked_sub(2 * pad)
            .filter(|v| *v > 0)
            .ok_or_else(|| shape_err("conv_transpose2d output empty"))?;
        let geom = ConvGeom::new(cout, ho, wo, kh, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| shape_err("conv_transpose2d geometry is not invertible"))?;
        let mut out = vec![T::zero(); n * cout * ho * wo];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            let in_per = cin * h * wd;
            out.par_chunks_mut(cout * ho * wo).enumerate().for_each(|(i, o)| {
                T::with_scratch(geom.col_rows() * geom.col_cols(), |cols| {
                    gemm(
                        geom.col_rows(),
                        cin,
                        h * wd,
                        wdat,
                        true,
                        &xd[i * in_per..(i + 1) * in_per],
                        false,
                        T::zero(),
                        cols,
                    );
                    col2im(cols, &geom, o);
                });
                if let Some(bias) = bias {
                    for (c, plane) in o.chunks_mut(ho * wo).enumerate() {
                        plane.iter_mut().for_each(|v| *v += bias[c]);
                    }
                }
            });
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    fn check_bn_params(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let d = self.value(x).nchw()?;
        if self.value(gamma).len() != d[1] || self.value(beta).len() != d[1] {
            return Err(shape_err("batch norm affine parameters differ from channel count"));
        }
        Ok(d)
    }

    /// Batch norm with batch statistics. Returns the statistics so the owner
    /// can update its running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let [n, c, h, w] = self.check_bn_params(x, gamma, beta)?;
        if n * h * w < 2 {
            return Err(Error::InvalidArgument(
                "batch norm in training mode needs at least 2 values per channel".into(),
            ));
        }
        let hw = h * w;
        let count = n * hw;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let inv_count = T::of(1.0 / count as f64);
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                s += xd[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let m = s * inv_count;
            let mut q = T::zero();
            for i in 0..n {
                for &v in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    q += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = q * inv_count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::of(eps)).sqrt().recip()).collect();
        let value = self.bn_apply(x, gamma, beta, &mean, &inv_std)?;
        let rg = self.rg(&[x, gamma, beta]);
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count,
        };
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training: true,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let [_, c, _, _] = self.check_bn_params(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("running statistics differ from channel count"));
        }
        let mean = running_mean.to_vec();
        let inv_std: Vec<T> = running_var.iter().map(|&v| (v + T::of(eps)).sqrt().recip()).collect();
        let value = self.bn_apply(x, gamma, beta, &mean, &inv_std)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training: false,
            },
            rg,
        ))
    }

    fn bn_apply(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> Result<Tensor<T>> {
        let xt = self.value(x);
        let [n, c, h, w] = xt.nchw()?;
        let hw = h * w;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xt.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let scale = g[ch] * inv_std[ch];
                let shift = b[ch] - mean[ch] * scale;
                out[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        Tensor::new(xt.dims(), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| (T::one() + (-v).exp()).recip());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(shape_err(format!("add {:?} + {:?}", ta.dims(), tb.dims())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(p, q)| *p + *q).collect();
        let value = Tensor::new(ta.dims(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Channel-wise concatenation `[a, b]` of two NCHW tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).nchw()?;
        let [nb, cb, hb, wb] = self.value(b).nchw()?;
        if na != nb || ha != hb || wa != wb {
            return Err(shape_err(format!(
                "concat {:?} with {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        let hw = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        for i in 0..na {
            out.extend_from_slice(&da[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&db[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new(&[na, ca + cb, ha, wa], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Spatial mean: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).nchw()?;
        let hw = h * w;
        let inv = T::of(1.0 / hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Fully connected layer: `x [N, in]`, `w [out, in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.dims().len() != 2 || wt.dims().len() != 2 || xt.dim(1) != wt.dim(1) {
            return Err(shape_err(format!("linear {:?} x {:?}^T", xt.dims(), wt.dims())));
        }
        let (n, fin, fout) = (xt.dim(0), xt.dim(1), wt.dim(0));
        let mut out = vec![T::zero(); n * fout];
        gemm(n, fin, fout, xt.data(), false, wt.data(), true, T::zero(), &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != fout {
                return Err(shape_err("linear bias length differs from output features"));
            }
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bd).for_each(|(o, bv)| *o += *bv);
            }
        }
        let value = Tensor::new(&[n, fout], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    fn check_channel_operand(&self, u: Var, s: Var) -> Result<[usize; 4]> {
        let d = self.value(u).nchw()?;
        let sd = self.value(s).dims();
        if sd != [d[0], d[1]] {
            return Err(shape_err(format!("per-channel operand {:?} for {:?}", sd, d)));
        }
        Ok(d)
    }

    /// `u[n, c, :, :] * s[n, c]`.
    pub fn channel_scale(&mut self, u: Var, s: Var) -> Result<Var> {
        let [_, _, h, w] = self.check_channel_operand(u, s)?;
        let hw = h * w;
        let sd = self.value(s).data();
        let mut out = self.value(u).data().to_vec();
        for (plane, &k) in out.chunks_mut(hw).zip(sd) {
            plane.iter_mut().for_each(|v| *v *= k);
        }
        let value = Tensor::new(self.value(u).dims(), out)?;
        let rg = self.rg(&[u, s]);
        Ok(self.push(value, Op::ChannelScale { u, s }, rg))
    }

    /// `u[n, c, :, :] + b[n, c]`.
    pub fn channel_shift(&mut self, u: Var, b: Var) -> Result<Var> {
        let [_, _, h, w] = self.check_channel_operand(u, b)?;
        let hw = h * w;
        let bd = self.value(b).data();
        let mut out = self.value(u).data().to_vec();
        for (plane, &k) in out.chunks_mut(hw).zip(bd) {
            plane.iter_mut().for_each(|v| *v += k);
        }
        let value = Tensor::new(self.value(u).dims(), out)?;
        let rg = self.rg(&[u, b]);
        Ok(self.push(value, Op::ChannelShift { u, b }, rg))
    }

    /// Columns `start..start + len` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.dims().len() != 2 || start + len > xt.dim(1) || len == 0 {
            return Err(shape_err(format!("slice {start}..{} of {:?}", start + len, xt.dims())));
        }
        let width = xt.dim(1);
        let out = xt
            .data()
            .chunks(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(&[xt.dim(0), len], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// Mean squared error over every element.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.dims() != target.dims() {
            return Err(shape_err(format!("mse {:?} vs {:?}", p.dims(), target.dims())));
        }
        let n = T::of(p.len() as f64);
        let sse: T = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum();
        let value = Tensor::scalar(sse / n);
        let rg = self.rg(&[pred]);
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// `sum(x * weights)`, a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xt = self.value(x);
        if xt.len() != weights.len() {
            return Err(shape_err("weighted_sum operand sizes differ"));
        }
        let value = Tensor::scalar(xt.dot(weights));
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root; afterwards [`Graph::grad`] holds
    /// d(root)/d(node) for every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(shape_err("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).dims(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let [n, cin, h, wd] = self.value(*x).nchw()?;
                let cout = self.value(*w).dim(0);
                let (in_per, out_per) = (cin * h * wd, cout * geom.col_cols());
                let xd = self.value(*x).data();
                let wdat = self.value(*w).data();
                let need_x = self.wants(*x);
                let need_w = self.wants(*w);
                let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let go = &gd[s * out_per..(s + 1) * out_per];
                        let mut gx = Vec::new();
                        let mut gw = Vec::new();
                        if need_x {
                            gx = vec![T::zero(); in_per];
                            T::with_scratch(geom.col_rows() * geom.col_cols(), |gcols| {
                                gemm(
                                    geom.col_rows(),
                                    cout,
                                    geom.col_cols(),
                                    wdat,
                                    true,
                                    go,
                                    false,
                                    T::zero(),
                                    gcols,
                                );
                                col2im(gcols, geom, &mut gx);
                            });
                        }
                        if need_w {
                            gw = vec![T::zero(); cout * geom.col_rows()];
                            T::with_scratch(geom.col_rows() * geom.col_cols(), |cols| {
                                im2col(&xd[s * in_per..(s + 1) * in_per], geom, cols);
                                gemm(
                                    cout,
                                    geom.col_cols(),
                                    geom.col_rows(),
                                    go,
                                    false,
                                    cols,
                                    true,
                                    T::zero(),
                                    &mut gw,
                                );
                            });
                        }
                        (gx, gw)
                    })
                    .collect();
                if need_x {
                    let mut gx = Vec::with_capacity(n * in_per);
                    for (p, _) in &parts {
                        gx.extend_from_slice(p);
                    }
                    accumulate(grads, *x, Tensor::new(self.value(*x).dims(), gx)?);
                }
                if need_w {
                    let mut gw = vec![T::zero(); cout * geom.col_rows()];
                    for (_, p) in &parts {
                        gw.iter_mut().zip(p).for_each(|(a, b)| *a += *b);
                    }
                    accumulate(grads, *w, Tensor::new(self.value(*w).dims(), gw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, channel_sums(gd, n, cout, geom.col_cols())?);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let [n, cin, h, wd] = self.value(*x).nchw()?;
                let cout = geom.channels;
                let in_per = cin * h * wd;
                let out_per = cout * geom.height * geom.width;
                let xd = self.value(*x).data();
                let wdat = self.value(*w).data();
                let need_x = self.wants(*x);
                let need_w = self.wants(*w);
                let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
                    .into_par_iter()
                    .map(|s| {
                        let go = &gd[s * out_per..(s + 1) * out_per];
                        T::with_scratch(geom.col_rows() * geom.col_cols(), |gcols| {
                            im2col(go, geom, gcols);
                            let mut gx = Vec::new();
                            let mut gw = Vec::new();
                            if need_x {
                                gx = vec![T::zero(); in_per];
                                gemm(
                                    cin,
                                    geom.col_rows(),
                                    h * wd,
                                    wdat,
                                    false,
                                    gcols,
                                    false,
                                    T::zero(),
                                    &mut gx,
                                );
                            }
                            if need_w {
                                gw = vec![T::zero(); cin * geom.col_rows()];
                                gemm(
                                    cin,
                                    h * wd,
                                    geom.col_rows(),
                                    &xd[s * in_per..(s + 1) * in_per],
                                    false,
                                    gcols,
                                    true,
                                    T::zero(),
                                    &mut gw,
                                );
                            }
                            (gx, gw)
                        })
                    })
                    .collect();
                if need_x {
                    let mut gx = Vec::with_capacity(n * in_per);
                    for (p, _) in &parts {
                        gx.extend_from_slice(p);
                    }
                    accumulate(grads, *x, Tensor::new(self.value(*x).dims(), gx)?);
                }
                if need_w {
                    let mut gw = vec![T::zero(); cin * geom.col_rows()];
                    for (_, p) in &parts {
                        gw.iter_mut().zip(p).for_each(|(a, b)| *a += *b);
                    }
                    accumulate(grads, *w, Tensor::new(self.value(*w).dims(), gw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, channel_sums(gd, n, cout, geom.height * geom.width)?);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => {
                let xt = self.value(*x);
                let [n, c, h, w] = xt.nchw()?;
                let hw = h * w;
                let xd = xt.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                        for (&dy, &xv) in gd[r.clone()].iter().zip(&xd[r]) {
                            dbeta[ch] += dy;
                            dgamma[ch] += dy * (xv - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xd.len()];
                    let m = T::of((n * hw) as f64);
                    for i in 0..n {
                        for ch in 0..c {
                            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                            let k = gam[ch] * inv_std[ch];
                            for ((o, &dy), &xv) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&xd[r]) {
                                *o = if *training {
                                    let xhat = (xv - mean[ch]) * inv_std[ch];
                                    k / m * (m * dy - dbeta[ch] - xhat * dgamma[ch])
                                } else {
                                    k * dy
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(xt.dims(), dx)?);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(self.value(*gamma).dims(), dgamma)?);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, Tensor::new(self.value(*beta).dims(), dbeta)?);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    let dx = gd
                        .iter()
                        .zip(xd)
                        .map(|(&dy, &v)| if v > T::zero() { dy } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, Tensor::new(g.dims(), dx)?);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let yd = node.value.data();
                    let dx = gd.iter().zip(yd).map(|(&dy, &y)| dy * y * (T::one() - y)).collect();
                    accumulate(grads, *x, Tensor::new(g.dims(), dx)?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).nchw()?;
                let cb = self.value(*b).dim(1);
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    ga.extend_from_slice(&gd[base..base + ca * hw]);
                    gb.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::new(self.value(*a).dims(), ga)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::new(self.value(*b).dims(), gb)?);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let [_, _, h, w] = self.value(*x).nchw()?;
                    let hw = h * w;
                    let inv = T::of(1.0 / hw as f64);
                    let mut dx = Vec::with_capacity(gd.len() * hw);
                    for &dy in gd {
                        dx.extend(std::iter::repeat_n(dy * inv, hw));
                    }
                    accumulate(grads, *x, Tensor::new(self.value(*x).dims(), dx)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, fin, fout) = (xt.dim(0), xt.dim(1), wt.dim(0));
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    gemm(n, fout, fin, gd, false, wt.data(), false, T::zero(), &mut dx);
                    accumulate(grads, *x, Tensor::new(xt.dims(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(fout, n, fin, gd, true, xt.data(), false, T::zero(), &mut dw);
                    accumulate(grads, *w, Tensor::new(wt.dims(), dw)?);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in gd.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
                        }
                        accumulate(grads, *b, Tensor::new(&[fout], db)?);
                    }
                }
            }
            Op::ChannelScale { u, s } => {
                let [_, _, h, w] = self.value(*u).nchw()?;
                let hw = h * w;
                let ud = self.value(*u).data();
                let sd = self.value(*s).data();
                if self.wants(*u) {
                    let mut du = gd.to_vec();
                    for (plane, &k) in du.chunks_mut(hw).zip(sd) {
                        plane.iter_mut().for_each(|v| *v *= k);
                    }
                    accumulate(grads, *u, Tensor::new(g.dims(), du)?);
                }
                if self.wants(*s) {
                    let ds = gd
                        .chunks(hw)
                        .zip(ud.chunks(hw))
                        .map(|(gp, up)| gp.iter().zip(up).map(|(a, b)| *a * *b).sum())
                        .collect();
                    accumulate(grads, *s, Tensor::new(self.value(*s).dims(), ds)?);
                }
            }
            Op::ChannelShift { u, b } => {
                let [_, _, h, w] = self.value(*u).nchw()?;
                if self.wants(*u) {
                    accumulate(grads, *u, g.clone());
                }
                if self.wants(*b) {
                    let db = gd.chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                    accumulate(grads, *b, Tensor::new(self.value(*b).dims(), db)?);
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let xt = self.value(*x);
                    let width = xt.dim(1);
                    let len = g.dim(1);
                    let mut dx = vec![T::zero(); xt.len()];
                    for (row, grow) in dx.chunks_mut(width).zip(gd.chunks(len)) {
                        row[*start..*start + len].copy_from_slice(grow);
                    }
                    accumulate(grads, *x, Tensor::new(xt.dims(), dx)?);
                }
            }
            Op::Mse { pred, target } => {
                if self.wants(*pred) {
                    let p = self.value(*pred);
                    let k = gd[0] * T::of(2.0 / p.len() as f64);
                    let dp = p.data().iter().zip(target.data()).map(|(a, b)| k * (*a - *b)).collect();
                    accumulate(grads, *pred, Tensor::new(p.dims(), dp)?);
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.wants(*x) {
                    let dx = weights.map(|w| w * gd[0]);
                    let dims = self.value(*x).dims().to_vec();
                    accumulate(grads, *x, dx.reshape(&dims)?);
                }
            }
        }
        Ok(())
    }
}

fn channel_sums<T: Scalar>(gd: &[T], n: usize, c: usize, hw: usize) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += gd[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[c], out)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(g),
    }
}

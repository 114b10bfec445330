//! A reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Every op appends a node holding its output value and, when recording, a
//! closure that maps the output gradient to parent gradients. Parameters are
//! bound once per graph so a parameter used by several streams (the shared
//! per-level predictors) collects the sum of all its uses.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, Conv3x3Plan};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{s, Scalar, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Ctx<'a, T> {
    parents: Vec<&'a Tensor<T>>,
    out: &'a Tensor<T>,
    grad: &'a Tensor<T>,
    needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&Ctx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Batch-norm statistics source.
#[derive(Debug, Clone)]
pub enum BnStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T] },
}

pub const BN_EPS: f64 = 1e-5;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
        }
    }

    /// A graph that keeps no backward closures.
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Vec::new(), None, false)
    }

    /// A differentiable leaf (used by gradient checks on activations).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = self.record;
        self.push(t, Vec::new(), None, rg)
    }

    /// Bind a stored parameter, reusing the node if it is already bound.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, backward: Option<BackwardFn<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op(&mut self, value: Tensor<T>, parents: &[Var], backward: impl Fn(&Ctx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(value, parents.to_vec(), backward, requires_grad)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_shape = self.shape(root);
        if root_shape != Shape::scalar() {
            return Err(Error::shape("Graph::backward", Shape::scalar(), root_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let ctx = Ctx {
                parents: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                out: &node.value,
                grad: &grad,
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let pgrads = bw(&ctx);
            for (p, g) in node.parents.iter().zip(pgrads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    // ---------------------------------------------------------------- ops

    /// 3x3 convolution, stride 1, zero padding 1. `w`: `[cout, cin, 3, 3]`, `b`: `[1, cout, 1, 1]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c || ws.h != 3 || ws.w != 3 {
            return Err(Error::shape("conv3x3", format!("weight [_x{}x3x3]", xs.c), ws));
        }
        check_bias("conv3x3", self.shape(b), ws.n)?;
        let (cin, cout) = (xs.c, ws.n);
        let plan = Conv3x3Plan::new(cin, cout, xs.h, xs.w);
        let out_shape = xs.with_c(cout);
        let mut out = Tensor::zeros(out_shape);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let plane = xs.plane();
            for n in 0..xs.n {
                let padded = kernels::pad_planes(&plan, xv.item(n), cin);
                let o = &mut out.data_mut()[n * cout * plane..(n + 1) * cout * plane];
                T::conv3x3_planes(&plan, &padded, wv, o);
                add_bias(o, bv, plane);
            }
        }
        Ok(self.op(out, &[x, w, b], move |c| {
            let (xv, wv, dy) = (c.parents[0], c.parents[1], c.grad);
            let plane = plan.h * plan.w;
            let dx = c.needs[0].then(|| {
                let tplan = plan.transposed();
                let wt = kernels::flip_transpose(wv.data(), cout, cin);
                let mut dx = Tensor::zeros(xv.shape());
                for n in 0..xv.shape().n {
                    let padded = kernels::pad_planes(&tplan, dy.item(n), cout);
                    T::conv3x3_planes(&tplan, &padded, &wt, &mut dx.data_mut()[n * cin * plane..(n + 1) * cin * plane]);
                }
                dx
            });
            let dw = c.needs[1].then(|| {
                let mut dw = Tensor::zeros(wv.shape());
                for n in 0..xv.shape().n {
                    let padded = kernels::pad_planes(&plan, xv.item(n), cin);
                    T::conv3x3_weight_grad(&plan, &padded, dy.item(n), dw.data_mut());
                }
                dw
            });
            let db = c.needs[2].then(|| channel_sums(dy));
            vec![dx, dw, db]
        }))
    }

    /// 1x1 convolution. `w`: `[cout, cin, 1, 1]`, `b`: `[1, cout, 1, 1]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c || ws.h != 1 || ws.w != 1 {
            return Err(Error::shape("conv1x1", format!("weight [_x{}x1x1]", xs.c), ws));
        }
        check_bias("conv1x1", self.shape(b), ws.n)?;
        let (cin, cout, p) = (xs.c, ws.n, xs.plane());
        let mut out = Tensor::zeros(xs.with_c(cout));
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for n in 0..xs.n {
                let o = &mut out.data_mut()[n * cout * p..(n + 1) * cout * p];
                T::gemm(cout, cin, p, T::one(), wv, cin as isize, 1, xv.item(n), p as isize, 1, T::zero(), o, p as isize, 1);
                add_bias(o, bv, p);
            }
        }
        Ok(self.op(out, &[x, w, b], move |c| {
            let (xv, wv, dy) = (c.parents[0], c.parents[1], c.grad);
            let dx = c.needs[0].then(|| {
                let mut dx = Tensor::zeros(xv.shape());
                for n in 0..xv.shape().n {
                    let o = &mut dx.data_mut()[n * cin * p..(n + 1) * cin * p];
                    T::gemm(cin, cout, p, T::one(), wv.data(), 1, cin as isize, dy.item(n), p as isize, 1, T::zero(), o, p as isize, 1);
                }
                dx
            });
            let dw = c.needs[1].then(|| {
                let mut dw = Tensor::zeros(wv.shape());
                for n in 0..xv.shape().n {
                    T::gemm(cout, p, cin, T::one(), dy.item(n), p as isize, 1, xv.item(n), 1, p as isize, T::one(), dw.data_mut(), cin as isize, 1);
                }
                dw
            });
            let db = c.needs[2].then(|| channel_sums(dy));
            vec![dx, dw, db]
        }))
    }

    /// Transposed convolution, kernel 2x2, stride 2, no padding. `w`: `[cin, cout, 2, 2]`.
    pub fn deconv2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.n != xs.c || ws.h != 2 || ws.w != 2 {
            return Err(Error::shape("deconv2x2", format!("weight [{}x_x2x2]", xs.c), ws));
        }
        check_bias("deconv2x2", self.shape(b), ws.c)?;
        let (cin, cout, h, w_) = (xs.c, ws.c, xs.h, xs.w);
        let p = h * w_;
        let rows = cout * 4;
        let out_shape = Shape::new(xs.n, cout, 2 * h, 2 * w_);
        let mut out = Tensor::zeros(out_shape);
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let mut tmp = vec![T::zero(); rows * p];
            for n in 0..xs.n {
                T::gemm(rows, cin, p, T::one(), wv, 1, rows as isize, xv.item(n), p as isize, 1, T::zero(), &mut tmp, p as isize, 1);
                let o = &mut out.data_mut()[n * cout * 4 * p..(n + 1) * cout * 4 * p];
                for co in 0..cout {
                    for k in 0..4 {
                        let (dy, dx) = (k / 2, k % 2);
                        let src = &tmp[(co * 4 + k) * p..(co * 4 + k + 1) * p];
                        for y in 0..h {
                            for xx in 0..w_ {
                                o[co * 4 * p + (2 * y + dy) * 2 * w_ + 2 * xx + dx] = src[y * w_ + xx] + bv[co];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.op(out, &[x, w, b], move |c| {
            let (xv, wv, dy) = (c.parents[0], c.parents[1], c.grad);
            let n_items = xv.shape().n;
            let mut gathered = vec![T::zero(); rows * p];
            let mut dx = c.needs[0].then(|| Tensor::zeros(xv.shape()));
            let mut dw = c.needs[1].then(|| Tensor::zeros(wv.shape()));
            for n in 0..n_items {
                let g = dy.item(n);
                for co in 0..cout {
                    for k in 0..4 {
                        let (oy, ox) = (k / 2, k % 2);
                        let dst = &mut gathered[(co * 4 + k) * p..(co * 4 + k + 1) * p];
                        for y in 0..h {
                            for xx in 0..w_ {
                                dst[y * w_ + xx] = g[co * 4 * p + (2 * y + oy) * 2 * w_ + 2 * xx + ox];
                            }
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let o = &mut dx.data_mut()[n * cin * p..(n + 1) * cin * p];
                    T::gemm(cin, rows, p, T::one(), wv.data(), rows as isize, 1, &gathered, p as isize, 1, T::zero(), o, p as isize, 1);
                }
                if let Some(dw) = dw.as_mut() {
                    T::gemm(rows, p, cin, T::one(), &gathered, p as isize, 1, xv.item(n), 1, p as isize, T::one(), dw.data_mut(), 1, rows as isize);
                }
            }
            let db = c.needs[2].then(|| channel_sums(dy));
            vec![dx, dw, db]
        }))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(Error::shape("max_pool2", "even height and width", xs));
        }
        let (oh, ow) = (xs.h / 2, xs.w / 2);
        let os = xs.with_hw(oh, ow);
        let mut out = Tensor::zeros(os);
        let mut arg = vec![0u8; os.len()];
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for nc in 0..xs.n * xs.c {
                let src = &xv[nc * xs.plane()..(nc + 1) * xs.plane()];
                for y in 0..oh {
                    for xx in 0..ow {
                        let i = nc * oh * ow + y * ow + xx;
                        let mut best = src[2 * y * xs.w + 2 * xx];
                        let mut k = 0u8;
                        for (kk, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                            let v = src[(2 * y + dy) * xs.w + 2 * xx + dx];
                            if v > best || (v.is_nan() && !best.is_nan()) {
                                best = v;
                                k = kk as u8 + 1;
                            }
                        }
                        o[i] = best;
                        arg[i] = k;
                    }
                }
            }
        }
        Ok(self.op(out, &[x], move |c| {
            let mut dx = Tensor::zeros(xs);
            let g = c.grad.data();
            let d = dx.data_mut();
            for nc in 0..xs.n * xs.c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let i = nc * oh * ow + y * ow + xx;
                        let k = arg[i] as usize;
                        d[nc * xs.plane() + (2 * y + k / 2) * xs.w + 2 * xx + k % 2] += g[i];
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Per-channel batch normalization. Returns the output and, in batch mode,
    /// the batch mean and unbiased variance for running-statistic updates.
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var, stats: BnStats<'_, T>) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let xs = self.shape(x);
        check_bias("batch_norm(scale)", self.shape(scale), xs.c)?;
        check_bias("batch_norm(shift)", self.shape(shift), xs.c)?;
        let (nc, p) = (xs.c, xs.plane());
        let count = xs.n * p;
        let eps = BN_EPS;
        let (mean, inv_std, reported) = match stats {
            BnStats::Batch => {
                let xv = self.value(x);
                let mut mean = vec![0f64; nc];
                let mut var = vec![0f64; nc];
                for c in 0..nc {
                    let mut acc = 0f64;
                    for n in 0..xs.n {
                        acc += xv.plane(n, c).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
                    }
                    mean[c] = acc / count as f64;
                    let mut sq = 0f64;
                    for n in 0..xs.n {
                        sq += xv
                            .plane(n, c)
                            .iter()
                            .map(|v| {
                                let d = v.to_f64().unwrap_or(f64::NAN) - mean[c];
                                d * d
                            })
                            .sum::<f64>();
                    }
                    var[c] = sq / count as f64;
                }
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let unbiased: Vec<T> = var
                    .iter()
                    .map(|&v| s(if count > 1 { v * count as f64 / (count - 1) as f64 } else { v }))
                    .collect();
                let m: Vec<T> = mean.iter().map(|&v| s(v)).collect();
                (mean, inv, Some((m, unbiased)))
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != nc || var.len() != nc {
                    return Err(Error::shape("batch_norm(stats)", nc, mean.len()));
                }
                (
                    mean.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
                    var.iter().map(|v| 1.0 / (v.to_f64().unwrap_or(f64::NAN) + eps).sqrt()).collect(),
                    None,
                )
            }
        };
        let batch_mode = reported.is_some();
        let mut out = Tensor::zeros(xs);
        {
            let xv = self.value(x).data();
            let g = self.value(scale).data();
            let b = self.value(shift).data();
            let o = out.data_mut();
            for n in 0..xs.n {
                for c in 0..nc {
                    let (m, is) = (s::<T>(mean[c]), s::<T>(inv_std[c]));
                    let base = (n * nc + c) * p;
                    for i in base..base + p {
                        o[i] = (xv[i] - m) * is * g[c] + b[c];
                    }
                }
            }
        }
        let v = self.op(out, &[x, scale, shift], move |c| {
            let (xv, g, dy) = (c.parents[0], c.parents[1], c.grad);
            let mut sum_dy = vec![0f64; nc];
            let mut sum_dy_xhat = vec![0f64; nc];
            for n in 0..xs.n {
                for ch in 0..nc {
                    let xp = xv.plane(n, ch);
                    let dp = dy.plane(n, ch);
                    let (mut a, mut b) = (0f64, 0f64);
                    for (&xx, &d) in xp.iter().zip(dp) {
                        let d = d.to_f64().unwrap_or(f64::NAN);
                        a += d;
                        b += d * (xx.to_f64().unwrap_or(f64::NAN) - mean[ch]) * inv_std[ch];
                    }
                    sum_dy[ch] += a;
                    sum_dy_xhat[ch] += b;
                }
            }
            let dx = c.needs[0].then(|| {
                let mut dx = Tensor::zeros(xs);
                let d = dx.data_mut();
                for n in 0..xs.n {
                    for ch in 0..nc {
                        let base = (n * nc + ch) * p;
                        let gamma = g.data()[ch].to_f64().unwrap_or(f64::NAN);
                        let is = inv_std[ch];
                        if batch_mode {
                            let m = count as f64;
                            let k = gamma * is / m;
                            for i in base..base + p {
                                let xhat = (xv.data()[i].to_f64().unwrap_or(f64::NAN) - mean[ch]) * is;
                                let dyv = dy.data()[i].to_f64().unwrap_or(f64::NAN);
                                d[i] = s(k * (m * dyv - sum_dy[ch] - xhat * sum_dy_xhat[ch]));
                            }
                        } else {
                            let k: T = s(gamma * is);
                            for i in base..base + p {
                                d[i] = dy.data()[i] * k;
                            }
                        }
                    }
                }
                dx
            });
            let shape_c = Shape::new(1, nc, 1, 1);
            let dscale = c.needs[1].then(|| Tensor::from_vec(shape_c, sum_dy_xhat.iter().map(|&v| s(v)).collect()).expect("shape"));
            let dshift = c.needs[2].then(|| Tensor::from_vec(shape_c, sum_dy.iter().map(|&v| s(v)).collect()).expect("shape"));
            vec![dx, dscale, dshift]
        });
        Ok((v, reported))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        self.op(out, &[x], |c| {
            let mut dx = c.grad.clone();
            for (d, &y) in dx.data_mut().iter_mut().zip(c.out.data()) {
                if y <= T::zero() {
                    *d = T::zero();
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", sa, sb));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.op(out, &[a, b], |c| vec![Some(c.grad.clone()), Some(c.grad.clone())]))
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::shape("concat", sa, sb));
        }
        let os = sa.with_c(sa.c + sb.c);
        let mut data = Vec::with_capacity(os.len());
        for n in 0..sa.n {
            data.extend_from_slice(self.value(a).item(n));
            data.extend_from_slice(self.value(b).item(n));
        }
        let out = Tensor::from_vec(os, data)?;
        Ok(self.op(out, &[a, b], move |c| {
            let g = c.grad;
            let (mut ga, mut gb) = (Vec::with_capacity(sa.len()), Vec::with_capacity(sb.len()));
            for n in 0..sa.n {
                let item = g.item(n);
                ga.extend_from_slice(&item[..sa.item()]);
                gb.extend_from_slice(&item[sa.item()..]);
            }
            vec![
                Some(Tensor::from_vec(sa, ga).expect("shape")),
                Some(Tensor::from_vec(sb, gb).expect("shape")),
            ]
        }))
    }

    /// `x * g` with a one-channel `g` broadcast over the channels of `x`.
    pub fn mul_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sg != sx.with_c(1) {
            return Err(Error::shape("mul_gate", sx.with_c(1), sg));
        }
        let p = sx.plane();
        let mut out = self.value(x).clone();
        {
            let gv = self.value(g);
            let o = out.data_mut();
            for n in 0..sx.n {
                let gp = gv.plane(n, 0);
                for c in 0..sx.c {
                    let base = (n * sx.c + c) * p;
                    for (v, &gg) in o[base..base + p].iter_mut().zip(gp) {
                        *v *= gg;
                    }
                }
            }
        }
        Ok(self.op(out, &[x, g], move |c| {
            let (xv, gv, dy) = (c.parents[0], c.parents[1], c.grad);
            let dx = c.needs[0].then(|| {
                let mut dx = dy.clone();
                let d = dx.data_mut();
                for n in 0..sx.n {
                    let gp = gv.plane(n, 0);
                    for ch in 0..sx.c {
                        let base = (n * sx.c + ch) * p;
                        for (v, &gg) in d[base..base + p].iter_mut().zip(gp) {
                            *v *= gg;
                        }
                    }
                }
                dx
            });
            let dg = c.needs[1].then(|| {
                let mut dg = Tensor::zeros(sg);
                let d = dg.data_mut();
                for n in 0..sx.n {
                    for ch in 0..sx.c {
                        let xp = xv.plane(n, ch);
                        let dp = dy.plane(n, ch);
                        for i in 0..p {
                            d[n * p + i] += xp[i] * dp[i];
                        }
                    }
                }
                dg
            });
            vec![dx, dg]
        }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let os = xs.with_hw(xs.h * 2, xs.w * 2);
        let mut out = Tensor::zeros(os);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for nc in 0..xs.n * xs.c {
                for y in 0..os.h {
                    for xx in 0..os.w {
                        o[nc * os.plane() + y * os.w + xx] = xv[nc * xs.plane() + (y / 2) * xs.w + xx / 2];
                    }
                }
            }
        }
        self.op(out, &[x], move |c| {
            let mut dx = Tensor::zeros(xs);
            let g = c.grad.data();
            let d = dx.data_mut();
            for nc in 0..xs.n * xs.c {
                for y in 0..os.h {
                    for xx in 0..os.w {
                        d[nc * xs.plane() + (y / 2) * xs.w + xx / 2] += g[nc * os.plane() + y * os.w + xx];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Softmax across channels at each pixel, stabilized by max subtraction.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let p = xs.plane();
        let mut out = Tensor::zeros(xs);
        {
            let xv = self.value(x);
            let o = out.data_mut();
            for n in 0..xs.n {
                for i in 0..p {
                    let at = |c: usize| (n * xs.c + c) * p + i;
                    let m = (0..xs.c).map(|c| xv.data()[at(c)]).fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for c in 0..xs.c {
                        let e = (xv.data()[at(c)] - m).exp();
                        o[at(c)] = e;
                        sum += e;
                    }
                    for c in 0..xs.c {
                        o[at(c)] = o[at(c)] / sum;
                    }
                }
            }
        }
        self.op(out, &[x], move |c| {
            let (y, g) = (c.out.data(), c.grad.data());
            let mut dx = Tensor::zeros(xs);
            let d = dx.data_mut();
            for n in 0..xs.n {
                for i in 0..p {
                    let at = |ch: usize| (n * xs.c + ch) * p + i;
                    let dot: T = (0..xs.c).map(|ch| g[at(ch)] * y[at(ch)]).sum();
                    for ch in 0..xs.c {
                        d[at(ch)] = y[at(ch)] * (g[at(ch)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// One channel as a `[n, 1, h, w]` tensor.
    pub fn channel(&mut self, x: Var, ch: usize) -> Result<Var> {
        let xs = self.shape(x);
        if ch >= xs.c {
            return Err(Error::shape("channel", format!("< {}", xs.c), ch));
        }
        let os = xs.with_c(1);
        let mut data = Vec::with_capacity(os.len());
        for n in 0..xs.n {
            data.extend_from_slice(self.value(x).plane(n, ch));
        }
        let out = Tensor::from_vec(os, data)?;
        Ok(self.op(out, &[x], move |c| {
            let mut dx = Tensor::zeros(xs);
            let p = xs.plane();
            for n in 0..xs.n {
                let base = (n * xs.c + ch) * p;
                dx.data_mut()[base..base + p].copy_from_slice(c.grad.plane(n, 0));
            }
            vec![Some(dx)]
        }))
    }

    /// Mean pixel-wise binary cross entropy of probabilities `p` against soft
    /// targets `y`, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        let ps = self.shape(p);
        if ps != target.shape() {
            return Err(Error::shape("bce", ps, target.shape()));
        }
        let loss = crate::trainer::pixel_ce_value(self.value(p).data(), target.data(), eps);
        let target = target.clone();
        Ok(self.op(Tensor::scalar(loss), &[p], move |c| {
            let m: T = s(ps.len() as f64);
            let (lo, hi): (T, T) = (s(eps), s(1.0 - eps));
            let g = c.grad.value() / m;
            let mut dx = Tensor::zeros(ps);
            for ((d, &pv), &yv) in dx.data_mut().iter_mut().zip(c.parents[0].data()).zip(target.data()) {
                if pv >= lo && pv <= hi {
                    *d = g * ((T::one() - yv) / (T::one() - pv) - yv / pv);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// `sum_i weight_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let sh = self.shape(v);
            if sh != Shape::scalar() {
                return Err(Error::shape("weighted_sum", Shape::scalar(), sh));
            }
            total += w * self.value(v).value();
        }
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.op(Tensor::scalar(total), &parents, move |c| {
            weights.iter().map(|&w| Some(Tensor::scalar(w * c.grad.value()))).collect()
        }))
    }

    /// `sum(x * coeff)` for a constant `coeff`; a generic scalar objective.
    pub fn dot_const(&mut self, x: Var, coeff: &Tensor<T>) -> Result<Var> {
        let xs = self.shape(x);
        if xs != coeff.shape() {
            return Err(Error::shape("dot_const", xs, coeff.shape()));
        }
        let v: T = self.value(x).data().iter().zip(coeff.data()).map(|(&a, &b)| a * b).sum();
        let coeff = coeff.clone();
        Ok(self.op(Tensor::scalar(v), &[x], move |c| {
            let g = c.grad.value();
            vec![Some(coeff.map(|v| v * g))]
        }))
    }
}

fn check_bias(op: &'static str, got: Shape, c: usize) -> Result<()> {
    let want = Shape::new(1, c, 1, 1);
    if got != want {
        return Err(Error::shape(op, want, got));
    }
    Ok(())
}

fn add_bias<T: Scalar>(o: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        if b != T::zero() {
            o[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn channel_sums<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let sh = dy.shape();
    let mut out = Tensor::zeros(Shape::new(1, sh.c, 1, 1));
    for n in 0..sh.n {
        for c in 0..sh.c {
            let sum: T = dy.plane(n, c).iter().copied().sum();
            out.data_mut()[c] += sum;
        }
    }
    out
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.get(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

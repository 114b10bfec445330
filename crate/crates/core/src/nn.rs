//! Layer descriptors. A layer only records which stored parameters it owns;
//! values live in the [`ParamStore`] and activations on the [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{BnStats, Graph, Var};
use crate::params::{he_normal, ParamId, ParamKind, ParamStore};
use crate::tensor::{s, Scalar, Shape, Tensor};

/// Batch-norm behaviour: batch statistics (and running-average updates) in
/// training, running statistics at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Everything a forward pass touches.
pub struct Pass<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
}

impl<'a, T: Scalar> Pass<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Pass { g, store, mode }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

fn bias_shape(c: usize) -> Shape {
    Shape::new(1, c, 1, 1)
}

#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3x3 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, he_normal(Shape::new(cout, cin, 3, 3), cin * 9, rng));
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(bias_shape(cout)));
        Conv3x3 { weight, bias, cin, cout }
    }

    pub fn forward<T: Scalar>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (p.param(self.weight), p.param(self.bias));
        p.g.conv3x3(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Conv1x1 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, he_normal(Shape::new(cout, cin, 1, 1), cin, rng));
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(bias_shape(cout)));
        Conv1x1 { weight, bias, cin, cout }
    }

    pub fn forward<T: Scalar>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (p.param(self.weight), p.param(self.bias));
        p.g.conv1x1(x, w, b)
    }

    /// Overwrite with the identity map (requires `cin == cout`).
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        assert_eq!(self.cin, self.cout);
        let w = store.value_mut(self.weight);
        w.fill(T::zero());
        for c in 0..self.cout {
            w.data_mut()[c * self.cin + c] = T::one();
        }
        store.value_mut(self.bias).fill(T::zero());
    }

    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.weight).fill(T::zero());
        store.value_mut(self.bias).fill(T::zero());
    }
}

/// Transposed 2x2 convolution with stride 2.
#[derive(Debug, Clone)]
pub struct Deconv2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Deconv2x2 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, he_normal(Shape::new(cin, cout, 2, 2), cin, rng));
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(bias_shape(cout)));
        Deconv2x2 { weight, bias, cin, cout }
    }

    pub fn forward<T: Scalar>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (p.param(self.weight), p.param(self.bias));
        p.g.deconv2x2(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        BatchNorm {
            scale: store.add(format!("{name}.scale"), ParamKind::BnScale, Tensor::full(bias_shape(c), T::one())),
            shift: store.add(format!("{name}.shift"), ParamKind::BnShift, Tensor::zeros(bias_shape(c))),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(bias_shape(c))),
            running_var: store.add(format!("{name}.running_var"), ParamKind::RunningVar, Tensor::full(bias_shape(c), T::one())),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let (scale, shift) = (p.param(self.scale), p.param(self.shift));
        match p.mode {
            Mode::Train => {
                let (y, stats) = p.g.batch_norm(x, scale, shift, BnStats::Batch)?;
                if let Some((mean, var)) = stats {
                    let m: T = s(BN_MOMENTUM);
                    let keep = T::one() - m;
                    for (r, b) in p.store.value_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                        *r = keep * *r + m * *b;
                    }
                    for (r, b) in p.store.value_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                        *r = keep * *r + m * *b;
                    }
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = p.store.value(self.running_mean).data().to_vec();
                let var = p.store.value(self.running_var).data().to_vec();
                let (y, _) = p.g.batch_norm(x, scale, shift, BnStats::Fixed { mean: &mean, var: &var })?;
                Ok(y)
            }
        }
    }
}

/// 3x3 convolution, batch normalization, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv3x3,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let conv = Conv3x3::new(store, rng, name, cin, cout);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout);
        ConvBnRelu { conv, bn }
    }

    pub fn forward<T: Scalar>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(p, x)?;
        let y = self.bn.forward(p, y)?;
        Ok(p.g.relu(y))
    }

    /// Make the block output exactly zero in both modes: zero convolution
    /// and zero affine batch-norm parameters.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in [self.conv.weight, self.conv.bias, self.bn.scale, self.bn.shift] {
            store.value_mut(id).fill(T::zero());
        }
    }
}

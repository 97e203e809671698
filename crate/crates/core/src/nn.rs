//! Trainable parameters, the layers shared by both model families, and AdamW.

use crate::rng::stream_rng;
use crate::scalar::{s, Scalar};
use crate::tensor::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::rc::Rc;

/// One trainable tensor together with its gradient and AdamW moments.
pub struct Param<T: Scalar> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
    /// Whether weight decay applies to this parameter (embeddings opt out).
    pub weight_decay: bool,
}

pub type ParamRef<T> = Rc<RefCell<Param<T>>>;

/// Creation-ordered, named collection of parameters. The order is the
/// serialization order, so checkpoints are byte-stable.
pub struct ParamSet<T: Scalar> {
    items: Vec<(String, ParamRef<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { items: Vec::new() }
    }

    pub fn create(&mut self, name: &str, value: ArrayD<T>, weight_decay: bool) -> ParamRef<T> {
        assert!(
            !self.items.iter().any(|(n, _)| n == name),
            "duplicate parameter name {name}"
        );
        let zeros = ArrayD::zeros(value.raw_dim());
        let p = Rc::new(RefCell::new(Param {
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            weight_decay,
        }));
        self.items.push((name.to_string(), Rc::clone(&p)));
        p
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamRef<T>)> {
        self.items.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn get(&self, name: &str) -> Option<&ParamRef<T>> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.items.iter().map(|(_, p)| p.borrow().value.len()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.items {
            let mut p = p.borrow_mut();
            p.grad.fill(T::zero());
        }
    }
}

/// Gaussian init, drawn in f64 then narrowed so f32/f64 models built from the
/// same seed stay comparable.
pub fn randn<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    // Box-Muller; two uniforms per normal keeps the draw order obvious.
    for _ in 0..n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        data.push(s::<T>(z * std));
    }
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// `y = x W^T + b`, weights stored `[out, in]`.
pub struct Linear<T: Scalar> {
    pub w: ParamRef<T>,
    pub b: Option<ParamRef<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.create(&format!("{name}.w"), randn(&[out_dim, in_dim], std, rng), true);
        let b = bias.then(|| params.create(&format!("{name}.b"), zeros(&[out_dim]), false));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let w = tape.param(&self.w);
        let b = self.b.as_ref().map(|b| tape.param(b));
        x.linear(&w, b.as_ref())
    }
}

/// Row lookup table; used for token, positional and segment embeddings.
pub struct Embedding<T: Scalar> {
    pub table: ParamRef<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(
        params: &mut ParamSet<T>,
        name: &str,
        rows: usize,
        dim: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Embedding tables are excluded from weight decay.
        let table = params.create(name, randn(&[rows, dim], std, rng), false);
        Embedding { table }
    }

    pub fn forward(&self, tape: &Tape<T>, ids: &ndarray::Array2<u32>) -> Var<T> {
        let table = tape.param(&self.table);
        table.embedding(ids)
    }
}

pub struct LayerNorm<T: Scalar> {
    pub gamma: ParamRef<T>,
    pub beta: ParamRef<T>,
    pub eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: params.create(&format!("{name}.g"), ones(&[dim]), false),
            beta: params.create(&format!("{name}.b"), zeros(&[dim]), false),
            eps: s(1e-5),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        x.layer_norm(&g, &b, self.eps)
    }
}

pub struct GroupNorm<T: Scalar> {
    pub gamma: ParamRef<T>,
    pub beta: ParamRef<T>,
    pub groups: usize,
    pub eps: T,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(params: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        GroupNorm {
            gamma: params.create(&format!("{name}.g"), ones(&[channels]), false),
            beta: params.create(&format!("{name}.b"), zeros(&[channels]), false),
            groups: norm_groups(channels),
            eps: s(1e-6),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        x.group_norm(self.groups, &g, &b, self.eps)
    }
}

/// Largest group count out of {8, 4, 2, 1} dividing the channel count.
pub fn norm_groups(channels: usize) -> usize {
    [8usize, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// 2-D convolution over NCHW tensors, weights `[out, in, kh, kw]`.
pub struct Conv2d<T: Scalar> {
    pub w: ParamRef<T>,
    pub b: ParamRef<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        params: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        Conv2d {
            w: params.create(
                &format!("{name}.w"),
                randn(&[out_ch, in_ch, kernel, kernel], std, rng),
                true,
            ),
            b: params.create(&format!("{name}.b"), zeros(&[out_ch]), false),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        x.conv2d(&w, &b, self.stride, self.pad)
    }
}

/// Inverted-dropout mask multiply; identity when `rate == 0`.
pub fn dropout<T: Scalar>(x: &Var<T>, rate: f64, seed: u64, stream: &str, step: u64) -> Var<T> {
    if rate <= 0.0 {
        return x.clone();
    }
    assert!(rate < 1.0, "dropout rate must be < 1");
    let mut rng = stream_rng(seed, stream, step);
    let keep = 1.0 - rate;
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let mut mask = Vec::with_capacity(n);
    for _ in 0..n {
        let keep_it: f64 = rng.gen::<f64>();
        mask.push(if keep_it < keep { s::<T>(1.0 / keep) } else { T::zero() });
    }
    let mask = ArrayD::from_shape_vec(IxDyn(&shape), mask).unwrap();
    x.mul_const(mask)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Decoupled-weight-decay Adam. `lr` is the effective rate after any
/// batch-size scaling and plateau halving applied by the harness.
pub struct AdamW<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: T, beta1: T, beta2: T, eps: T, weight_decay: T) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
        }
    }

    /// One update over every parameter in the set; gradients are consumed
    /// (zeroed) afterwards.
    pub fn step(&mut self, params: &ParamSet<T>) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (_, p) in params.iter() {
            let mut p = p.borrow_mut();
            let Param {
                value,
                grad,
                m,
                v,
                weight_decay,
            } = &mut *p;
            if *weight_decay && self.weight_decay > T::zero() {
                let shrink = self.lr * self.weight_decay;
                value.mapv_inplace(|val| val - shrink * val);
            }
            ndarray::Zip::from(&mut *m).and(&*grad).for_each(|m, &g| {
                *m = self.beta1 * *m + (T::one() - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&*grad).for_each(|v, &g| {
                *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
            });
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|val, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *val = *val - self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            grad.fill(T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_descends_quadratic() {
        let mut params = ParamSet::<f64>::new();
        let p = params.create("x", ArrayD::from_elem(IxDyn(&[1]), 5.0), false);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.0);
        for _ in 0..300 {
            {
                let mut pm = p.borrow_mut();
                let x = pm.value[[0]];
                pm.grad[[0]] = 2.0 * x;
            }
            opt.step(&params);
        }
        assert!(p.borrow().value[[0]].abs() < 1e-2);
    }

    #[test]
    fn weight_decay_only_on_flagged_params() {
        let mut params = ParamSet::<f64>::new();
        let decayed = params.create("w", ArrayD::from_elem(IxDyn(&[1]), 1.0), true);
        let frozen = params.create("e", ArrayD::from_elem(IxDyn(&[1]), 1.0), false);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.5);
        opt.step(&params); // zero grads: pure decay step
        assert!(decayed.borrow().value[[0]] < 1.0);
        assert_eq!(frozen.borrow().value[[0]], 1.0);
    }

    #[test]
    fn norm_groups_divide() {
        assert_eq!(norm_groups(16), 8);
        assert_eq!(norm_groups(12), 4);
        assert_eq!(norm_groups(3), 1);
    }
}

//! Elementwise, shape, and reduction ops.

use super::{BackOp, BackwardCtx, GradSink, Var};
use crate::scalar::{s, Scalar};
use ndarray::{ArrayD, Axis, IxDyn, Slice};

struct AddOp;
impl<T: Scalar> BackOp<T> for AddOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        sink.add(ctx.parents[0], ctx.out_grad.clone());
        sink.add(ctx.parents[1], ctx.out_grad.clone());
    }
}

struct SubOp;
impl<T: Scalar> BackOp<T> for SubOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        sink.add(ctx.parents[0], ctx.out_grad.clone());
        sink.add(ctx.parents[1], ctx.out_grad.mapv(|g| -g));
    }
}

struct MulOp;
impl<T: Scalar> BackOp<T> for MulOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let a = &ctx.values[ctx.parents[0]];
        let b = &ctx.values[ctx.parents[1]];
        sink.add(ctx.parents[0], ctx.out_grad * b);
        sink.add(ctx.parents[1], ctx.out_grad * a);
    }
}

struct ScaleOp<T> {
    c: T,
}
impl<T: Scalar> BackOp<T> for ScaleOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        sink.add(ctx.parents[0], ctx.out_grad.mapv(|g| g * self.c));
    }
}

struct MulConstOp<T> {
    factor: ArrayD<T>,
}
impl<T: Scalar> BackOp<T> for MulConstOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        sink.add(ctx.parents[0], ctx.out_grad * &self.factor);
    }
}

struct SumAllOp;
impl<T: Scalar> BackOp<T> for SumAllOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let g = ctx.out_grad[[]];
        let shape = ctx.values[ctx.parents[0]].raw_dim();
        sink.add(ctx.parents[0], ArrayD::from_elem(shape, g));
    }
}

struct MeanAllOp;
impl<T: Scalar> BackOp<T> for MeanAllOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let parent = &ctx.values[ctx.parents[0]];
        let g = ctx.out_grad[[]] / s::<T>(parent.len() as f64);
        sink.add(ctx.parents[0], ArrayD::from_elem(parent.raw_dim(), g));
    }
}

struct MseConstOp<T> {
    target: ArrayD<T>,
}
impl<T: Scalar> BackOp<T> for MseConstOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let x = &ctx.values[ctx.parents[0]];
        let coeff = ctx.out_grad[[]] * s::<T>(2.0 / x.len() as f64);
        let mut d = x - &self.target;
        d.mapv_inplace(|e| e * coeff);
        sink.add(ctx.parents[0], d);
    }
}

struct TanhOp;
impl<T: Scalar> BackOp<T> for TanhOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let mut d = ctx.out_value.mapv(|y| T::one() - y * y);
        d *= ctx.out_grad;
        sink.add(ctx.parents[0], d);
    }
}

struct SiluOp;
impl<T: Scalar> BackOp<T> for SiluOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let x = &ctx.values[ctx.parents[0]];
        let mut d = x.mapv(|x| {
            let sig = T::one() / (T::one() + (-x).exp());
            sig * (T::one() + x * (T::one() - sig))
        });
        d *= ctx.out_grad;
        sink.add(ctx.parents[0], d);
    }
}

fn gelu_inner<T: Scalar>(x: T) -> (T, T) {
    let c = s::<T>(0.7978845608028654); // sqrt(2/pi)
    let k = s::<T>(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = s::<T>(0.5) * x * (T::one() + t);
    let du = c * (T::one() + s::<T>(3.0) * k * x * x);
    let dy = s::<T>(0.5) * (T::one() + t) + s::<T>(0.5) * x * (T::one() - t * t) * du;
    (y, dy)
}

struct GeluOp;
impl<T: Scalar> BackOp<T> for GeluOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let x = &ctx.values[ctx.parents[0]];
        let mut d = x.mapv(|x| gelu_inner(x).1);
        d *= ctx.out_grad;
        sink.add(ctx.parents[0], d);
    }
}

struct ReshapeOp {
    parent_shape: Vec<usize>,
}
impl<T: Scalar> BackOp<T> for ReshapeOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let g = standardize(ctx.out_grad)
            .into_shape_with_order(IxDyn(&self.parent_shape))
            .expect("reshape backward");
        sink.add(ctx.parents[0], g);
    }
}

struct PermuteOp {
    inverse: Vec<usize>,
}
impl<T: Scalar> BackOp<T> for PermuteOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let g = ctx
            .out_grad
            .view()
            .permuted_axes(IxDyn(&self.inverse))
            .as_standard_layout()
            .to_owned();
        sink.add(ctx.parents[0], g);
    }
}

struct ConcatOp {
    axis: usize,
    first_len: usize,
}
impl<T: Scalar> BackOp<T> for ConcatOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let ga = ctx
            .out_grad
            .slice_axis(Axis(self.axis), Slice::from(0..self.first_len))
            .to_owned();
        let gb = ctx
            .out_grad
            .slice_axis(Axis(self.axis), Slice::from(self.first_len..))
            .to_owned();
        sink.add(ctx.parents[0], ga);
        sink.add(ctx.parents[1], gb);
    }
}

fn heads_forward<T: Scalar>(x: &ArrayD<T>, heads: usize) -> ArrayD<T> {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let xs = standardize(x);
    let xv = xs.as_slice().unwrap();
    let mut out = vec![T::zero(); xv.len()];
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..l {
                let src = (bi * l + t) * d + h * dh;
                let dst = ((bi * heads + h) * l + t) * dh;
                out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, heads, l, dh]), out).unwrap()
}

fn heads_backward<T: Scalar>(g: &ArrayD<T>) -> ArrayD<T> {
    let (b, heads, l, dh) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let d = heads * dh;
    let gs = standardize(g);
    let gv = gs.as_slice().unwrap();
    let mut out = vec![T::zero(); gv.len()];
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..l {
                let src = ((bi * heads + h) * l + t) * dh;
                let dst = (bi * l + t) * d + h * dh;
                out[dst..dst + dh].copy_from_slice(&gv[src..src + dh]);
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, l, d]), out).unwrap()
}

/// `[B, L, H*Dh] -> [B, H, L, Dh]` in one copy.
struct SplitHeadsOp;
impl<T: Scalar> BackOp<T> for SplitHeadsOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        sink.add(ctx.parents[0], heads_backward(ctx.out_grad));
    }
}

/// `[B, H, L, Dh] -> [B, L, H*Dh]` in one copy.
struct MergeHeadsOp {
    heads: usize,
}
impl<T: Scalar> BackOp<T> for MergeHeadsOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        sink.add(ctx.parents[0], heads_forward(ctx.out_grad, self.heads));
    }
}

/// Quantization straight-through: forward emits the quantized constant,
/// backward passes the output gradient to the continuous input unchanged.
struct StraightThroughOp;
impl<T: Scalar> BackOp<T> for StraightThroughOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        sink.add(ctx.parents[0], ctx.out_grad.clone());
    }
}

/// Scalar term computed outside the tape (e.g. a pluggable perceptual loss),
/// with an optional externally supplied gradient w.r.t. the parent.
struct ExternalTermOp<T> {
    grad: Option<ArrayD<T>>,
}
impl<T: Scalar> BackOp<T> for ExternalTermOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        if let Some(grad) = &self.grad {
            let g = ctx.out_grad[[]];
            sink.add(ctx.parents[0], grad.mapv(|d| d * g));
        }
    }
}

pub(crate) fn standardize<T: Scalar>(a: &ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a.clone()
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Contiguous element view; copies only when the layout demands it.
pub(crate) fn flat_slice<T: Scalar>(a: &ArrayD<T>) -> std::borrow::Cow<'_, [T]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

impl<T: Scalar> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = self.with_value(|a| other.with_value(|b| {
            assert_eq!(a.shape(), b.shape(), "add shape mismatch");
            a + b
        }));
        self.binary(other, value, Box::new(AddOp))
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = self.with_value(|a| other.with_value(|b| {
            assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
            a - b
        }));
        self.binary(other, value, Box::new(SubOp))
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let value = self.with_value(|a| other.with_value(|b| {
            assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
            a * b
        }));
        self.binary(other, value, Box::new(MulOp))
    }

    pub fn scale(&self, c: T) -> Var<T> {
        let value = self.with_value(|a| a.mapv(|x| x * c));
        self.unary(value, Box::new(ScaleOp { c }))
    }

    pub fn mul_const(&self, factor: ArrayD<T>) -> Var<T> {
        let value = self.with_value(|a| {
            assert_eq!(a.shape(), factor.shape(), "mul_const shape mismatch");
            a * &factor
        });
        self.unary(value, Box::new(MulConstOp { factor }))
    }

    pub fn sum_all(&self) -> Var<T> {
        let value = self.with_value(|a| ArrayD::from_elem(IxDyn(&[]), a.sum()));
        self.unary(value, Box::new(SumAllOp))
    }

    pub fn mean_all(&self) -> Var<T> {
        let value = self.with_value(|a| {
            ArrayD::from_elem(IxDyn(&[]), a.sum() / s::<T>(a.len() as f64))
        });
        self.unary(value, Box::new(MeanAllOp))
    }

    /// Mean squared error against a constant target.
    pub fn mse_const(&self, target: ArrayD<T>) -> Var<T> {
        let value = self.with_value(|a| {
            assert_eq!(a.shape(), target.shape(), "mse shape mismatch");
            let sum = ndarray::Zip::from(a)
                .and(&target)
                .fold(T::zero(), |acc, &x, &t| acc + (x - t) * (x - t));
            ArrayD::from_elem(IxDyn(&[]), sum / s::<T>(a.len() as f64))
        });
        self.unary(value, Box::new(MseConstOp { target }))
    }

    pub fn tanh_act(&self) -> Var<T> {
        let value = self.with_value(|a| a.mapv(|x| x.tanh()));
        self.unary(value, Box::new(TanhOp))
    }

    pub fn silu(&self) -> Var<T> {
        let value = self.with_value(|a| a.mapv(|x| x / (T::one() + (-x).exp())));
        self.unary(value, Box::new(SiluOp))
    }

    pub fn gelu(&self) -> Var<T> {
        let value = self.with_value(|a| a.mapv(|x| gelu_inner(x).0));
        self.unary(value, Box::new(GeluOp))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let parent_shape = self.shape();
        let value = self.with_value(|a| {
            standardize(a)
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: incompatible element count")
        });
        self.unary(value, Box::new(ReshapeOp { parent_shape }))
    }

    pub fn permute(&self, axes: &[usize]) -> Var<T> {
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let value = self.with_value(|arr| {
            arr.view()
                .permuted_axes(IxDyn(axes))
                .as_standard_layout()
                .to_owned()
        });
        self.unary(value, Box::new(PermuteOp { inverse }))
    }

    /// `[B, L, D] -> [B, heads, L, D/heads]`.
    pub fn split_heads(&self, heads: usize) -> Var<T> {
        let shape = self.shape();
        assert_eq!(shape.len(), 3, "split_heads expects [B, L, D]");
        assert_eq!(shape[2] % heads, 0, "dim must divide into heads");
        let value = self.with_value(|x| heads_forward(x, heads));
        self.unary(value, Box::new(SplitHeadsOp))
    }

    /// `[B, H, L, Dh] -> [B, L, H*Dh]`.
    pub fn merge_heads(&self) -> Var<T> {
        let shape = self.shape();
        assert_eq!(shape.len(), 4, "merge_heads expects [B, H, L, Dh]");
        let heads = shape[1];
        let value = self.with_value(|x| heads_backward(x));
        self.unary(value, Box::new(MergeHeadsOp { heads }))
    }

    pub fn concat(&self, other: &Var<T>, axis: usize) -> Var<T> {
        let first_len = self.shape()[axis];
        let value = self.with_value(|a| other.with_value(|b| {
            ndarray::concatenate(Axis(axis), &[a.view(), b.view()])
                .expect("concat shape mismatch")
        }));
        self.binary(other, value, Box::new(ConcatOp { axis, first_len }))
    }

    /// See [`StraightThroughOp`]; `quantized` must match this var's shape.
    pub fn straight_through(&self, quantized: ArrayD<T>) -> Var<T> {
        assert_eq!(
            self.shape(),
            quantized.shape(),
            "straight_through shape mismatch"
        );
        self.unary(quantized, Box::new(StraightThroughOp))
    }

    /// Attach an externally computed scalar term. The gradient w.r.t. this
    /// var may be supplied by the external code; absent that, the term is
    /// treated as detached.
    pub fn external_term(&self, value: T, grad: Option<ArrayD<T>>) -> Var<T> {
        if let Some(g) = &grad {
            assert_eq!(self.shape(), g.shape().to_vec(), "external grad shape");
        }
        self.unary(
            ArrayD::from_elem(IxDyn(&[]), value),
            Box::new(ExternalTermOp { grad }),
        )
    }
}

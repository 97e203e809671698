//! Matrix multiply, affine projection, and embedding lookup.

use super::{BackOp, BackwardCtx, GradSink, Var};
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

/// `a @ b` into a fresh array; dispatches to the fast f32/f64 kernels.
pub(crate) fn mm<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(T::one(), &a, &b, T::zero(), &mut c);
    c
}

/// `c = a @ b`, overwriting an existing buffer.
pub(crate) fn mm_into<T: Scalar, SO>(
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
    c: &mut ndarray::ArrayBase<SO, Ix2>,
) where
    SO: ndarray::DataMut<Elem = T>,
{
    general_mat_mul(T::one(), &a, &b, T::zero(), c);
}

pub(crate) fn as2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d")
}

/// View an `[..., d]` array as `[M, d]` without copying (the array is in
/// standard layout everywhere these paths run).
pub(crate) fn flat2<T: Scalar>(a: &ArrayD<T>) -> ndarray::CowArray<'_, T, Ix2> {
    let d = *a.shape().last().expect("flat2 on 0-d array");
    let m = a.len() / d;
    a.to_shape((m, d)).expect("flat2: non-contiguous input")
}

/// Owned `[M, d]` copy (used where the result outlives the borrow).
pub(crate) fn flatten_leading<T: Scalar>(a: &ArrayD<T>) -> Array2<T> {
    let d = *a.shape().last().expect("flatten_leading on 0-d array");
    let m = a.len() / d;
    super::ops::standardize(a)
        .into_shape_with_order((m, d))
        .unwrap()
}

struct MatmulOp;
impl<T: Scalar> BackOp<T> for MatmulOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let a = as2(&ctx.values[ctx.parents[0]]);
        let b = as2(&ctx.values[ctx.parents[1]]);
        let g = as2(ctx.out_grad);
        sink.add(ctx.parents[0], mm(g, b.t()).into_dyn());
        sink.add(ctx.parents[1], mm(a.t(), g).into_dyn());
    }
}

struct LinearOp {
    has_bias: bool,
    in_shape: Vec<usize>,
}
impl<T: Scalar> BackOp<T> for LinearOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let x2 = flat2(&ctx.values[ctx.parents[0]]);
        let w = as2(&ctx.values[ctx.parents[1]]);
        let g2 = flat2(ctx.out_grad);
        let dx = mm(g2.view(), w);
        sink.add(
            ctx.parents[0],
            dx.into_dyn()
                .into_shape_with_order(IxDyn(&self.in_shape))
                .unwrap(),
        );
        sink.add(ctx.parents[1], mm(g2.t(), x2.view()).into_dyn());
        if self.has_bias {
            sink.add(ctx.parents[2], g2.sum_axis(Axis(0)).into_dyn());
        }
    }
}

struct EmbeddingOp {
    ids: Vec<u32>,
}
impl<T: Scalar> BackOp<T> for EmbeddingOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let table = &ctx.values[ctx.parents[0]];
        let dim = table.shape()[1];
        let mut dtable = Array2::<T>::zeros((table.shape()[0], dim));
        let g2 = flat2(ctx.out_grad);
        for (row, &id) in self.ids.iter().enumerate() {
            let mut out = dtable.row_mut(id as usize);
            out += &g2.row(row);
        }
        sink.add(ctx.parents[0], dtable.into_dyn());
    }
}

impl<T: Scalar> Var<T> {
    /// Plain 2-d matrix product.
    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        let value = self.with_value(|a| other.with_value(|b| {
            mm(as2(a), as2(b)).into_dyn()
        }));
        self.binary(other, value, Box::new(MatmulOp))
    }

    /// `x W^T (+ b)` over the last axis; `w` is `[out, in]`.
    pub fn linear(&self, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let in_shape = self.shape();
        let out_dim = w.shape()[0];
        let mut out_shape = in_shape.clone();
        *out_shape.last_mut().unwrap() = out_dim;
        let value = self.with_value(|x| {
            w.with_value(|w| {
                let x2 = flat2(x);
                let mut y = mm(x2.view(), as2(w).t());
                if let Some(b) = b {
                    b.with_value(|b| {
                        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                        for mut row in y.rows_mut() {
                            row += &b1;
                        }
                    });
                }
                y.into_dyn()
                    .into_shape_with_order(IxDyn(&out_shape))
                    .unwrap()
            })
        });
        let mut parents = vec![self.id, w.id];
        if let Some(b) = b {
            parents.push(b.id);
        }
        self.tape().push_op(
            value,
            parents,
            Box::new(LinearOp {
                has_bias: b.is_some(),
                in_shape,
            }),
        )
    }

    /// Row gather: `self` is a `[rows, dim]` table, output is `[...ids, dim]`.
    pub fn embedding(&self, ids: &ndarray::Array2<u32>) -> Var<T> {
        let rows = self.shape()[0];
        let dim = self.shape()[1];
        let (b, l) = ids.dim();
        let flat_ids: Vec<u32> = ids.iter().copied().collect();
        assert!(
            flat_ids.iter().all(|&i| (i as usize) < rows),
            "embedding id out of range"
        );
        let value = self.with_value(|table| {
            let t2 = as2(table);
            let mut out = Array2::<T>::zeros((b * l, dim));
            for (row, &id) in flat_ids.iter().enumerate() {
                out.row_mut(row).assign(&t2.row(id as usize));
            }
            out.into_dyn().into_shape_with_order(IxDyn(&[b, l, dim])).unwrap()
        });
        self.unary(value, Box::new(EmbeddingOp { ids: flat_ids }))
    }
}

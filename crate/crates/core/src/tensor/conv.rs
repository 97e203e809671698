//! 2-D convolution (im2col + matmul) and nearest-neighbor upsampling, NCHW.

use super::linalg::mm;
use super::ops::standardize;
use super::{BackOp, BackwardCtx, GradSink, Var};
use crate::scalar::Scalar;
use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};
use rayon::prelude::*;

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn im2col<T: Scalar>(x: &[T], g: ConvGeom) -> Array2<T> {
    let mut cols = Array2::<T>::zeros((g.k(), g.ho * g.wo));
    let cs = cols.as_slice_mut().unwrap();
    let spatial_out = g.ho * g.wo;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let out_base = row * spatial_out;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let in_base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        cs[out_base + oy * g.wo + ox] = x[in_base + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &Array2<T>, g: ConvGeom, dx: &mut [T]) {
    let cs = cols.as_slice().unwrap();
    let spatial_out = g.ho * g.wo;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let col_base = row * spatial_out;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let in_base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        dx[in_base + ix as usize] += cs[col_base + oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

fn geom<T: Scalar>(x: &ArrayD<T>, w: &ArrayD<T>, stride: usize, pad: usize) -> ConvGeom {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d expects NCHW input");
    assert_eq!(ws.len(), 4, "conv2d expects OIHW weight");
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
    let (h, w_) = (xs[2], xs[3]);
    let (kh, kw) = (ws[2], ws[3]);
    assert!(h + 2 * pad >= kh && w_ + 2 * pad >= kw, "kernel larger than input");
    ConvGeom {
        cin: xs[1],
        h,
        w: w_,
        cout: ws[0],
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w_ + 2 * pad - kw) / stride + 1,
    }
}

/// Forward convolution on plain arrays (shared by the tape op).
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    b: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let g = geom(x, w, stride, pad);
    let bsz = x.shape()[0];
    let x = standardize(x);
    let xs = x.as_slice().unwrap();
    let wmat = standardize(w)
        .into_shape_with_order((g.cout, g.k()))
        .unwrap();
    let bs = b.as_slice().unwrap();
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * g.ho * g.wo;
    let mut out = vec![T::zero(); bsz * out_stride];

    out.par_chunks_mut(out_stride)
        .zip(xs.par_chunks(in_stride))
        .for_each(|(o, xb)| {
            let cols = im2col(xb, g);
            let y = mm(wmat.view(), cols.view());
            let ys = y.as_slice().unwrap();
            let spatial = g.ho * g.wo;
            for c in 0..g.cout {
                for p in 0..spatial {
                    o[c * spatial + p] = ys[c * spatial + p] + bs[c];
                }
            }
        });

    ArrayD::from_shape_vec(IxDyn(&[bsz, g.cout, g.ho, g.wo]), out).unwrap()
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl<T: Scalar> BackOp<T> for Conv2dOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let x = standardize(&ctx.values[ctx.parents[0]]);
        let w = &ctx.values[ctx.parents[1]];
        let g = geom(&x, w, self.stride, self.pad);
        let bsz = x.shape()[0];
        let xs = x.as_slice().unwrap();
        let wmat = standardize(w)
            .into_shape_with_order((g.cout, g.k()))
            .unwrap();
        let gout = standardize(ctx.out_grad);
        let gs = gout.as_slice().unwrap();
        let in_stride = g.cin * g.h * g.w;
        let out_stride = g.cout * g.ho * g.wo;

        let mut dx = vec![T::zero(); bsz * in_stride];
        // Per-sample weight/bias grads collected in order, summed serially so
        // the result does not depend on thread scheduling.
        let per_sample: Vec<(Array2<T>, Vec<T>)> = dx
            .par_chunks_mut(in_stride)
            .zip(xs.par_chunks(in_stride).zip(gs.par_chunks(out_stride)))
            .map(|(dxb, (xb, gb))| {
                let gmat =
                    ArrayView2::from_shape((g.cout, g.ho * g.wo), gb).unwrap();
                let cols = im2col(xb, g);
                let dw = mm(gmat, cols.t());
                let mut db = vec![T::zero(); g.cout];
                for c in 0..g.cout {
                    db[c] = gb[c * g.ho * g.wo..(c + 1) * g.ho * g.wo]
                        .iter()
                        .copied()
                        .sum();
                }
                let dcols = mm(wmat.t(), gmat);
                col2im(&dcols, g, dxb);
                (dw, db)
            })
            .collect();

        let mut dw_total = Array2::<T>::zeros((g.cout, g.k()));
        let mut db_total = vec![T::zero(); g.cout];
        for (dw, db) in per_sample {
            dw_total += &dw;
            for c in 0..g.cout {
                db_total[c] += db[c];
            }
        }
        sink.add(
            ctx.parents[0],
            ArrayD::from_shape_vec(x.raw_dim(), dx).unwrap(),
        );
        sink.add(
            ctx.parents[1],
            dw_total
                .into_dyn()
                .into_shape_with_order(w.raw_dim())
                .unwrap(),
        );
        sink.add(
            ctx.parents[2],
            ArrayD::from_shape_vec(IxDyn(&[g.cout]), db_total).unwrap(),
        );
    }
}

struct Upsample2xOp;
impl<T: Scalar> BackOp<T> for Upsample2xOp {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let parent = &ctx.values[ctx.parents[0]];
        let shape = parent.shape().to_vec();
        let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let g = standardize(ctx.out_grad);
        let gs = g.as_slice().unwrap();
        let mut dx = vec![T::zero(); parent.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let ob = (b * c + ch) * (2 * h) * (2 * w);
                let ib = (b * c + ch) * h * w;
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = T::zero();
                        for di in 0..2 {
                            for dj in 0..2 {
                                acc += gs[ob + (2 * i + di) * 2 * w + (2 * j + dj)];
                            }
                        }
                        dx[ib + i * w + j] = acc;
                    }
                }
            }
        }
        sink.add(
            ctx.parents[0],
            ArrayD::from_shape_vec(parent.raw_dim(), dx).unwrap(),
        );
    }
}

impl<T: Scalar> Var<T> {
    pub fn conv2d(&self, w: &Var<T>, b: &Var<T>, stride: usize, pad: usize) -> Var<T> {
        let value = self.with_value(|x| {
            w.with_value(|wv| b.with_value(|bv| conv2d_forward(x, wv, bv, stride, pad)))
        });
        self.tape().push_op(
            value,
            vec![self.id, w.id, b.id],
            Box::new(Conv2dOp { stride, pad }),
        )
    }

    pub fn upsample_nearest_2x(&self) -> Var<T> {
        let value = self.with_value(|x| {
            let shape = x.shape().to_vec();
            let (bsz, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let x = standardize(x);
            let xs = x.as_slice().unwrap();
            let mut out = vec![T::zero(); bsz * c * 4 * h * w];
            for b in 0..bsz {
                for ch in 0..c {
                    let ib = (b * c + ch) * h * w;
                    let ob = (b * c + ch) * 4 * h * w;
                    for i in 0..h {
                        for j in 0..w {
                            let v = xs[ib + i * w + j];
                            out[ob + (2 * i) * 2 * w + 2 * j] = v;
                            out[ob + (2 * i) * 2 * w + 2 * j + 1] = v;
                            out[ob + (2 * i + 1) * 2 * w + 2 * j] = v;
                            out[ob + (2 * i + 1) * 2 * w + 2 * j + 1] = v;
                        }
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[bsz, c, 2 * h, 2 * w]), out).unwrap()
        });
        self.unary(value, Box::new(Upsample2xOp))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let w = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 1]), vec![2.0]).unwrap());
        let b = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1]), vec![0.5]).unwrap());
        let y = x.conv2d(&w, &b, 1, 0);
        assert_eq!(
            y.value(),
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![2.5, 4.5, 6.5, 8.5]).unwrap()
        );
        tape.backward(&y.sum_all());
        assert_eq!(
            x.grad().unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![2.0; 4]).unwrap()
        );
        assert_eq!(w.grad().unwrap()[[0, 0, 0, 0]], 10.0);
        assert_eq!(b.grad().unwrap()[[0]], 4.0);
    }

    #[test]
    fn conv_stride_two_shape() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2, 3, 8, 8])));
        let w = tape.constant(ArrayD::zeros(IxDyn(&[5, 3, 3, 3])));
        let b = tape.constant(ArrayD::zeros(IxDyn(&[5])));
        let y = x.conv2d(&w, &b, 2, 1);
        assert_eq!(y.shape(), vec![2, 5, 4, 4]);
    }

    #[test]
    fn upsample_round_trip_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![1.0, 2.0]).unwrap(),
        );
        let y = x.upsample_nearest_2x();
        assert_eq!(y.shape(), vec![1, 1, 2, 4]);
        assert_eq!(y.value()[[0, 0, 1, 3]], 2.0);
        tape.backward(&y.sum_all());
        assert_eq!(
            x.grad().unwrap(),
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![4.0, 4.0]).unwrap()
        );
    }
}

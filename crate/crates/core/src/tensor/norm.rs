//! Layer and group normalization with saved per-slice statistics.

use super::ops::standardize;
use super::{BackOp, BackwardCtx, GradSink, Var};
use crate::scalar::{s, Scalar};
use ndarray::{ArrayD, IxDyn};

fn mean_var<T: Scalar>(slab: &[T]) -> (T, T) {
    let n = s::<T>(slab.len() as f64);
    let mean = slab.iter().copied().sum::<T>() / n;
    let var = slab
        .iter()
        .map(|&x| (x - mean) * (x - mean))
        .sum::<T>()
        / n;
    (mean, var)
}

struct LayerNormOp<T> {
    mean: Vec<T>,
    rstd: Vec<T>,
    dim: usize,
}

impl<T: Scalar> BackOp<T> for LayerNormOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let x = standardize(&ctx.values[ctx.parents[0]]);
        let gamma = &ctx.values[ctx.parents[1]];
        let g = standardize(ctx.out_grad);
        let d = self.dim;
        let rows = x.len() / d;
        let xs = x.as_slice().unwrap();
        let gs = g.as_slice().unwrap();
        let gam = gamma.as_slice().unwrap();

        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![T::zero(); d];
        let mut dbeta = vec![T::zero(); d];
        let inv_d = s::<T>(1.0 / d as f64);
        for r in 0..rows {
            let (mean, rstd) = (self.mean[r], self.rstd[r]);
            let xrow = &xs[r * d..(r + 1) * d];
            let grow = &gs[r * d..(r + 1) * d];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for j in 0..d {
                let xhat = (xrow[j] - mean) * rstd;
                let dxhat = grow[j] * gam[j];
                dgamma[j] += grow[j] * xhat;
                dbeta[j] += grow[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            for j in 0..d {
                let xhat = (xrow[j] - mean) * rstd;
                let dxhat = grow[j] * gam[j];
                dx[r * d + j] =
                    rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
            }
        }
        sink.add(
            ctx.parents[0],
            ArrayD::from_shape_vec(x.raw_dim(), dx).unwrap(),
        );
        sink.add(
            ctx.parents[1],
            ArrayD::from_shape_vec(IxDyn(&[d]), dgamma).unwrap(),
        );
        sink.add(
            ctx.parents[2],
            ArrayD::from_shape_vec(IxDyn(&[d]), dbeta).unwrap(),
        );
    }
}

struct GroupNormOp<T> {
    mean: Vec<T>,
    rstd: Vec<T>,
    groups: usize,
}

impl<T: Scalar> BackOp<T> for GroupNormOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let x = standardize(&ctx.values[ctx.parents[0]]);
        let gamma = &ctx.values[ctx.parents[1]];
        let g = standardize(ctx.out_grad);
        let shape = x.shape().to_vec();
        let (bsz, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let gs = c / self.groups;
        let group_len = gs * spatial;
        let xs = x.as_slice().unwrap();
        let gr = g.as_slice().unwrap();
        let gam = gamma.as_slice().unwrap();

        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let inv_n = s::<T>(1.0 / group_len as f64);
        for b in 0..bsz {
            for gi in 0..self.groups {
                let base = (b * c + gi * gs) * spatial;
                let (mean, rstd) = (
                    self.mean[b * self.groups + gi],
                    self.rstd[b * self.groups + gi],
                );
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..group_len {
                    let ch = gi * gs + j / spatial;
                    let xhat = (xs[base + j] - mean) * rstd;
                    let dxhat = gr[base + j] * gam[ch];
                    dgamma[ch] += gr[base + j] * xhat;
                    dbeta[ch] += gr[base + j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for j in 0..group_len {
                    let ch = gi * gs + j / spatial;
                    let xhat = (xs[base + j] - mean) * rstd;
                    let dxhat = gr[base + j] * gam[ch];
                    dx[base + j] =
                        rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                }
            }
        }
        sink.add(
            ctx.parents[0],
            ArrayD::from_shape_vec(x.raw_dim(), dx).unwrap(),
        );
        sink.add(
            ctx.parents[1],
            ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
        );
        sink.add(
            ctx.parents[2],
            ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
        );
    }
}

impl<T: Scalar> Var<T> {
    /// Normalize over the last axis; `gamma`/`beta` are `[dim]`.
    pub fn layer_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Var<T> {
        let dim = *self.shape().last().unwrap();
        let mut mean_buf = Vec::new();
        let mut rstd_buf = Vec::new();
        let value = self.with_value(|x| {
            gamma.with_value(|gam| beta.with_value(|bet| {
                let x = standardize(x);
                let xs = x.as_slice().unwrap();
                let gam = gam.as_slice().unwrap();
                let bet = bet.as_slice().unwrap();
                let rows = xs.len() / dim;
                let mut out = vec![T::zero(); xs.len()];
                for r in 0..rows {
                    let row = &xs[r * dim..(r + 1) * dim];
                    let (mean, var) = mean_var(row);
                    let rstd = T::one() / (var + eps).sqrt();
                    mean_buf.push(mean);
                    rstd_buf.push(rstd);
                    for j in 0..dim {
                        out[r * dim + j] = (row[j] - mean) * rstd * gam[j] + bet[j];
                    }
                }
                ArrayD::from_shape_vec(x.raw_dim(), out).unwrap()
            }))
        });
        self.tape().push_op(
            value,
            vec![self.id, gamma.id, beta.id],
            Box::new(LayerNormOp {
                mean: mean_buf,
                rstd: rstd_buf,
                dim,
            }),
        )
    }

    /// Group normalization over `[B, C, ...]`; stats per (sample, group).
    pub fn group_norm(&self, groups: usize, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Var<T> {
        let shape = self.shape();
        let (bsz, c) = (shape[0], shape[1]);
        assert!(c % groups == 0, "channels not divisible by groups");
        let spatial: usize = shape[2..].iter().product();
        let gs = c / groups;
        let group_len = gs * spatial;
        let mut mean_buf = Vec::new();
        let mut rstd_buf = Vec::new();
        let value = self.with_value(|x| {
            gamma.with_value(|gam| beta.with_value(|bet| {
                let x = standardize(x);
                let xs = x.as_slice().unwrap();
                let gam = gam.as_slice().unwrap();
                let bet = bet.as_slice().unwrap();
                let mut out = vec![T::zero(); xs.len()];
                for b in 0..bsz {
                    for gi in 0..groups {
                        let base = (b * c + gi * gs) * spatial;
                        let slab = &xs[base..base + group_len];
                        let (mean, var) = mean_var(slab);
                        let rstd = T::one() / (var + eps).sqrt();
                        mean_buf.push(mean);
                        rstd_buf.push(rstd);
                        for j in 0..group_len {
                            let ch = gi * gs + j / spatial;
                            out[base + j] = (slab[j] - mean) * rstd * gam[ch] + bet[ch];
                        }
                    }
                }
                ArrayD::from_shape_vec(x.raw_dim(), out).unwrap()
            }))
        });
        self.tape().push_op(
            value,
            vec![self.id, gamma.id, beta.id],
            Box::new(GroupNormOp {
                mean: mean_buf,
                rstd: rstd_buf,
                groups,
            }),
        )
    }
}

//! Fused causal self-attention and masked cross-entropy.
//!
//! Attention stores nothing per (batch, head): the backward pass recomputes
//! the softmax probabilities from q and k (bitwise identically) into
//! per-thread scratch buffers, flash-attention style. Attention-probability
//! dropout regenerates its mask from a stored seed instead of saving it.

use super::linalg::mm_into;
use super::ops::{flat_slice, standardize};
use super::{BackOp, BackwardCtx, GradSink, Var};
use crate::rng::stream_rng;
use crate::scalar::{s, Scalar};
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};
use rand::Rng;
use rayon::prelude::*;

/// Attention-probability dropout configuration for one forward call.
#[derive(Clone, Copy)]
pub struct AttnDropout {
    pub rate: f64,
    pub seed: u64,
}

/// Scaled, causally masked scores followed by row softmax, written over the
/// scratch in place. Lower triangle holds probabilities, upper is zeroed.
fn softmax_scores<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    scale: T,
    scratch: &mut Array2<T>,
) {
    let l = q.nrows();
    mm_into(q, k.t(), scratch);
    let ss = scratch.as_slice_mut().unwrap();
    for i in 0..l {
        let row = &mut ss[i * l..(i + 1) * l];
        let mut max = T::neg_infinity();
        for x in row[..=i].iter_mut() {
            *x = *x * scale;
            if *x > max {
                max = *x;
            }
        }
        let mut sum = T::zero();
        for x in row[..=i].iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = T::one() / sum;
        for x in row[..=i].iter_mut() {
            *x = *x * inv;
        }
        for x in row[i + 1..].iter_mut() {
            *x = T::zero();
        }
    }
}

/// Multiply the kept lower-triangle entries by 1/keep, zero the dropped.
fn apply_prob_dropout<T: Scalar>(p: &mut Array2<T>, seed: u64, unit: u64, rate: f64) {
    let l = p.nrows();
    let keep = 1.0 - rate;
    let inv = s::<T>(1.0 / keep);
    let mut rng = stream_rng(seed, "attn-drop", unit);
    let ps = p.as_slice_mut().unwrap();
    for i in 0..l {
        for x in ps[i * l..i * l + i + 1].iter_mut() {
            if rng.gen::<f64>() < keep {
                *x = *x * inv;
            } else {
                *x = T::zero();
            }
        }
    }
}

struct CausalAttentionOp<T> {
    len: usize,
    head_dim: usize,
    dropout: Option<AttnDropout>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> BackOp<T> for CausalAttentionOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let q = flat_slice(&ctx.values[ctx.parents[0]]);
        let k = flat_slice(&ctx.values[ctx.parents[1]]);
        let v = flat_slice(&ctx.values[ctx.parents[2]]);
        let g = flat_slice(ctx.out_grad);
        let (l, dh) = (self.len, self.head_dim);
        let chunk = l * dh;
        let scale = s::<T>(1.0 / (dh as f64).sqrt());

        let (qs, ks, vs, gs) = (&*q, &*k, &*v, &*g);

        let mut dq = vec![T::zero(); qs.len()];
        let mut dk = vec![T::zero(); ks.len()];
        let mut dv = vec![T::zero(); vs.len()];

        dq.par_chunks_mut(chunk)
            .zip(dk.par_chunks_mut(chunk).zip(dv.par_chunks_mut(chunk)))
            .enumerate()
            .map_init(
                || (Array2::<T>::zeros((l, l)), Array2::<T>::zeros((l, l))),
                |(probs, work), (bh, (dqb, (dkb, dvb)))| {
                    fn at<'a, T: Scalar>(
                        buf: &'a [T],
                        bh: usize,
                        l: usize,
                        dh: usize,
                    ) -> ArrayView2<'a, T> {
                        let chunk = l * dh;
                        ArrayView2::from_shape((l, dh), &buf[bh * chunk..(bh + 1) * chunk])
                            .unwrap()
                    }
                    let (qb, kb, vb, gb) = (
                        at(qs, bh, l, dh),
                        at(ks, bh, l, dh),
                        at(vs, bh, l, dh),
                        at(gs, bh, l, dh),
                    );

                    // recompute pre-dropout probabilities
                    softmax_scores(qb, kb, scale, probs);

                    // dP~ = g V^T, then undo the dropout scaling to get dP
                    mm_into(gb, vb.t(), work);
                    if let Some(d) = self.dropout.filter(|d| d.rate > 0.0) {
                        let keep = 1.0 - d.rate;
                        let inv = s::<T>(1.0 / keep);
                        let mut rng = stream_rng(d.seed, "attn-drop", bh as u64);
                        let ws = work.as_slice_mut().unwrap();
                        for i in 0..l {
                            for x in ws[i * l..i * l + i + 1].iter_mut() {
                                if rng.gen::<f64>() < keep {
                                    *x = *x * inv;
                                } else {
                                    *x = T::zero();
                                }
                            }
                        }
                    }

                    // dS_ij = P_ij (dP_ij - sum_k dP_ik P_ik); upper zeroed
                    {
                        let ws = work.as_slice_mut().unwrap();
                        let ps = probs.as_slice().unwrap();
                        for i in 0..l {
                            let mut dot = T::zero();
                            for j in 0..=i {
                                dot += ws[i * l + j] * ps[i * l + j];
                            }
                            for j in 0..=i {
                                ws[i * l + j] = ps[i * l + j] * (ws[i * l + j] - dot);
                            }
                            for x in ws[i * l + i + 1..(i + 1) * l].iter_mut() {
                                *x = T::zero();
                            }
                        }
                    }

                    // dQ = scale dS K ; dK = scale dS^T Q
                    let mut dqm = ArrayViewMut2::from_shape((l, dh), dqb).unwrap();
                    mm_into(work.view(), kb, &mut dqm);
                    dqm.mapv_inplace(|x| x * scale);
                    let mut dkm = ArrayViewMut2::from_shape((l, dh), dkb).unwrap();
                    mm_into(work.t(), qb, &mut dkm);
                    dkm.mapv_inplace(|x| x * scale);

                    // dV = P~^T g (dropout re-applied to the recomputed P)
                    if let Some(d) = self.dropout.filter(|d| d.rate > 0.0) {
                        apply_prob_dropout(probs, d.seed, bh as u64, d.rate);
                    }
                    let mut dvm = ArrayViewMut2::from_shape((l, dh), dvb).unwrap();
                    mm_into(probs.t(), gb, &mut dvm);
                },
            )
            .collect::<Vec<()>>();

        let dim = ctx.values[ctx.parents[0]].raw_dim();
        sink.add(ctx.parents[0], ArrayD::from_shape_vec(dim.clone(), dq).unwrap());
        sink.add(ctx.parents[1], ArrayD::from_shape_vec(dim.clone(), dk).unwrap());
        sink.add(ctx.parents[2], ArrayD::from_shape_vec(dim, dv).unwrap());
    }
}

/// Causal scaled-dot-product attention over `[B, H, L, Dh]` tensors.
/// Position `t` attends to positions `0..=t` only.
pub fn causal_attention<T: Scalar>(
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    dropout: Option<AttnDropout>,
) -> Var<T> {
    let shape = q.shape();
    assert_eq!(shape.len(), 4, "attention expects [B, H, L, Dh]");
    assert_eq!(shape, k.shape());
    assert_eq!(shape, v.shape());
    let (b, h, l, dh) = (shape[0], shape[1], shape[2], shape[3]);
    let chunk = l * dh;
    let scale = s::<T>(1.0 / (dh as f64).sqrt());

    let value = q.with_value(|qv| {
        k.with_value(|kv| {
            v.with_value(|vv| {
                let qv = flat_slice(qv);
                let kv = flat_slice(kv);
                let vv = flat_slice(vv);
                let (qsl, ksl, vsl) = (&*qv, &*kv, &*vv);
                let mut out = vec![T::zero(); qsl.len()];

                out.par_chunks_mut(chunk)
                    .enumerate()
                    .map_init(
                        || Array2::<T>::zeros((l, l)),
                        |scratch, (bh, ob)| {
                            fn at<'a, T: Scalar>(
                                buf: &'a [T],
                                bh: usize,
                                l: usize,
                                dh: usize,
                            ) -> ArrayView2<'a, T> {
                                let chunk = l * dh;
                                ArrayView2::from_shape(
                                    (l, dh),
                                    &buf[bh * chunk..(bh + 1) * chunk],
                                )
                                .unwrap()
                            }
                            softmax_scores(at(qsl, bh, l, dh), at(ksl, bh, l, dh), scale, scratch);
                            if let Some(d) = dropout.filter(|d| d.rate > 0.0) {
                                apply_prob_dropout(scratch, d.seed, bh as u64, d.rate);
                            }
                            let mut ctx = ArrayViewMut2::from_shape((l, dh), ob).unwrap();
                            mm_into(scratch.view(), at(vsl, bh, l, dh), &mut ctx);
                        },
                    )
                    .collect::<Vec<()>>();
                ArrayD::from_shape_vec(IxDyn(&[b, h, l, dh]), out).unwrap()
            })
        })
    });

    q.tape().push_op(
        value,
        vec![q.id, k.id, v.id],
        Box::new(CausalAttentionOp::<T> {
            len: l,
            head_dim: dh,
            dropout,
            _marker: std::marker::PhantomData,
        }),
    )
}

struct MaskedCrossEntropyOp<T> {
    targets: Vec<u32>,
    rows: Vec<u32>,
    probs: Array2<T>,
    count: usize,
}

impl<T: Scalar> BackOp<T> for MaskedCrossEntropyOp<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, sink: &mut GradSink<'_, T>) {
        let logits = &ctx.values[ctx.parents[0]];
        let g = ctx.out_grad[[]] / s::<T>(self.count as f64);
        let vocab = logits.shape()[1];
        let mut dl = Array2::<T>::zeros((logits.shape()[0], vocab));
        for (i, &row) in self.rows.iter().enumerate() {
            let target = self.targets[i] as usize;
            let mut out = dl.row_mut(row as usize);
            let p = self.probs.row(i);
            for jv in 0..vocab {
                out[jv] = p[jv] * g;
            }
            out[target] = out[target] - g;
        }
        sink.add(ctx.parents[0], dl.into_dyn());
    }
}

/// Mean cross-entropy of `logits[row]` against `targets[row]` over the rows
/// where `mask[row]` holds. Rows outside the mask contribute nothing and get
/// zero gradient.
pub fn masked_cross_entropy<T: Scalar>(
    logits: &Var<T>,
    targets: &[u32],
    mask: &[bool],
) -> Var<T> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "cross entropy expects [rows, vocab]");
    let (rows_total, vocab) = (shape[0], shape[1]);
    assert_eq!(targets.len(), rows_total);
    assert_eq!(mask.len(), rows_total);
    let selected: Vec<u32> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i as u32))
        .collect();
    let count = selected.len();
    assert!(count > 0, "cross entropy with empty mask");
    let sel_targets: Vec<u32> = selected.iter().map(|&r| targets[r as usize]).collect();
    assert!(
        sel_targets.iter().all(|&t| (t as usize) < vocab),
        "cross entropy target out of range"
    );

    let mut probs = Array2::<T>::zeros((count, vocab));
    let value = logits.with_value(|lv| {
        let l2 = standardize(lv);
        let ls = l2.as_slice().unwrap();
        let losses: Vec<T> = probs
            .axis_iter_mut(ndarray::Axis(0))
            .into_par_iter()
            .enumerate()
            .map(|(i, mut prow)| {
                let row = selected[i] as usize;
                let target = sel_targets[i] as usize;
                let lrow = &ls[row * vocab..(row + 1) * vocab];
                let mut max = lrow[0];
                for &x in lrow.iter() {
                    if x > max {
                        max = x;
                    }
                }
                let mut sum = T::zero();
                for (j, &x) in lrow.iter().enumerate() {
                    let e = (x - max).exp();
                    prow[j] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for j in 0..vocab {
                    prow[j] = prow[j] * inv;
                }
                sum.ln() + max - lrow[target]
            })
            .collect();
        let total: T = losses.into_iter().sum();
        ArrayD::from_elem(IxDyn(&[]), total / s::<T>(count as f64))
    });

    logits.tape().push_op(
        value,
        vec![logits.id],
        Box::new(MaskedCrossEntropyOp {
            targets: sel_targets,
            rows: selected,
            probs,
            count,
        }),
    )
}

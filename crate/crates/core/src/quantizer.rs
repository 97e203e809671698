//! Shared-weight EMA vector quantizer with straight-through gradients.
//!
//! One [`Codebook`] backs every quantization site in the autoencoder; sharing
//! is by reference ([`SharedCodebook`]), so an EMA update made while training
//! one latent level is immediately visible to all other levels.

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::scalar::{s, Scalar};
use crate::tensor::Var;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, IxDyn};
use rand::Rng;
use rayon::prelude::*;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

/// Embedding table plus the EMA statistics that drive its updates.
///
/// Invariant maintained by [`ema_update`]: `entries[i]` equals
/// `ema_embed_sum[i]` divided by the Laplace-smoothed count for `i`.
pub struct Codebook<T: Scalar> {
    pub entries: Array2<T>,
    pub ema_cluster_size: Array1<T>,
    pub ema_embed_sum: Array2<T>,
    pub decay: T,
    pub smoothing_eps: T,
    /// Consecutive updates each code went unused; drives optional restarts.
    unused_updates: Vec<u32>,
    /// After this many consecutive unused updates a code is re-seeded from a
    /// random batch vector. Off by default.
    pub restart_after: Option<u32>,
    restart_seed: u64,
    updates: u64,
}

impl<T: Scalar> Codebook<T> {
    /// Entries drawn i.i.d. from N(0, 1/d) so their scale matches encoder
    /// outputs under standard init.
    pub fn new(num_codes: usize, dim: usize, decay: T, smoothing_eps: T, seed: u64) -> Self {
        assert!(num_codes > 0 && dim > 0);
        let mut rng = stream_rng(seed, "codebook-init", 0);
        let std = 1.0 / (dim as f64).sqrt();
        let entries = crate::nn::randn::<T>(&[num_codes, dim], std, &mut rng)
            .into_dimensionality()
            .unwrap();
        Codebook {
            ema_cluster_size: Array1::from_elem(num_codes, T::one()),
            ema_embed_sum: entries.clone(),
            entries,
            decay,
            smoothing_eps,
            unused_updates: vec![0; num_codes],
            restart_after: None,
            restart_seed: seed,
            updates: 0,
        }
    }

    pub fn num_codes(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|x| x.is_finite())
    }
}

/// Handle shared by all quantization sites of a model (and across the
/// ML -> SL surgery). Updates through any clone are visible to every clone.
pub struct SharedCodebook<T: Scalar> {
    inner: Arc<RwLock<Codebook<T>>>,
}

impl<T: Scalar> Clone for SharedCodebook<T> {
    fn clone(&self) -> Self {
        SharedCodebook {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> SharedCodebook<T> {
    pub fn new(cb: Codebook<T>) -> Self {
        SharedCodebook {
            inner: Arc::new(RwLock::new(cb)),
        }
    }

    pub fn read(&self) -> std::sync::RwLockReadGuard<'_, Codebook<T>> {
        self.inner.read().expect("codebook lock poisoned")
    }

    pub fn write(&self) -> std::sync::RwLockWriteGuard<'_, Codebook<T>> {
        self.inner.write().expect("codebook lock poisoned")
    }

    pub fn same_object(&self, other: &SharedCodebook<T>) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Argmin over squared Euclidean distance for each row of `z`; ties break to
/// the lowest index. Distances are accumulated coordinate-by-coordinate in
/// input order so results are reproducible and oracle-comparable.
pub fn nearest_codes<T: Scalar>(z: ArrayView2<'_, T>, cb: &Codebook<T>) -> Result<Array1<u32>> {
    if z.ncols() != cb.dim() {
        return Err(Error::contract(format!(
            "nearest_codes: input dim {} does not match codebook dim {}",
            z.ncols(),
            cb.dim()
        )));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("nearest_codes: non-finite input"));
    }
    let entries = &cb.entries;
    let mut out = vec![0u32; z.nrows()];
    let rows: Vec<Vec<T>> = z.rows().into_iter().map(|r| r.to_vec()).collect();
    out.par_iter_mut().enumerate().for_each(|(i, slot)| {
        let row = &rows[i];
        let mut best = T::infinity();
        let mut best_idx = 0u32;
        for (c, entry) in entries.rows().into_iter().enumerate() {
            let mut dist = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let d = x - entry[j];
                dist += d * d;
            }
            if dist < best {
                best = dist;
                best_idx = c as u32;
            }
        }
        *slot = best_idx;
    });
    Ok(Array1::from_vec(out))
}

pub struct QuantizeResult<T: Scalar> {
    /// Codebook rows arranged in the input's shape; gradients pass straight
    /// through to the continuous input.
    pub quantized: Var<T>,
    /// Chosen code per position, shaped like the input minus its last axis.
    pub indices: ArrayD<u32>,
    /// `beta * mean((z - stopgrad(quantized))^2)`.
    pub commitment_loss: Var<T>,
}

/// Quantize a `[... , d]` tensor against the shared codebook.
pub fn quantize<T: Scalar>(
    z: &Var<T>,
    cb: &SharedCodebook<T>,
    beta: T,
) -> Result<QuantizeResult<T>> {
    let shape = z.shape();
    if shape.is_empty() {
        return Err(Error::contract("quantize: 0-d input"));
    }
    let spatial: Vec<usize> = shape[..shape.len() - 1].to_vec();
    let guard = cb.read();
    let (flat, indices) = z.with_value(|zv| -> Result<_> {
        let flat = crate::tensor::linalg::flatten_leading(zv);
        let idx = nearest_codes(flat.view(), &guard)?;
        Ok((flat, idx))
    })?;

    let mut q = Array2::<T>::zeros(flat.raw_dim());
    for (r, &c) in indices.iter().enumerate() {
        q.row_mut(r).assign(&guard.entries.row(c as usize));
    }
    drop(guard);
    let q = q.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap();

    let commitment_loss = z.mse_const(q.clone()).scale(beta);
    let quantized = z.straight_through(q);
    let indices = ArrayD::from_shape_vec(IxDyn(&spatial), indices.to_vec()).unwrap();
    Ok(QuantizeResult {
        quantized,
        indices,
        commitment_loss,
    })
}

/// Plain-array quantization for frozen models (encode/decode paths).
pub fn quantize_infer<T: Scalar>(
    z: &ArrayD<T>,
    cb: &SharedCodebook<T>,
) -> Result<(ArrayD<T>, ArrayD<u32>)> {
    let shape = z.shape().to_vec();
    let spatial: Vec<usize> = shape[..shape.len() - 1].to_vec();
    let guard = cb.read();
    let flat = crate::tensor::linalg::flatten_leading(z);
    let indices = nearest_codes(flat.view(), &guard)?;
    let mut q = Array2::<T>::zeros(flat.raw_dim());
    for (r, &c) in indices.iter().enumerate() {
        q.row_mut(r).assign(&guard.entries.row(c as usize));
    }
    Ok((
        q.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap(),
        ArrayD::from_shape_vec(IxDyn(&spatial), indices.to_vec()).unwrap(),
    ))
}

/// Look rows up by index (decode path).
pub fn lookup<T: Scalar>(indices: &ArrayD<u32>, cb: &SharedCodebook<T>) -> Result<ArrayD<T>> {
    let guard = cb.read();
    let d = guard.dim();
    let mut shape = indices.shape().to_vec();
    shape.push(d);
    let mut out = Array2::<T>::zeros((indices.len(), d));
    for (r, &c) in indices.iter().enumerate() {
        if c as usize >= guard.num_codes() {
            return Err(Error::contract(format!(
                "lookup: index {c} out of range for {} codes",
                guard.num_codes()
            )));
        }
        out.row_mut(r).assign(&guard.entries.row(c as usize));
    }
    Ok(out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap())
}

/// EMA statistics update followed by the Laplace-smoothed re-estimate of the
/// entries: `entries[i] = ema_embed_sum[i] / (n * (count_i + eps) / (n + K * eps))`.
pub fn ema_update<T: Scalar>(
    cb: &mut Codebook<T>,
    z_flat: ArrayView2<'_, T>,
    indices: &[u32],
) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::contract("ema_update: empty batch"));
    }
    if z_flat.nrows() != indices.len() || z_flat.ncols() != cb.dim() {
        return Err(Error::contract("ema_update: shape mismatch"));
    }
    let k = cb.num_codes();
    if let Some(&bad) = indices.iter().find(|&&i| i as usize >= k) {
        return Err(Error::contract(format!(
            "ema_update: index {bad} out of range for {k} codes"
        )));
    }

    let mut counts = vec![T::zero(); k];
    let mut sums = Array2::<T>::zeros((k, cb.dim()));
    for (row, &c) in indices.iter().enumerate() {
        counts[c as usize] += T::one();
        let mut acc = sums.row_mut(c as usize);
        acc += &z_flat.row(row);
    }

    let decay = cb.decay;
    let one_minus = T::one() - decay;
    for i in 0..k {
        cb.ema_cluster_size[i] = decay * cb.ema_cluster_size[i] + one_minus * counts[i];
    }
    ndarray::Zip::from(&mut cb.ema_embed_sum)
        .and(&sums)
        .for_each(|e, &snew| *e = decay * *e + one_minus * snew);

    let n: T = cb.ema_cluster_size.iter().copied().sum();
    let eps = cb.smoothing_eps;
    let denom_scale = n / (n + s::<T>(k as f64) * eps);
    for i in 0..k {
        let smoothed = (cb.ema_cluster_size[i] + eps) * denom_scale;
        let mut row = cb.entries.row_mut(i);
        let src = cb.ema_embed_sum.row(i);
        for j in 0..src.len() {
            row[j] = src[j] / smoothed;
        }
    }

    cb.updates += 1;
    if let Some(limit) = cb.restart_after {
        let mut rng = stream_rng(cb.restart_seed, "dead-restart", cb.updates);
        for i in 0..k {
            if counts[i] > T::zero() {
                cb.unused_updates[i] = 0;
                continue;
            }
            cb.unused_updates[i] += 1;
            if cb.unused_updates[i] >= limit {
                let row = rng.gen_range(0..z_flat.nrows());
                cb.entries.row_mut(i).assign(&z_flat.row(row));
                cb.ema_embed_sum.row_mut(i).assign(&z_flat.row(row));
                cb.ema_cluster_size[i] = T::one();
                cb.unused_updates[i] = 0;
            }
        }
    }

    debug_assert!(cb.is_finite(), "codebook picked up non-finite values");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodebookStats {
    /// Number of distinct codes present.
    pub usage: usize,
    /// exp(entropy) of the empirical code distribution, in [1, d_Z].
    pub perplexity: f64,
}

pub fn codebook_stats(indices: &[u32]) -> Result<CodebookStats> {
    if indices.is_empty() {
        return Err(Error::contract("codebook_stats: empty input"));
    }
    let mut counts: HashMap<u32, u64> = HashMap::new();
    for &i in indices {
        *counts.entry(i).or_insert(0) += 1;
    }
    let total = indices.len() as f64;
    let entropy: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(CodebookStats {
        usage: counts.len(),
        perplexity: entropy.exp(),
    })
}

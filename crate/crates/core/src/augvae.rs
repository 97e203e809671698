//! Hierarchical feature-augmented autoencoder.
//!
//! The multi-level model (`AugVaeMl`) downsamples an image through one
//! factor-4 and three factor-2 encoder stages, quantizes all four latent maps
//! against one shared codebook, and decodes coarse-to-fine, concatenating
//! each level's quantized tensor onto the running decoder state. The
//! single-level model (`AugVaeSl`) is produced from it by [`surgery_to_sl`]:
//! the two coarsest levels are removed and each concatenation is replaced by
//! a 1x1 channel-doubling convolution.
//!
//! Stages are ResNet-style with bottleneck residual blocks (group norm +
//! SiLU), strided convolutions for downsampling and nearest-upsample +
//! convolution for upsampling; factor-4 stages are two factor-2 layers. The
//! final decoder output is squashed to [-1, 1] with tanh.

use crate::error::{Error, Result};
use crate::nn::{randn, Conv2d, GroupNorm, ParamSet};
use crate::quantizer::{quantize, Codebook, QuantizeResult, SharedCodebook};
use crate::rng::stream_rng;
use crate::scalar::{s, Scalar};
use crate::tensor::{Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct AugVaeConfig {
    /// Stage width C; also the code dimension d (latents feed the quantizer
    /// without extra projection).
    pub base_channels: usize,
    /// Codebook size d_Z.
    pub codebook_size: usize,
    /// Bottleneck residual blocks per stage.
    pub resblocks: usize,
    /// Commitment weight.
    pub beta_commit: f64,
    /// EMA decay for the codebook.
    pub ema_decay: f64,
    /// Laplace smoothing epsilon for the codebook.
    pub smoothing_eps: f64,
}

impl Default for AugVaeConfig {
    fn default() -> Self {
        AugVaeConfig {
            base_channels: 256,
            codebook_size: 8192,
            resblocks: 2,
            beta_commit: 0.25,
            ema_decay: 0.99,
            smoothing_eps: 1e-5,
        }
    }
}

impl AugVaeConfig {
    /// Small shapes for tests and desk runs.
    pub fn desk(base_channels: usize, codebook_size: usize) -> Self {
        AugVaeConfig {
            base_channels,
            codebook_size,
            resblocks: 1,
            ..Default::default()
        }
    }
}

struct ResBlock<T: Scalar> {
    gn1: GroupNorm<T>,
    conv1: Conv2d<T>,
    gn2: GroupNorm<T>,
    conv2: Conv2d<T>,
    gn3: GroupNorm<T>,
    conv3: Conv2d<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(params: &mut ParamSet<T>, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = (width / 2).max(1);
        ResBlock {
            gn1: GroupNorm::new(params, &format!("{name}.gn1"), width),
            conv1: Conv2d::new(params, &format!("{name}.conv1"), width, mid, 1, 1, 0, rng),
            gn2: GroupNorm::new(params, &format!("{name}.gn2"), mid),
            conv2: Conv2d::new(params, &format!("{name}.conv2"), mid, mid, 3, 1, 1, rng),
            gn3: GroupNorm::new(params, &format!("{name}.gn3"), mid),
            conv3: Conv2d::new(params, &format!("{name}.conv3"), mid, width, 1, 1, 0, rng),
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let h = self.conv1.forward(tape, &self.gn1.forward(tape, x).silu());
        let h = self.conv2.forward(tape, &self.gn2.forward(tape, &h).silu());
        let h = self.conv3.forward(tape, &self.gn3.forward(tape, &h).silu());
        x.add(&h)
    }
}

/// E(f, c_out): one strided conv + resblocks per factor-2 halving.
struct EncStage<T: Scalar> {
    halvings: Vec<(Conv2d<T>, Vec<ResBlock<T>>)>,
}

impl<T: Scalar> EncStage<T> {
    fn new(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        factor: usize,
        n_res: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(factor == 2 || factor == 4, "stage factor must be 2 or 4");
        let steps = if factor == 4 { 2 } else { 1 };
        let mut halvings = Vec::new();
        for step in 0..steps {
            let cin = if step == 0 { c_in } else { c_out };
            let conv = Conv2d::new(
                params,
                &format!("{name}.down{step}"),
                cin,
                c_out,
                3,
                2,
                1,
                rng,
            );
            let res = (0..n_res)
                .map(|r| ResBlock::new(params, &format!("{name}.res{step}_{r}"), c_out, rng))
                .collect();
            halvings.push((conv, res));
        }
        EncStage { halvings }
    }

    fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let mut h = x.clone();
        for (down, res) in &self.halvings {
            h = down.forward(tape, &h);
            for r in res {
                h = r.forward(tape, &h);
            }
        }
        h
    }
}

/// G(f, c_out): conv-in + resblocks, then per factor-2 doubling a nearest
/// upsample followed by a conv (the last one maps to c_out).
struct DecStage<T: Scalar> {
    conv_in: Conv2d<T>,
    res: Vec<ResBlock<T>>,
    ups: Vec<Conv2d<T>>,
    pub in_channels: usize,
}

impl<T: Scalar> DecStage<T> {
    fn new(
        params: &mut ParamSet<T>,
        name: &str,
        c_in: usize,
        width: usize,
        c_out: usize,
        factor: usize,
        n_res: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(factor == 2 || factor == 4, "stage factor must be 2 or 4");
        let doublings = if factor == 4 { 2 } else { 1 };
        let conv_in = Conv2d::new(params, &format!("{name}.in"), c_in, width, 3, 1, 1, rng);
        let res = (0..n_res)
            .map(|r| ResBlock::new(params, &format!("{name}.res{r}"), width, rng))
            .collect();
        let mut ups = Vec::new();
        for d in 0..doublings {
            let cout = if d + 1 == doublings { c_out } else { width };
            ups.push(Conv2d::new(
                params,
                &format!("{name}.up{d}"),
                width,
                cout,
                3,
                1,
                1,
                rng,
            ));
        }
        DecStage {
            conv_in,
            res,
            ups,
            in_channels: c_in,
        }
    }

    fn forward(&self, tape: &Tape<T>, x: &Var<T>) -> Var<T> {
        let mut h = self.conv_in.forward(tape, x);
        for r in &self.res {
            h = r.forward(tape, &h);
        }
        for up in &self.ups {
            h = up.forward(tape, &h.upsample_nearest_2x());
        }
        h
    }
}

/// Four-level hierarchical autoencoder with one shared codebook.
pub struct AugVaeMl<T: Scalar> {
    pub params: ParamSet<T>,
    enc: Vec<EncStage<T>>,
    dec: Vec<DecStage<T>>,
    pub codebook: SharedCodebook<T>,
    pub cfg: AugVaeConfig,
}

impl<T: Scalar> AugVaeMl<T> {
    pub fn new(cfg: AugVaeConfig, seed: u64) -> Self {
        let c = cfg.base_channels;
        let n_res = cfg.resblocks;
        let mut rng = stream_rng(seed, "augvae-init", 0);
        let mut params = ParamSet::new();
        let enc = vec![
            EncStage::new(&mut params, "enc0", 3, c, 4, n_res, &mut rng),
            EncStage::new(&mut params, "enc1", c, c, 2, n_res, &mut rng),
            EncStage::new(&mut params, "enc2", c, c, 2, n_res, &mut rng),
            EncStage::new(&mut params, "enc3", c, c, 2, n_res, &mut rng),
        ];
        // dec0 consumes the coarsest quantized map alone (C channels); every
        // later stage consumes concat(previous output, quantized level) = 2C.
        let dec = vec![
            DecStage::new(&mut params, "dec0", c, c, c, 2, n_res, &mut rng),
            DecStage::new(&mut params, "dec1", 2 * c, c, c, 2, n_res, &mut rng),
            DecStage::new(&mut params, "dec2", 2 * c, c, c, 2, n_res, &mut rng),
            DecStage::new(&mut params, "dec3", 2 * c, c, 3, 4, n_res, &mut rng),
        ];
        let codebook = SharedCodebook::new(Codebook::new(
            cfg.codebook_size,
            c,
            s(cfg.ema_decay),
            s(cfg.smoothing_eps),
            seed,
        ));
        AugVaeMl {
            params,
            enc,
            dec,
            codebook,
            cfg,
        }
    }

    /// Continuous latents at H/4, H/8, H/16, H/32 (fine to coarse).
    pub fn encode(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::contract("encode_ml: input must be [B, 3, H, W]"));
        }
        if shape[2] % 32 != 0 || shape[3] % 32 != 0 {
            return Err(Error::contract(format!(
                "encode_ml: spatial size {}x{} not divisible by 32",
                shape[2], shape[3]
            )));
        }
        let mut latents = Vec::with_capacity(4);
        let mut h = x.clone();
        for stage in &self.enc {
            h = stage.forward(tape, &h);
            latents.push(h.clone());
        }
        Ok(latents)
    }

    /// Decode quantized levels (given fine to coarse) back to an image in
    /// [-1, 1]. Runs coarse to fine, concatenating each level's tensor.
    pub fn decode(&self, tape: &Tape<T>, quantized: &[Var<T>]) -> Result<Var<T>> {
        if quantized.len() != 4 {
            return Err(Error::contract("decode_ml: expected 4 quantized levels"));
        }
        let c = self.cfg.base_channels;
        for (i, q) in quantized.iter().enumerate() {
            let shape = q.shape();
            if shape.len() != 4 || shape[1] != c {
                return Err(Error::shape(format!(
                    "decode_ml: level {i} has shape {shape:?}, expected [B, {c}, ., .]"
                )));
            }
        }
        let mut h = self.dec[0].forward(tape, &quantized[3]);
        for (stage, q) in self.dec[1..].iter().zip(quantized.iter().rev().skip(1)) {
            let joined = h.concat(q, 1);
            h = stage.forward(tape, &joined);
        }
        Ok(h.tanh_act())
    }

    /// Decoder input width per stage, coarsest first (for shape audits).
    pub fn decoder_in_channels(&self) -> Vec<usize> {
        self.dec.iter().map(|d| d.in_channels).collect()
    }
}

/// Quantize each latent level against the shared codebook; commitment losses
/// are summed.
pub fn quantize_levels<T: Scalar>(
    latents: &[Var<T>],
    codebook: &SharedCodebook<T>,
    beta: T,
) -> Result<(Vec<Var<T>>, Vec<ArrayD<u32>>, Var<T>)> {
    if latents.is_empty() {
        return Err(Error::contract("quantize_levels: no latents"));
    }
    let mut quantized = Vec::with_capacity(latents.len());
    let mut indices = Vec::with_capacity(latents.len());
    let mut total: Option<Var<T>> = None;
    for z in latents {
        let QuantizeResult {
            quantized: q,
            indices: idx,
            commitment_loss,
        } = quantize(z, codebook, beta)?;
        quantized.push(q);
        indices.push(idx);
        total = Some(match total {
            Some(acc) => acc.add(&commitment_loss),
            None => commitment_loss,
        });
    }
    Ok((quantized, indices, total.unwrap()))
}

/// Single-level autoencoder derived from the multi-level one. Parameter
/// names keep their multi-level identifiers (enc0, enc1, dec2, dec3) so the
/// surgery copy is name-for-name.
pub struct AugVaeSl<T: Scalar> {
    pub params: ParamSet<T>,
    enc: Vec<EncStage<T>>,
    expand_pre_dec2: Conv2d<T>,
    expand_pre_dec3: Conv2d<T>,
    dec: Vec<DecStage<T>>,
    pub codebook: SharedCodebook<T>,
    pub cfg: AugVaeConfig,
}

impl<T: Scalar> AugVaeSl<T> {
    pub fn new(cfg: AugVaeConfig, seed: u64) -> Self {
        let c = cfg.base_channels;
        let n_res = cfg.resblocks;
        let mut rng = stream_rng(seed, "augvae-sl-init", 0);
        let mut params = ParamSet::new();
        let enc = vec![
            EncStage::new(&mut params, "enc0", 3, c, 4, n_res, &mut rng),
            EncStage::new(&mut params, "enc1", c, c, 2, n_res, &mut rng),
        ];
        let expand_pre_dec2 = expander(&mut params, "expand1", c, &mut rng);
        let expand_pre_dec3 = expander(&mut params, "expand2", c, &mut rng);
        let dec = vec![
            DecStage::new(&mut params, "dec2", 2 * c, c, c, 2, n_res, &mut rng),
            DecStage::new(&mut params, "dec3", 2 * c, c, 3, 4, n_res, &mut rng),
        ];
        let codebook = SharedCodebook::new(Codebook::new(
            cfg.codebook_size,
            c,
            s(cfg.ema_decay),
            s(cfg.smoothing_eps),
            seed,
        ));
        AugVaeSl {
            params,
            enc,
            expand_pre_dec2,
            expand_pre_dec3,
            dec,
            codebook,
            cfg,
        }
    }

    /// Single continuous latent at H/8.
    pub fn encode(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::contract("encode_sl: input must be [B, 3, H, W]"));
        }
        if shape[2] % 8 != 0 || shape[3] % 8 != 0 {
            return Err(Error::contract(format!(
                "encode_sl: spatial size {}x{} not divisible by 8",
                shape[2], shape[3]
            )));
        }
        let mut h = x.clone();
        for stage in &self.enc {
            h = stage.forward(tape, &h);
        }
        Ok(h)
    }

    /// Decode one quantized latent map back to an image in [-1, 1].
    pub fn decode(&self, tape: &Tape<T>, q: &Var<T>) -> Result<Var<T>> {
        let shape = q.shape();
        let c = self.cfg.base_channels;
        if shape.len() != 4 || shape[1] != c {
            return Err(Error::shape(format!(
                "decode_sl: input shape {shape:?}, expected [B, {c}, ., .]"
            )));
        }
        let h = self.expand_pre_dec2.forward(tape, q);
        let h = self.dec[0].forward(tape, &h);
        let h = self.expand_pre_dec3.forward(tape, &h);
        let h = self.dec[1].forward(tape, &h);
        Ok(h.tanh_act())
    }

    /// Encode an image batch to index grids (frozen helper for the
    /// transformer pipeline and the encode CLI).
    pub fn encode_indices(&self, x: &ArrayD<T>) -> Result<ArrayD<u32>> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = self.encode(&tape, &xv)?;
        // [B, C, h, w] -> [B, h, w, C] rows for quantization
        let zperm = z.permute(&[0, 2, 3, 1]);
        let (_, indices) = crate::quantizer::quantize_infer(&zperm.value(), &self.codebook)?;
        Ok(indices)
    }

    /// Decode index grids `[B, h, w]` to images.
    pub fn decode_indices(&self, indices: &ArrayD<u32>) -> Result<ArrayD<T>> {
        let rows = crate::quantizer::lookup(indices, &self.codebook)?;
        let tape = Tape::new();
        let q = tape.constant(rows).permute(&[0, 3, 1, 2]);
        Ok(self.decode(&tape, &q)?.value())
    }

    pub fn decoder_in_channels(&self) -> Vec<usize> {
        self.dec.iter().map(|d| d.in_channels).collect()
    }
}

/// 1x1 channel-doubling convolution initialized near channel duplication:
/// two stacked 0.5-scaled identities plus small noise, so the first
/// single-level forward approximates the pre-surgery signal statistics.
fn expander<T: Scalar>(
    params: &mut ParamSet<T>,
    name: &str,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Conv2d<T> {
    let mut w = randn::<T>(&[2 * c, c, 1, 1], 0.01, rng);
    for o in 0..2 * c {
        let i = o % c;
        w[IxDyn(&[o, i, 0, 0])] += s(0.5);
    }
    let conv = Conv2d::new(params, name, c, 2 * c, 1, 1, 0, rng);
    conv.w.borrow_mut().value = w;
    conv
}

/// Build the single-level model from a (trained or untrained) multi-level
/// one. Surviving stage weights are deep-copied — subsequent finetuning
/// leaves the source intact — while the codebook is the same shared object.
pub fn surgery_to_sl<T: Scalar>(ml: &AugVaeMl<T>) -> AugVaeSl<T> {
    let mut sl = AugVaeSl::new(ml.cfg.clone(), 1);
    for (name, p) in sl.params.iter() {
        if let Some(src) = ml.params.get(name) {
            p.borrow_mut().value = src.borrow().value.clone();
        }
    }
    sl.codebook = ml.codebook.clone();
    sl
}

/// Pluggable perceptual distance. The default implementation contributes no
/// gradient; implementations may supply one w.r.t. the reconstruction.
pub trait PerceptualLoss<T: Scalar> {
    fn distance(&self, x: &ArrayD<T>, x_hat: &ArrayD<T>) -> Result<T>;
    fn grad_wrt_x_hat(&self, _x: &ArrayD<T>, _x_hat: &ArrayD<T>) -> Option<ArrayD<T>> {
        None
    }
}

pub struct ReconLossConfig<T: Scalar> {
    pub perceptual_weight: T,
    pub perceptual: Option<Box<dyn PerceptualLoss<T>>>,
}

impl<T: Scalar> Default for ReconLossConfig<T> {
    fn default() -> Self {
        ReconLossConfig {
            perceptual_weight: s(0.1),
            perceptual: None,
        }
    }
}

/// `MSE(x, x_hat) + weight * perceptual(x, x_hat)` (when a scorer is set).
pub fn reconstruction_loss<T: Scalar>(
    x: &ArrayD<T>,
    x_hat: &Var<T>,
    cfg: &ReconLossConfig<T>,
) -> Result<Var<T>> {
    if x.shape() != x_hat.shape().as_slice() {
        return Err(Error::contract(format!(
            "reconstruction_loss: shape mismatch {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let mse = x_hat.mse_const(x.clone());
    match &cfg.perceptual {
        None => Ok(mse),
        Some(p) => {
            let value = x_hat.with_value(|xh| p.distance(x, xh))?;
            let grad = x_hat.with_value(|xh| p.grad_wrt_x_hat(x, xh));
            let term = x_hat.external_term(value, grad).scale(cfg.perceptual_weight);
            Ok(mse.add(&term))
        }
    }
}

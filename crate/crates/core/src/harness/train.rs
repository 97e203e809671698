//! Training loops: multi-level autoencoder, single-level finetune (after
//! surgery), and the bidirectional transformer.
//!
//! Every random choice is a pure function of `(seed, stream, step)`, so a
//! rerun with the same config is bitwise identical and a resumed run
//! continues exactly where the checkpoint left off.

use super::checkpoint::Checkpoint;
use super::config::{Alternation, Config, Stage};
use super::data;
use super::manifest::Manifest;
use super::schedule::PlateauScheduler;
use crate::augvae::{
    quantize_levels, reconstruction_loss, surgery_to_sl, AugVaeMl, AugVaeSl, ReconLossConfig,
};
use crate::biart::{
    pack_sequence, BiartConfig, BiartModel, Direction, SequencePack, TokenLayout, TrainDropout,
};
use crate::error::{Error, Result};
use crate::nn::AdamW;
use crate::quantizer::ema_update;
use crate::rng::stream_rng;
use crate::scalar::{s, Scalar};
use crate::tensor::Tape;
use crate::tokenizer::{self, BpeVocab};
use ndarray::ArrayD;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct AugvaeStepLog {
    pub step: u64,
    pub total: f64,
    pub mse: f64,
    pub commit: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct BiartStepLog {
    pub step: u64,
    pub direction: Direction,
    pub nll_ref: f64,
    pub nll_gen: f64,
    pub total: f64,
    /// Teacher-forced argmax accuracy over generation-target rows; only
    /// computed when early stopping is armed, otherwise -1.
    pub gen_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub ckpt_path: PathBuf,
    pub steps_run: u64,
    pub augvae_log: Vec<AugvaeStepLog>,
    pub biart_log: Vec<BiartStepLog>,
    pub early_stopped: bool,
}

fn out_path(cfg: &Config, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

// ---------------------------------------------------------------------------
// Model (re)construction from checkpoints
// ---------------------------------------------------------------------------

pub fn load_augvae_ml<T: Scalar>(ck: &Checkpoint) -> Result<AugVaeMl<T>> {
    if ck.stage != Stage::AugvaeMl {
        return Err(Error::contract(
            "checkpoint does not hold a multi-level autoencoder",
        ));
    }
    let cfg = Config::parse_toml(&ck.config_toml)?;
    let model = AugVaeMl::new(cfg.augvae_config(), ck.seed);
    ck.restore_params("", &model.params)?;
    {
        let mut cb = model.codebook.write();
        ck.restore_codebook("", &mut cb)?;
    }
    Ok(model)
}

pub fn load_augvae_sl<T: Scalar>(ck: &Checkpoint) -> Result<AugVaeSl<T>> {
    if ck.stage != Stage::AugvaeSl {
        return Err(Error::contract(
            "checkpoint does not hold a single-level autoencoder",
        ));
    }
    let cfg = Config::parse_toml(&ck.config_toml)?;
    let model = AugVaeSl::new(cfg.augvae_config(), ck.seed);
    ck.restore_params("", &model.params)?;
    {
        let mut cb = model.codebook.write();
        ck.restore_codebook("", &mut cb)?;
    }
    Ok(model)
}

/// Rebuild the transformer together with its embedded frozen autoencoder and
/// vocabulary.
pub fn load_biart<T: Scalar>(
    ck: &Checkpoint,
) -> Result<(BiartModel<T>, AugVaeSl<T>, BpeVocab)> {
    if ck.stage != Stage::Biart {
        return Err(Error::contract("checkpoint does not hold a transformer"));
    }
    let cfg = Config::parse_toml(&ck.config_toml)?;
    let vocab = tokenizer::read_vocab(
        std::str::from_utf8(ck.get_blob("vocab")?)
            .map_err(|_| Error::format("vocab blob not UTF-8"))?,
    )?;
    let sl_cfg = Config::parse_toml(
        std::str::from_utf8(ck.get_blob("augvae_config")?)
            .map_err(|_| Error::format("augvae_config blob not UTF-8"))?,
    )?;
    let sl = AugVaeSl::new(sl_cfg.augvae_config(), ck.seed);
    ck.restore_params("augvae.", &sl.params)?;
    {
        let mut cb = sl.codebook.write();
        ck.restore_codebook("augvae.", &mut cb)?;
    }
    let layout = biart_layout(&cfg, sl_cfg.codebook_size)?;
    let model = BiartModel::new(
        BiartConfig {
            layout,
            layers: cfg.layers,
            dim: cfg.model_dim,
            heads: cfg.heads,
            dropout: cfg.dropout,
        },
        ck.seed,
    );
    ck.restore_params("", &model.params)?;
    Ok((model, sl, vocab))
}

fn biart_layout(cfg: &Config, image_codes: usize) -> Result<TokenLayout> {
    if cfg.image_side % 8 != 0 {
        return Err(Error::contract("image_side must be divisible by 8"));
    }
    let grid = cfg.image_side / 8;
    Ok(TokenLayout {
        image_codes,
        text_vocab: cfg.text_vocab,
        text_len: cfg.text_len,
        image_len: grid * grid,
    })
}

// ---------------------------------------------------------------------------
// Autoencoder training (multi-level, and single-level after surgery)
// ---------------------------------------------------------------------------

enum AutoencoderKind<T: Scalar> {
    Ml(AugVaeMl<T>),
    Sl(AugVaeSl<T>),
}

impl<T: Scalar> AutoencoderKind<T> {
    fn params(&self) -> &crate::nn::ParamSet<T> {
        match self {
            AutoencoderKind::Ml(m) => &m.params,
            AutoencoderKind::Sl(m) => &m.params,
        }
    }

    fn codebook(&self) -> &crate::quantizer::SharedCodebook<T> {
        match self {
            AutoencoderKind::Ml(m) => &m.codebook,
            AutoencoderKind::Sl(m) => &m.codebook,
        }
    }
}

/// Optimize reconstruction + commitment with EMA codebook updates and the
/// plateau schedule. Stage `augvae_sl` requires a source multi-level
/// checkpoint; the single-level model starts from its surgery.
pub fn train_augvae<T: Scalar>(cfg: &Config) -> Result<TrainReport> {
    if cfg.stage == Stage::Biart {
        return Err(Error::contract("train_augvae: stage must be an autoencoder"));
    }
    cfg.validate()?;
    if cfg.image_side % 32 != 0 {
        return Err(Error::contract("image_side must be divisible by 32"));
    }
    let manifest = Manifest::load(Path::new(&cfg.manifest))?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let model = match cfg.stage {
        Stage::AugvaeMl => AutoencoderKind::Ml(AugVaeMl::new(cfg.augvae_config(), cfg.seed)),
        Stage::AugvaeSl => {
            if cfg.source_ckpt.is_empty() {
                return Err(Error::contract(
                    "single-level finetuning requires source_ckpt (the multi-level checkpoint)",
                ));
            }
            let src = Checkpoint::load(Path::new(&cfg.source_ckpt))?;
            let ml: AugVaeMl<T> = load_augvae_ml(&src)?;
            AutoencoderKind::Sl(surgery_to_sl(&ml))
        }
        Stage::Biart => unreachable!(),
    };
    {
        let mut cb = model.codebook().write();
        cb.restart_after = (cfg.dead_code_restart > 0).then_some(cfg.dead_code_restart);
    }

    let mut opt = AdamW::<T>::new(
        s(cfg.effective_lr()),
        s(cfg.adam_beta1),
        s(cfg.adam_beta2()),
        s(cfg.adam_eps()),
        s(cfg.weight_decay()),
    );
    let mut sched = PlateauScheduler::new(cfg.plateau_window, cfg.plateau_min_improve, 0.5);
    let mut start_step: u64 = 0;

    if !cfg.resume.is_empty() {
        let ck = Checkpoint::load(Path::new(&cfg.resume))?;
        if ck.stage != cfg.stage {
            return Err(Error::contract("resume checkpoint stage mismatch"));
        }
        ck.restore_params("", model.params())?;
        {
            let mut cb = model.codebook().write();
            ck.restore_codebook("", &mut cb)?;
        }
        sched = serde_json::from_slice(ck.get_blob("scheduler")?)
            .map_err(|e| Error::format(format!("scheduler blob: {e}")))?;
        opt.t = ck.adam_t;
        start_step = ck.step;
    }

    let filter = data::filter_from_name(&cfg.resample_filter)?;
    let mut image_cache: HashMap<usize, image::RgbImage> = HashMap::new();
    let recon_cfg = ReconLossConfig::<T> {
        perceptual_weight: s(cfg.perceptual_weight),
        perceptual: None,
    };

    let mut log = Vec::new();
    let mut block_losses = Vec::new();
    let mut early_stopped = false;
    let mut step = start_step;
    while step < cfg.max_steps {
        let idxs = data::batch_indices(manifest.len(), cfg.batch_size, step, cfg.seed);
        let mut crop_rng = stream_rng(cfg.seed, "crop", step);
        let mut tensors = Vec::with_capacity(idxs.len());
        for &i in &idxs {
            let base = match image_cache.get(&i) {
                Some(img) => img.clone(),
                None => {
                    let img = data::load_rgb(&manifest.image_path(i), cfg.image_side, filter)?;
                    image_cache.insert(i, img.clone());
                    img
                }
            };
            let img = data::random_crop(&base, cfg.crop_ratio, filter, &mut crop_rng);
            tensors.push(data::to_tensor::<T>(&img));
        }
        let batch = data::stack_batch(&tensors);

        let tape = Tape::new();
        let x = tape.constant(batch.clone());
        let latents = match &model {
            AutoencoderKind::Ml(m) => m.encode(&tape, &x)?,
            AutoencoderKind::Sl(m) => vec![m.encode(&tape, &x)?],
        };
        let nhwc: Vec<_> = latents.iter().map(|l| l.permute(&[0, 2, 3, 1])).collect();
        let (quantized, indices, commit) =
            quantize_levels(&nhwc, model.codebook(), s(cfg.beta_commit))?;
        let chw: Vec<_> = quantized.iter().map(|q| q.permute(&[0, 3, 1, 2])).collect();
        let x_hat = match &model {
            AutoencoderKind::Ml(m) => m.decode(&tape, &chw)?,
            AutoencoderKind::Sl(m) => m.decode(&tape, &chw[0])?,
        };
        let recon = reconstruction_loss(&batch, &x_hat, &recon_cfg)?;
        let total = recon.add(&commit);
        model.params().zero_grads();
        tape.backward(&total);

        // Pooled EMA update across all levels (full precision).
        {
            let mut rows: Vec<ArrayD<T>> = Vec::new();
            let mut idx_flat: Vec<u32> = Vec::new();
            for (z, idx) in nhwc.iter().zip(&indices) {
                rows.push(z.value());
                idx_flat.extend(idx.iter().copied());
            }
            let flat: Vec<ndarray::Array2<T>> = rows
                .iter()
                .map(crate::tensor::linalg::flatten_leading)
                .collect();
            let views: Vec<_> = flat.iter().map(|f| f.view()).collect();
            let pooled = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
            let mut cb = model.codebook().write();
            ema_update(&mut cb, pooled.view(), &idx_flat)?;
        }

        opt.lr = s::<T>(cfg.effective_lr() * sched.scale);
        opt.step(model.params());

        let mse = recon.item().widen();
        let entry = AugvaeStepLog {
            step,
            total: total.item().widen(),
            mse,
            commit: commit.item().widen(),
            lr: opt.lr.widen(),
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.max_steps) {
            println!(
                "[augvae] step {:>6}  loss {:.6}  mse {:.6}  commit {:.6}  lr {:.3e}",
                entry.step, entry.total, entry.mse, entry.commit, entry.lr
            );
        }
        block_losses.push(entry.total);
        log.push(entry);

        if cfg.plateau_every > 0 && (step + 1) % cfg.plateau_every == 0 {
            let mean = block_losses.iter().sum::<f64>() / block_losses.len() as f64;
            block_losses.clear();
            if sched.observe(mean) {
                println!(
                    "[augvae] plateau at step {step}: lr scale now {}",
                    sched.scale
                );
            }
        }

        step += 1;
        if cfg.save_every > 0 && step % cfg.save_every == 0 && step < cfg.max_steps {
            save_augvae_ckpt(cfg, &model, &opt, &sched, step)?;
        }
        if cfg.target_mse > 0.0 && mse < cfg.target_mse {
            println!("[augvae] target mse {} reached at step {step}", cfg.target_mse);
            early_stopped = true;
            break;
        }
    }

    let ckpt_path = save_augvae_ckpt(cfg, &model, &opt, &sched, step)?;
    Ok(TrainReport {
        ckpt_path,
        steps_run: step - start_step,
        augvae_log: log,
        biart_log: Vec::new(),
        early_stopped,
    })
}

fn save_augvae_ckpt<T: Scalar>(
    cfg: &Config,
    model: &AutoencoderKind<T>,
    opt: &AdamW<T>,
    sched: &PlateauScheduler,
    step: u64,
) -> Result<PathBuf> {
    let mut ck = Checkpoint::new(cfg.stage, T::DTYPE, cfg.seed);
    ck.step = step;
    ck.adam_t = opt.t;
    ck.config_toml = cfg.to_toml();
    ck.put_blob(
        "scheduler",
        serde_json::to_vec(sched).expect("scheduler serializes"),
    );
    ck.put_params("", model.params());
    ck.put_codebook("", &model.codebook().read());
    let path = out_path(cfg, &format!("checkpoint_{step:06}.lvck"));
    ck.save(&path)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Transformer training
// ---------------------------------------------------------------------------

/// Alternating-direction dual-NLL training over a frozen single-level
/// autoencoder. Image token grids are cached up front when the crop is
/// disabled (`crop_ratio = 1`); with cropping on, images are re-encoded
/// every step.
pub fn train_biart<T: Scalar>(cfg: &Config) -> Result<TrainReport> {
    if cfg.stage != Stage::Biart {
        return Err(Error::contract("train_biart: stage must be biart"));
    }
    cfg.validate()?;
    if cfg.source_ckpt.is_empty() {
        return Err(Error::contract(
            "transformer training requires source_ckpt (the frozen single-level checkpoint)",
        ));
    }
    let manifest = Manifest::load(Path::new(&cfg.manifest))?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let src = Checkpoint::load(Path::new(&cfg.source_ckpt))?;
    let sl: AugVaeSl<T> = load_augvae_sl(&src)?;
    let sl_cfg = Config::parse_toml(&src.config_toml)?;

    let bpe_target = if cfg.bpe_target > 0 {
        cfg.bpe_target
    } else {
        cfg.text_vocab
    };
    let vocab = if cfg.vocab_file.is_empty() {
        tokenizer::train_bpe(
            manifest.records.iter().map(|r| r.caption.as_str()),
            bpe_target,
            true,
        )?
    } else {
        tokenizer::read_vocab(&std::fs::read_to_string(&cfg.vocab_file)?)?
    };
    if vocab.size() > cfg.text_vocab {
        return Err(Error::contract(
            "vocabulary larger than the layout's text block",
        ));
    }

    let layout = biart_layout(cfg, sl_cfg.codebook_size)?;
    let model = BiartModel::<T>::new(
        BiartConfig {
            layout,
            layers: cfg.layers,
            dim: cfg.model_dim,
            heads: cfg.heads,
            dropout: cfg.dropout,
        },
        cfg.seed,
    );

    let mut opt = AdamW::<T>::new(
        s(cfg.effective_lr()),
        s(cfg.adam_beta1),
        s(cfg.adam_beta2()),
        s(cfg.adam_eps()),
        s(cfg.weight_decay()),
    );
    let mut sched = PlateauScheduler::new(cfg.plateau_window, cfg.plateau_min_improve, 0.5);
    let mut start_step: u64 = 0;
    if !cfg.resume.is_empty() {
        let ck = Checkpoint::load(Path::new(&cfg.resume))?;
        if ck.stage != Stage::Biart {
            return Err(Error::contract("resume checkpoint stage mismatch"));
        }
        ck.restore_params("", &model.params)?;
        sched = serde_json::from_slice(ck.get_blob("scheduler")?)
            .map_err(|e| Error::format(format!("scheduler blob: {e}")))?;
        opt.t = ck.adam_t;
        start_step = ck.step;
    }

    let filter = data::filter_from_name(&cfg.resample_filter)?;
    // Frozen-encoder token grids; cache when deterministic.
    let cache_grids = cfg.crop_ratio >= 1.0;
    let mut grid_cache: HashMap<usize, Vec<u32>> = HashMap::new();
    let mut image_cache: HashMap<usize, image::RgbImage> = HashMap::new();
    let encode_record = |i: usize,
                         crop_rng: &mut rand_chacha::ChaCha8Rng,
                         image_cache: &mut HashMap<usize, image::RgbImage>,
                         grid_cache: &mut HashMap<usize, Vec<u32>>|
     -> Result<Vec<u32>> {
        if cache_grids {
            if let Some(g) = grid_cache.get(&i) {
                return Ok(g.clone());
            }
        }
        let base = match image_cache.get(&i) {
            Some(img) => img.clone(),
            None => {
                let img = data::load_rgb(&manifest.image_path(i), cfg.image_side, filter)?;
                image_cache.insert(i, img.clone());
                img
            }
        };
        let img = if cache_grids {
            base
        } else {
            data::random_crop(&base, cfg.crop_ratio, filter, crop_rng)
        };
        let tensor = data::to_tensor::<T>(&img).insert_axis(ndarray::Axis(0));
        let grid = sl.encode_indices(&tensor)?;
        let ids: Vec<u32> = grid.iter().copied().collect();
        if cache_grids {
            grid_cache.insert(i, ids.clone());
        }
        Ok(ids)
    };

    let mut log = Vec::new();
    let mut block_losses = Vec::new();
    let mut ok_by_dir = [false, false];
    let mut early_stopped = false;
    let track_accuracy = cfg.target_nll > 0.0;
    let mut step = start_step;
    while step < cfg.max_steps {
        let idxs = data::batch_indices(manifest.len(), cfg.batch_size, step, cfg.seed);
        let mut crop_rng = stream_rng(cfg.seed, "crop", step);
        let mut bpe_rng = stream_rng(cfg.seed, "bpe", step);

        let mut packs: Vec<SequencePack> = Vec::with_capacity(idxs.len());
        let step_dir = if step % 2 == 0 {
            Direction::TextToImage
        } else {
            Direction::ImageToText
        };
        for (k, &i) in idxs.iter().enumerate() {
            let dir = match cfg.biart_alternation {
                Alternation::Iteration => step_dir,
                Alternation::Sample => {
                    if (step + k as u64) % 2 == 0 {
                        Direction::TextToImage
                    } else {
                        Direction::ImageToText
                    }
                }
            };
            let image_ids =
                encode_record(i, &mut crop_rng, &mut image_cache, &mut grid_cache)?;
            let enc = tokenizer::encode(
                &vocab,
                &manifest.records[i].caption,
                cfg.bpe_dropout,
                layout.text_len,
                &mut bpe_rng,
            )?;
            packs.push(pack_sequence(layout, &enc.real_ids(), &image_ids, dir)?);
        }
        let pack_refs: Vec<&SequencePack> = packs.iter().collect();

        let tape = Tape::new();
        let drop = (cfg.dropout > 0.0).then_some(TrainDropout {
            rate: cfg.dropout,
            seed: cfg.seed,
            step,
        });
        let loss = model.loss(
            &tape,
            &pack_refs,
            drop,
            s(cfg.loss_w_ref),
            s(cfg.loss_w_gen),
        )?;
        model.params.zero_grads();
        tape.backward(&loss.total);

        let gen_accuracy = if track_accuracy {
            gen_argmax_accuracy(&loss.logits.value(), &packs)
        } else {
            -1.0
        };

        opt.lr = s::<T>(cfg.effective_lr() * sched.scale);
        opt.step(&model.params);

        let entry = BiartStepLog {
            step,
            direction: step_dir,
            nll_ref: loss.nll_ref.item().widen(),
            nll_gen: loss.nll_gen.item().widen(),
            total: loss.total.item().widen(),
            gen_accuracy,
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.max_steps) {
            println!(
                "[biart] step {:>6} {}  nll_ref {:.4}  nll_gen {:.4}  acc {:.3}  lr {:.3e}",
                entry.step,
                match entry.direction {
                    Direction::TextToImage => "t2i",
                    Direction::ImageToText => "i2t",
                },
                entry.nll_ref,
                entry.nll_gen,
                entry.gen_accuracy,
                opt.lr.widen()
            );
        }
        block_losses.push(entry.total);
        if cfg.plateau_every > 0 && (step + 1) % cfg.plateau_every == 0 {
            let mean = block_losses.iter().sum::<f64>() / block_losses.len() as f64;
            block_losses.clear();
            if sched.observe(mean) {
                println!("[biart] plateau at step {step}: lr scale now {}", sched.scale);
            }
        }

        if track_accuracy && cfg.biart_alternation == Alternation::Iteration {
            let slot = (step % 2) as usize;
            ok_by_dir[slot] = entry.nll_ref < cfg.target_nll
                && entry.nll_gen < cfg.target_nll
                && entry.gen_accuracy >= 1.0;
        }
        log.push(entry);
        step += 1;

        if cfg.save_every > 0 && step % cfg.save_every == 0 && step < cfg.max_steps {
            save_biart_ckpt(cfg, &model, &sl, &sl_cfg, &vocab, &opt, &sched, step)?;
        }
        if track_accuracy && ok_by_dir[0] && ok_by_dir[1] {
            println!("[biart] memorization target reached at step {step}");
            early_stopped = true;
            break;
        }
    }

    let ckpt_path = save_biart_ckpt(cfg, &model, &sl, &sl_cfg, &vocab, &opt, &sched, step)?;
    Ok(TrainReport {
        ckpt_path,
        steps_run: step - start_step,
        augvae_log: Vec::new(),
        biart_log: log,
        early_stopped,
    })
}

/// Fraction of generation-target rows whose argmax equals the target.
fn gen_argmax_accuracy<T: Scalar>(logits: &ArrayD<T>, packs: &[SequencePack]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, p) in packs.iter().enumerate() {
        let l = p.ids.len();
        for t in 0..l - 1 {
            if !p.gen_loss_mask[t] {
                continue;
            }
            total += 1;
            let row = logits.index_axis(ndarray::Axis(0), i);
            let row = row.index_axis(ndarray::Axis(0), t);
            let mut best = 0usize;
            let mut best_v = row[0];
            for (v, &x) in row.iter().enumerate() {
                if x > best_v {
                    best_v = x;
                    best = v;
                }
            }
            if best as u32 == p.ids[t + 1] {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[allow(clippy::too_many_arguments)]
fn save_biart_ckpt<T: Scalar>(
    cfg: &Config,
    model: &BiartModel<T>,
    sl: &AugVaeSl<T>,
    sl_cfg: &Config,
    vocab: &BpeVocab,
    opt: &AdamW<T>,
    sched: &PlateauScheduler,
    step: u64,
) -> Result<PathBuf> {
    let mut ck = Checkpoint::new(Stage::Biart, T::DTYPE, cfg.seed);
    ck.step = step;
    ck.adam_t = opt.t;
    ck.config_toml = cfg.to_toml();
    ck.put_blob(
        "scheduler",
        serde_json::to_vec(sched).expect("scheduler serializes"),
    );
    ck.put_blob("vocab", tokenizer::write_vocab(vocab).into_bytes());
    ck.put_blob("augvae_config", sl_cfg.to_toml().into_bytes());
    ck.put_params("", &model.params);
    ck.put_params("augvae.", &sl.params);
    ck.put_codebook("augvae.", &sl.codebook.read());
    let path = out_path(cfg, &format!("checkpoint_{step:06}.lvck"));
    ck.save(&path)?;
    Ok(path)
}

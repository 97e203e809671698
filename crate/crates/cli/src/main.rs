//! Command-line surface for the training and sampling pipeline.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lverse::biart::Direction;
use lverse::harness::{
    self, evaluate, train_augvae, train_biart, Checkpoint, Config, IndexGrid, Stage,
};
use lverse::quantizer::codebook_stats;
use lverse::sampler::{self, ConstantScorer, NegReconScorer, SamplerOpts, Scorer};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "lverse", version, about = "Bidirectional image-text generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Per-key overrides mirroring the flat config file; any flag set here wins
/// over the file value.
#[derive(Args, Default, Clone)]
struct Overrides {
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    source_ckpt: Option<String>,
    #[arg(long)]
    resume: Option<String>,
    #[arg(long)]
    image_side: Option<usize>,
    #[arg(long)]
    crop_ratio: Option<f64>,
    #[arg(long)]
    resample_filter: Option<String>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    resblocks: Option<usize>,
    #[arg(long)]
    beta_commit: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    smoothing_eps: Option<f64>,
    #[arg(long)]
    dead_code_restart: Option<u32>,
    #[arg(long)]
    perceptual_weight: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    text_vocab: Option<usize>,
    #[arg(long)]
    text_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    bpe_dropout: Option<f64>,
    #[arg(long)]
    loss_w_ref: Option<f64>,
    #[arg(long)]
    loss_w_gen: Option<f64>,
    #[arg(long)]
    biart_alternation: Option<String>,
    #[arg(long)]
    vocab_file: Option<String>,
    #[arg(long)]
    bpe_target: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    plateau_window: Option<usize>,
    #[arg(long)]
    plateau_min_improve: Option<f64>,
    #[arg(long)]
    plateau_every: Option<u64>,
    #[arg(long)]
    save_every: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    target_mse: Option<f64>,
    #[arg(long)]
    target_nll: Option<f64>,
    #[arg(long)]
    mixed_precision: Option<bool>,
}

impl Overrides {
    fn apply(&self, cfg: &mut Config) -> Result<()> {
        macro_rules! put {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    cfg.set_key(stringify!($field), &v.to_string())?;
                }
            };
        }
        put!(manifest);
        put!(source_ckpt);
        put!(resume);
        put!(image_side);
        put!(crop_ratio);
        put!(resample_filter);
        put!(base_channels);
        put!(codebook_size);
        put!(resblocks);
        put!(beta_commit);
        put!(ema_decay);
        put!(smoothing_eps);
        put!(dead_code_restart);
        put!(perceptual_weight);
        put!(layers);
        put!(model_dim);
        put!(heads);
        put!(text_vocab);
        put!(text_len);
        put!(dropout);
        put!(bpe_dropout);
        put!(loss_w_ref);
        put!(loss_w_gen);
        put!(biart_alternation);
        put!(vocab_file);
        put!(bpe_target);
        put!(batch_size);
        put!(max_steps);
        put!(base_lr);
        put!(adam_beta1);
        put!(adam_beta2);
        put!(adam_eps);
        put!(weight_decay);
        put!(plateau_window);
        put!(plateau_min_improve);
        put!(plateau_every);
        put!(save_every);
        put!(log_every);
        put!(target_mse);
        put!(target_nll);
        put!(mixed_precision);
        Ok(())
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat TOML config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl RunArgs {
    fn build_config(&self, stage: Stage) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path).context("loading config")?,
            None => Config::for_stage(stage),
        };
        cfg.stage = stage;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.to_string_lossy().into_owned();
        }
        self.overrides.apply(&mut cfg)?;
        if cfg.out_dir.is_empty() {
            bail!("--out (or out_dir in the config) is required");
        }
        if cfg.manifest.is_empty() {
            bail!("--manifest (or manifest in the config) is required");
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the multi-level autoencoder.
    TrainAugvae(RunArgs),
    /// Surgery on a multi-level checkpoint, then single-level finetuning.
    FinetuneAugvaeSl(RunArgs),
    /// Train the bidirectional transformer over a frozen single-level model.
    TrainBiart(RunArgs),
    /// Encode an image to index-grid container(s).
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output path; multi-level checkpoints write one file per level
        /// with `_lN` appended to the stem.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        image_side: Option<usize>,
    },
    /// Decode index-grid container(s) back to a PNG.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        /// One grid for single-level models; four (fine to coarse) for
        /// multi-level ones.
        #[arg(long, num_args = 1..)]
        grid: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw n candidates per repetition, rerank, keep top-1; k repetitions.
    SampleImage {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 64)]
        top_k: usize,
        /// constant | neg-recon
        #[arg(long, default_value = "constant")]
        scorer: String,
    },
    /// Sample 32 text tokens per candidate, truncate at the full stop,
    /// rerank, return the top-1 caption.
    SampleCaption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 64)]
        top_k: usize,
    },
    /// Reconstruction, codebook, and NLL report for any checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Codebook usage/perplexity over stored index grids.
    Stats {
        #[arg(long, num_args = 1..)]
        grid: Vec<PathBuf>,
    },
    /// Dump a sequence pack as human-readable rows (debugging aid).
    PackDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        /// Optional image; with none, the image block is all zeros.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value = "t2i")]
        direction: String,
    },
    /// Generate a synthetic manifest of flat-colored scenes (demo data).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TrainAugvae(args) => {
            let cfg = args.build_config(Stage::AugvaeMl)?;
            let report = train_augvae::<f32>(&cfg)?;
            println!("checkpoint written to {}", report.ckpt_path.display());
        }
        Command::FinetuneAugvaeSl(args) => {
            let cfg = args.build_config(Stage::AugvaeSl)?;
            let report = train_augvae::<f32>(&cfg)?;
            println!("checkpoint written to {}", report.ckpt_path.display());
        }
        Command::TrainBiart(args) => {
            let cfg = args.build_config(Stage::Biart)?;
            let report = train_biart::<f32>(&cfg)?;
            println!("checkpoint written to {}", report.ckpt_path.display());
        }
        Command::Encode {
            ckpt,
            image,
            out,
            image_side,
        } => encode_cmd(&ckpt, &image, &out, image_side)?,
        Command::Decode { ckpt, grid, out } => decode_cmd(&ckpt, &grid, &out)?,
        Command::SampleImage {
            ckpt,
            text,
            n,
            k,
            seed,
            out,
            temperature,
            top_k,
            scorer,
        } => sample_image_cmd(&ckpt, &text, n, k, seed, &out, temperature, top_k, &scorer)?,
        Command::SampleCaption {
            ckpt,
            image,
            n,
            seed,
            out,
            temperature,
            top_k,
        } => sample_caption_cmd(&ckpt, &image, n, seed, &out, temperature, top_k)?,
        Command::Eval { ckpt, manifest, out } => {
            let report = evaluate::<f32>(&ckpt, &manifest, &out)?;
            println!(
                "{} records  mean mse {:.6}  mean psnr {:.2}",
                report.summary.records, report.summary.mean_mse, report.summary.mean_psnr
            );
            println!("reports written to {}", out.display());
        }
        Command::Stats { grid } => {
            let mut pooled = Vec::new();
            for path in &grid {
                let g = IndexGrid::load(path)?;
                let ids: Vec<u32> = g.indices.iter().copied().collect();
                let st = codebook_stats(&ids)?;
                println!(
                    "{}: {}x{} d_Z={} usage={} perplexity={:.4}",
                    path.display(),
                    g.indices.nrows(),
                    g.indices.ncols(),
                    g.d_z,
                    st.usage,
                    st.perplexity
                );
                pooled.extend(ids);
            }
            if grid.len() > 1 {
                let st = codebook_stats(&pooled)?;
                println!("pooled: usage={} perplexity={:.4}", st.usage, st.perplexity);
            }
        }
        Command::PackDump {
            ckpt,
            text,
            image,
            direction,
        } => pack_dump_cmd(&ckpt, &text, image.as_deref(), &direction)?,
        Command::GenData { out, n, side, seed } => {
            let manifest = harness::toy::generate(&out, n, side, seed)?;
            println!("manifest written to {}", manifest.display());
        }
    }
    Ok(())
}

fn load_image_tensor(path: &Path, side: usize) -> Result<lverse::ndarray::ArrayD<f32>> {
    let img = harness::data::load_rgb(path, side, lverse::image::imageops::FilterType::Lanczos3)?;
    Ok(harness::data::to_tensor::<f32>(&img))
}

fn encode_cmd(ckpt: &Path, image: &Path, out: &Path, image_side: Option<usize>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = Config::parse_toml(&ck.config_toml)?;
    let side = image_side.unwrap_or(cfg.image_side);
    let tensor = load_image_tensor(image, side)?.insert_axis(lverse::ndarray::Axis(0));

    let write_grid = |indices: lverse::ndarray::ArrayD<u32>, d_z: usize, path: &Path| -> Result<()> {
        let shape = indices.shape().to_vec();
        let grid = indices
            .into_shape_with_order(lverse::ndarray::IxDyn(&[shape[1], shape[2]]))
            .unwrap()
            .into_dimensionality()
            .unwrap();
        IndexGrid::new(grid, d_z as u32)?.save(path)?;
        println!("wrote {}", path.display());
        Ok(())
    };

    match ck.stage {
        Stage::AugvaeSl => {
            let sl = harness::load_augvae_sl::<f32>(&ck)?;
            write_grid(sl.encode_indices(&tensor)?, cfg.codebook_size, out)?;
        }
        Stage::Biart => {
            let (_, sl, _) = harness::load_biart::<f32>(&ck)?;
            let d_z = sl.cfg.codebook_size;
            write_grid(sl.encode_indices(&tensor)?, d_z, out)?;
        }
        Stage::AugvaeMl => {
            let ml = harness::load_augvae_ml::<f32>(&ck)?;
            let tape = lverse::tensor::Tape::new();
            let x = tape.constant(tensor);
            let latents = ml.encode(&tape, &x)?;
            let nhwc: Vec<_> = latents.iter().map(|l| l.permute(&[0, 2, 3, 1])).collect();
            let (_, indices, _) =
                lverse::augvae::quantize_levels(&nhwc, &ml.codebook, cfg.beta_commit as f32)?;
            for (level, idx) in indices.into_iter().enumerate() {
                let stem = out.file_stem().unwrap_or_default().to_string_lossy();
                let ext = out.extension().map(|e| e.to_string_lossy().into_owned());
                let name = match &ext {
                    Some(e) => format!("{stem}_l{level}.{e}"),
                    None => format!("{stem}_l{level}"),
                };
                let path = out.with_file_name(name);
                write_grid(idx, cfg.codebook_size, &path)?;
            }
        }
    }
    Ok(())
}

fn decode_cmd(ckpt: &Path, grids: &[PathBuf], out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let image = match ck.stage {
        Stage::AugvaeSl | Stage::Biart => {
            if grids.len() != 1 {
                bail!("single-level decode expects exactly one --grid");
            }
            let sl = match ck.stage {
                Stage::AugvaeSl => harness::load_augvae_sl::<f32>(&ck)?,
                _ => harness::load_biart::<f32>(&ck)?.1,
            };
            let grid = IndexGrid::load(&grids[0])?;
            sl.decode_indices(&grid.to_batch())?
        }
        Stage::AugvaeMl => {
            if grids.len() != 4 {
                bail!("multi-level decode expects four --grid files, fine to coarse");
            }
            let ml = harness::load_augvae_ml::<f32>(&ck)?;
            let tape = lverse::tensor::Tape::new();
            let mut qs = Vec::new();
            for path in grids {
                let grid = IndexGrid::load(path)?;
                let rows = lverse::quantizer::lookup(&grid.to_batch(), &ml.codebook)?;
                qs.push(tape.constant(rows).permute(&[0, 3, 1, 2]));
            }
            ml.decode(&tape, &qs)?.value()
        }
    };
    let single = image.index_axis(lverse::ndarray::Axis(0), 0).to_owned().into_dyn();
    harness::data::to_image(&single)?
        .save(out)
        .with_context(|| format!("saving {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample_image_cmd(
    ckpt: &Path,
    text: &str,
    n: usize,
    k: usize,
    seed: u64,
    out: &Path,
    temperature: f64,
    top_k: usize,
    scorer_name: &str,
) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (model, sl, vocab) = harness::load_biart::<f32>(&ck)?;
    let infer = model.inference();
    let opts = SamplerOpts {
        temperature,
        top_k,
        ..Default::default()
    };
    let seeds: Vec<u64> = (0..k as u64).map(|i| seed.wrapping_add(i)).collect();
    let scorer: Box<dyn Scorer<f32>> = match scorer_name {
        "constant" => Box::new(ConstantScorer),
        "neg-recon" => Box::new(NegReconScorer { sl: &sl }),
        other => bail!("unknown scorer {other} (constant | neg-recon)"),
    };
    let (images, logs) =
        sampler::sample_images(text, &infer, &sl, &vocab, scorer.as_ref(), n, k, &seeds, opts)?;

    std::fs::create_dir_all(out)?;
    let mut log_lines = String::new();
    for (img, log) in images.iter().zip(&logs) {
        let path = out.join(format!("sample_{:02}.png", log.repetition));
        harness::data::to_image(img)?.save(&path)?;
        println!("wrote {}", path.display());
        log_lines.push_str(
            &serde_json::to_string(&serde_json::json!({
                "repetition": log.repetition,
                "seed": log.seed,
                "selected": log.selected,
                "scores": log.scores,
            }))
            .unwrap(),
        );
        log_lines.push('\n');
    }
    std::fs::write(out.join("scores.jsonl"), log_lines)?;
    Ok(())
}

fn sample_caption_cmd(
    ckpt: &Path,
    image: &Path,
    n: usize,
    seed: u64,
    out: &Path,
    temperature: f64,
    top_k: usize,
) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = Config::parse_toml(&ck.config_toml)?;
    let (model, sl, vocab) = harness::load_biart::<f32>(&ck)?;
    let infer = model.inference();
    let tensor = load_image_tensor(image, cfg.image_side)?;
    let opts = SamplerOpts {
        temperature,
        top_k,
        ..Default::default()
    };
    let result =
        sampler::sample_caption(&tensor, &infer, &sl, &vocab, &ConstantScorer, n, seed, opts)?;

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("caption.txt"), &result.text)?;
    let table: Vec<_> = result
        .candidates
        .iter()
        .map(|c| {
            serde_json::json!({
                "index": c.index,
                "text": c.text,
                "score": c.score,
            })
        })
        .collect();
    std::fs::write(
        out.join("candidates.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "caption": result.text,
            "truncation_warning": result.warning,
            "candidates": table,
        }))?,
    )?;
    println!("caption: {}", result.text);
    if result.warning {
        println!("warning: every candidate truncated to nothing; returned longest raw candidate");
    }
    Ok(())
}

fn pack_dump_cmd(ckpt: &Path, text: &str, image: Option<&Path>, direction: &str) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = Config::parse_toml(&ck.config_toml)?;
    let (model, sl, vocab) = harness::load_biart::<f32>(&ck)?;
    let layout = model.cfg.layout;
    let direction = match direction {
        "t2i" => Direction::TextToImage,
        "i2t" => Direction::ImageToText,
        other => bail!("unknown direction {other} (t2i | i2t)"),
    };
    let mut rng = lverse::rng::stream_rng(0, "pack-dump", 0);
    let enc = lverse::tokenizer::encode(&vocab, text, 0.0, layout.text_len, &mut rng)?;
    let image_ids: Vec<u32> = match image {
        Some(path) => {
            let tensor = load_image_tensor(path, cfg.image_side)?.insert_axis(lverse::ndarray::Axis(0));
            sl.encode_indices(&tensor)?.iter().copied().collect()
        }
        None => vec![0; layout.image_len],
    };
    let pack = lverse::biart::pack_sequence(layout, &enc.real_ids(), &image_ids, direction)?;
    println!("pos\tid\tsegment\tref_target\tgen_target");
    for t in 0..pack.ids.len() {
        let (r, g) = if t == 0 {
            ("-".into(), "-".into())
        } else {
            (
                pack.ref_loss_mask[t - 1].to_string(),
                pack.gen_loss_mask[t - 1].to_string(),
            )
        };
        println!(
            "{t}\t{}\t{}\t{r}\t{g}",
            pack.ids[t],
            match pack.segments[t] {
                lverse::biart::Segment::Ref => "REF",
                lverse::biart::Segment::Gen => "GEN",
            }
        );
    }
    Ok(())
}

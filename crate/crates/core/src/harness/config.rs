//! Flat key-value run configuration. Every key can come from a TOML file and
//! be overridden by the matching CLI flag.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AugvaeMl,
    AugvaeSl,
    Biart,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::AugvaeMl => 1,
            Stage::AugvaeSl => 2,
            Stage::Biart => 3,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            1 => Some(Stage::AugvaeMl),
            2 => Some(Stage::AugvaeSl),
            3 => Some(Stage::Biart),
            _ => None,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "augvae_ml" => Ok(Stage::AugvaeMl),
            "augvae_sl" => Ok(Stage::AugvaeSl),
            "biart" => Ok(Stage::Biart),
            _ => Err(Error::contract(format!("unknown stage {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// Direction flips with the global step parity (even: text->image).
    Iteration,
    /// Direction flips per sample within every batch.
    Sample,
}

fn d_seed() -> u64 {
    42
}
fn d_image_side() -> usize {
    256
}
fn d_crop_ratio() -> f64 {
    0.75
}
fn d_filter() -> String {
    "lanczos3".into()
}
fn d_base_channels() -> usize {
    256
}
fn d_codebook_size() -> usize {
    8192
}
fn d_resblocks() -> usize {
    2
}
fn d_beta_commit() -> f64 {
    0.25
}
fn d_ema_decay() -> f64 {
    0.99
}
fn d_smoothing_eps() -> f64 {
    1e-5
}
fn d_perceptual_weight() -> f64 {
    0.1
}
fn d_layers() -> usize {
    32
}
fn d_model_dim() -> usize {
    1024
}
fn d_heads() -> usize {
    16
}
fn d_text_vocab() -> usize {
    49408
}
fn d_text_len() -> usize {
    64
}
fn d_dropout() -> f64 {
    0.1
}
fn d_bpe_dropout() -> f64 {
    0.1
}
fn d_loss_w() -> f64 {
    1.0
}
fn d_alternation() -> Alternation {
    Alternation::Iteration
}
fn d_batch_size() -> usize {
    8
}
fn d_max_steps() -> u64 {
    1000
}
fn d_adam_beta1() -> f64 {
    0.9
}
fn d_plateau_window() -> usize {
    5
}
fn d_plateau_min_improve() -> f64 {
    1e-4
}
fn d_plateau_every() -> u64 {
    50
}
fn d_log_every() -> u64 {
    50
}

/// One flat document; stage-dependent optimizer defaults are filled by the
/// accessor methods when the file leaves them unset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub stage: Stage,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: String,
    #[serde(default)]
    pub manifest: String,
    /// Checkpoint that seeds this run: the multi-level checkpoint for
    /// single-level finetuning, the frozen single-level checkpoint for
    /// transformer training.
    #[serde(default)]
    pub source_ckpt: String,
    /// Resume target; empty = fresh run.
    #[serde(default)]
    pub resume: String,

    // data
    #[serde(default = "d_image_side")]
    pub image_side: usize,
    #[serde(default = "d_crop_ratio")]
    pub crop_ratio: f64,
    #[serde(default = "d_filter")]
    pub resample_filter: String,

    // autoencoder shape
    #[serde(default = "d_base_channels")]
    pub base_channels: usize,
    #[serde(default = "d_codebook_size")]
    pub codebook_size: usize,
    #[serde(default = "d_resblocks")]
    pub resblocks: usize,
    #[serde(default = "d_beta_commit")]
    pub beta_commit: f64,
    #[serde(default = "d_ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "d_smoothing_eps")]
    pub smoothing_eps: f64,
    /// Consecutive unused updates before a dead code is re-seeded; 0 = off.
    #[serde(default)]
    pub dead_code_restart: u32,
    #[serde(default = "d_perceptual_weight")]
    pub perceptual_weight: f64,

    // transformer shape
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_model_dim")]
    pub model_dim: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_text_vocab")]
    pub text_vocab: usize,
    #[serde(default = "d_text_len")]
    pub text_len: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_bpe_dropout")]
    pub bpe_dropout: f64,
    #[serde(default = "d_loss_w")]
    pub loss_w_ref: f64,
    #[serde(default = "d_loss_w")]
    pub loss_w_gen: f64,
    #[serde(default = "d_alternation")]
    pub biart_alternation: Alternation,
    #[serde(default)]
    pub vocab_file: String,
    /// Tokenizer training target; 0 means "use text_vocab". Smaller targets
    /// give finer segmentation than the layout's reserved text block.
    #[serde(default)]
    pub bpe_target: usize,

    // optimizer; rate/decay defaults depend on the stage
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_max_steps")]
    pub max_steps: u64,
    #[serde(default)]
    pub base_lr: Option<f64>,
    #[serde(default = "d_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default)]
    pub adam_beta2: Option<f64>,
    #[serde(default)]
    pub adam_eps: Option<f64>,
    #[serde(default)]
    pub weight_decay: Option<f64>,

    // plateau schedule
    #[serde(default = "d_plateau_window")]
    pub plateau_window: usize,
    #[serde(default = "d_plateau_min_improve")]
    pub plateau_min_improve: f64,
    #[serde(default = "d_plateau_every")]
    pub plateau_every: u64,

    // bookkeeping
    #[serde(default)]
    pub save_every: u64,
    #[serde(default = "d_log_every")]
    pub log_every: u64,
    /// Early stop for memorization runs: stop once the reconstruction MSE
    /// falls below this (autoencoder stages); 0 = off.
    #[serde(default)]
    pub target_mse: f64,
    /// Early stop for transformer memorization: stop once both NLLs in both
    /// directions fall below this and teacher-forced argmax is perfect on
    /// the generation block; 0 = off.
    #[serde(default)]
    pub target_nll: f64,
    /// Mixed precision is not implemented; the flag is accepted, must stay
    /// false, and exists so configs can state it explicitly. Quantizer and
    /// codebook arithmetic always run in full precision.
    #[serde(default)]
    pub mixed_precision: bool,
}

impl Config {
    pub fn parse_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| Error::format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be >= 1"));
        }
        if self.effective_lr() <= 0.0 {
            return Err(Error::contract("effective learning rate must be > 0"));
        }
        if self.plateau_window == 0 {
            return Err(Error::contract("plateau_window must be >= 1"));
        }
        if self.mixed_precision {
            return Err(Error::contract(
                "mixed_precision is documented as out of scope and must stay false",
            ));
        }
        if !(0.0..=1.0).contains(&self.crop_ratio) || self.crop_ratio == 0.0 {
            return Err(Error::contract("crop_ratio must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or(match self.stage {
            Stage::AugvaeMl | Stage::AugvaeSl => 4.5e-6,
            Stage::Biart => 4.5e-7,
        })
    }

    /// Optimizer rate: base rate multiplied by the batch size.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr() * self.batch_size as f64
    }

    pub fn adam_beta2(&self) -> f64 {
        self.adam_beta2.unwrap_or(match self.stage {
            Stage::AugvaeMl | Stage::AugvaeSl => 0.999,
            Stage::Biart => 0.95,
        })
    }

    /// The autoencoder recipe states its epsilon as `10e-8`, i.e. 1e-7.
    pub fn adam_eps(&self) -> f64 {
        self.adam_eps.unwrap_or(match self.stage {
            Stage::AugvaeMl | Stage::AugvaeSl => 1e-7,
            Stage::Biart => 1e-8,
        })
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or(match self.stage {
            Stage::AugvaeMl | Stage::AugvaeSl => 1e-5,
            Stage::Biart => 1e-2,
        })
    }

    pub fn augvae_config(&self) -> crate::augvae::AugVaeConfig {
        crate::augvae::AugVaeConfig {
            base_channels: self.base_channels,
            codebook_size: self.codebook_size,
            resblocks: self.resblocks,
            beta_commit: self.beta_commit,
            ema_decay: self.ema_decay,
            smoothing_eps: self.smoothing_eps,
        }
    }

    /// Set one key from its string form; key names match the TOML fields.
    /// This is what the per-key CLI override flags funnel through.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::contract(format!("bad value {v:?} for {key}")))
        }
        match key {
            "stage" => self.stage = value.parse()?,
            "seed" => self.seed = p(key, value)?,
            "out_dir" => self.out_dir = value.into(),
            "manifest" => self.manifest = value.into(),
            "source_ckpt" => self.source_ckpt = value.into(),
            "resume" => self.resume = value.into(),
            "image_side" => self.image_side = p(key, value)?,
            "crop_ratio" => self.crop_ratio = p(key, value)?,
            "resample_filter" => self.resample_filter = value.into(),
            "base_channels" => self.base_channels = p(key, value)?,
            "codebook_size" => self.codebook_size = p(key, value)?,
            "resblocks" => self.resblocks = p(key, value)?,
            "beta_commit" => self.beta_commit = p(key, value)?,
            "ema_decay" => self.ema_decay = p(key, value)?,
            "smoothing_eps" => self.smoothing_eps = p(key, value)?,
            "dead_code_restart" => self.dead_code_restart = p(key, value)?,
            "perceptual_weight" => self.perceptual_weight = p(key, value)?,
            "layers" => self.layers = p(key, value)?,
            "model_dim" => self.model_dim = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "text_vocab" => self.text_vocab = p(key, value)?,
            "text_len" => self.text_len = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "bpe_dropout" => self.bpe_dropout = p(key, value)?,
            "loss_w_ref" => self.loss_w_ref = p(key, value)?,
            "loss_w_gen" => self.loss_w_gen = p(key, value)?,
            "biart_alternation" => {
                self.biart_alternation = match value {
                    "iteration" => Alternation::Iteration,
                    "sample" => Alternation::Sample,
                    _ => return Err(Error::contract("biart_alternation: iteration|sample")),
                }
            }
            "vocab_file" => self.vocab_file = value.into(),
            "bpe_target" => self.bpe_target = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "max_steps" => self.max_steps = p(key, value)?,
            "base_lr" => self.base_lr = Some(p(key, value)?),
            "adam_beta1" => self.adam_beta1 = p(key, value)?,
            "adam_beta2" => self.adam_beta2 = Some(p(key, value)?),
            "adam_eps" => self.adam_eps = Some(p(key, value)?),
            "weight_decay" => self.weight_decay = Some(p(key, value)?),
            "plateau_window" => self.plateau_window = p(key, value)?,
            "plateau_min_improve" => self.plateau_min_improve = p(key, value)?,
            "plateau_every" => self.plateau_every = p(key, value)?,
            "save_every" => self.save_every = p(key, value)?,
            "log_every" => self.log_every = p(key, value)?,
            "target_mse" => self.target_mse = p(key, value)?,
            "target_nll" => self.target_nll = p(key, value)?,
            "mixed_precision" => self.mixed_precision = p(key, value)?,
            _ => return Err(Error::contract(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Fresh config for a stage with nothing else set.
    pub fn for_stage(stage: Stage) -> Self {
        Config::parse_toml(&format!("stage = \"{}\"", match stage {
            Stage::AugvaeMl => "augvae_ml",
            Stage::AugvaeSl => "augvae_sl",
            Stage::Biart => "biart",
        }))
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_defaults_follow_training_recipes() {
        let ml = Config::for_stage(Stage::AugvaeMl);
        assert_eq!(ml.base_lr(), 4.5e-6);
        assert_eq!(ml.adam_beta2(), 0.999);
        assert_eq!(ml.adam_eps(), 1e-7);
        assert_eq!(ml.weight_decay(), 1e-5);

        let bi = Config::for_stage(Stage::Biart);
        assert_eq!(bi.base_lr(), 4.5e-7);
        assert_eq!(bi.adam_beta2(), 0.95);
        assert_eq!(bi.adam_eps(), 1e-8);
        assert_eq!(bi.weight_decay(), 1e-2);
        assert_eq!(bi.dropout, 0.1);
        assert_eq!(bi.bpe_dropout, 0.1);
    }

    #[test]
    fn effective_lr_is_base_times_batch() {
        let mut cfg = Config::for_stage(Stage::AugvaeMl);
        cfg.base_lr = Some(1e-4);
        cfg.batch_size = 16;
        assert_eq!(cfg.effective_lr(), 1e-4 * 16.0);
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let mut cfg = Config::parse_toml(
            "stage = \"biart\"\nseed = 7\nlayers = 2\nmodel_dim = 128\nheads = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.layers, 2);
        cfg.set_key("layers", "3").unwrap();
        cfg.set_key("base_lr", "0.001").unwrap();
        assert_eq!(cfg.layers, 3);
        assert_eq!(cfg.base_lr(), 0.001);
        let text = cfg.to_toml();
        let back = Config::parse_toml(&text).unwrap();
        assert_eq!(back.layers, 3);
        assert_eq!(back.seed, 7);
        assert!(matches!(
            cfg.set_key("no_such_key", "1"),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn unknown_file_keys_rejected() {
        assert!(Config::parse_toml("stage = \"biart\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn mixed_precision_must_stay_off() {
        assert!(Config::parse_toml("stage = \"biart\"\nmixed_precision = true\n").is_err());
    }
}

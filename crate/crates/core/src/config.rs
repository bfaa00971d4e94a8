//! Training configuration: a flat key-value struct, a plain-text file
//! format (`key = value` lines, `#` comments), dotted-key overrides,
//! and a canonical serialization that is echoed verbatim into
//! checkpoints and hashed for compatibility checks.

use crate::data::CropMode;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossVariant};
use crate::transformer::{ResidualMode, TransformerConfig, LAYERNORM_EPS};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scale: usize,
    /// LR crop size in pixels; 0 resolves to the reference setting for
    /// the scale (256 at 2x, 128 at 4x).
    pub crop_lr: usize,
    pub k: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub residual_mode: ResidualMode,
    pub dropout: f64,
    pub loss_variant: LossVariant,
    pub squared_l2: bool,
    pub w_adv: f64,
    pub w_rec: f64,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub plateau_patience: u32,
    pub plateau_factor: f64,
    pub improve_tol: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// 0 resolves to ceil(train_images / batch_size).
    pub steps_per_epoch: usize,
    pub val_fraction: f64,
    /// Extra numbered checkpoint every N epochs; 0 writes only
    /// last/best.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub disc_dim: usize,
    /// Train the 4x path end-to-end instead of composing the frozen 2x
    /// model twice.
    pub finetune_4x: bool,
    pub crop_mode: CropMode,
    /// Random flip/rotation of training crops; off by default.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scale: 2,
            crop_lr: 0,
            k: 8,
            depth: 5,
            heads: 3,
            mlp_ratio: 4.0,
            residual_mode: ResidualMode::Paper,
            dropout: 0.0,
            loss_variant: LossVariant::R,
            squared_l2: false,
            w_adv: 0.4,
            w_rec: 0.6,
            lr0: 2e-4,
            beta1: 0.0,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 0.0,
            plateau_patience: 30,
            plateau_factor: 0.2,
            improve_tol: 1e-6,
            batch_size: 4,
            max_epochs: 200,
            steps_per_epoch: 0,
            val_fraction: 0.1,
            checkpoint_every: 0,
            seed: 0,
            disc_dim: 192,
            finetune_4x: false,
            crop_mode: CropMode::FromHrCrop,
            augment: false,
        }
    }
}

fn crop_mode_str(m: CropMode) -> &'static str {
    match m {
        CropMode::FromHrCrop => "hr_crop",
        CropMode::FromFullLr => "full_lr",
    }
}

fn parse_crop_mode(s: &str) -> Result<CropMode> {
    match s {
        "hr_crop" => Ok(CropMode::FromHrCrop),
        "full_lr" => Ok(CropMode::FromFullLr),
        other => Err(Error::Config(format!(
            "unknown crop_mode '{}' (expected hr_crop|full_lr)",
            other
        ))),
    }
}

impl TrainConfig {
    /// Embedding dimension implied by the patch size.
    pub fn embed_dim(&self) -> usize {
        self.k * self.k * 3
    }

    /// Crop size with the 0 = auto default resolved.
    pub fn resolved_crop(&self) -> usize {
        if self.crop_lr != 0 {
            self.crop_lr
        } else if self.scale == 4 {
            128
        } else {
            256
        }
    }

    /// The scale the optimization loop actually trains at: 4x training
    /// defaults to the frozen-compose scheme, which optimizes the 2x
    /// mapping and composes it at evaluation time.
    pub fn training_scale(&self) -> usize {
        if self.scale == 4 && self.finetune_4x {
            4
        } else {
            2
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            depth: self.depth,
            d: self.embed_dim(),
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
            residual_mode: self.residual_mode,
            eps: LAYERNORM_EPS,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            variant: self.loss_variant,
            w_adv: self.w_adv,
            w_rec: self.w_rec,
            squared_l2: self.squared_l2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 4) {
            return Err(Error::Config(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        let crop = self.resolved_crop();
        if !crop.is_multiple_of(2 * self.k) {
            return Err(Error::Config(format!(
                "crop_lr {} must be divisible by 2k = {}",
                crop,
                2 * self.k
            )));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor must lie in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0, 0.5]",
                self.val_fraction
            )));
        }
        if self.disc_dim == 0 || !self.disc_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "disc_dim {} must be a positive multiple of heads {}",
                self.disc_dim, self.heads
            )));
        }
        self.transformer_config().validate()?;
        self.loss_config().validate()?;
        Ok(())
    }

    /// Apply one `key = value` assignment (also the CLI override form
    /// `key=value`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let uint = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("{key}: expected integer, got '{v}'")))
        };
        let real = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("{key}: expected number, got '{v}'")))
        };
        let boolean = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true|false, got '{v}'"))),
            }
        };
        match key {
            "scale" => self.scale = uint(value)?,
            "crop_lr" => self.crop_lr = uint(value)?,
            "k" => self.k = uint(value)?,
            "depth" => self.depth = uint(value)?,
            "heads" => self.heads = uint(value)?,
            "mlp_ratio" => self.mlp_ratio = real(value)?,
            "residual_mode" => self.residual_mode = ResidualMode::parse(value)?,
            "dropout" => self.dropout = real(value)?,
            "loss_variant" => self.loss_variant = LossVariant::parse(value)?,
            "squared_l2" => self.squared_l2 = boolean(value)?,
            "w_adv" => self.w_adv = real(value)?,
            "w_rec" => self.w_rec = real(value)?,
            "lr0" => self.lr0 = real(value)?,
            "beta1" => self.beta1 = real(value)?,
            "beta2" => self.beta2 = real(value)?,
            "adam_eps" => self.adam_eps = real(value)?,
            "clip_norm" => self.clip_norm = real(value)?,
            "plateau_patience" => self.plateau_patience = uint(value)? as u32,
            "plateau_factor" => self.plateau_factor = real(value)?,
            "improve_tol" => self.improve_tol = real(value)?,
            "batch_size" => self.batch_size = uint(value)?,
            "max_epochs" => self.max_epochs = uint(value)?,
            "steps_per_epoch" => self.steps_per_epoch = uint(value)?,
            "val_fraction" => self.val_fraction = real(value)?,
            "checkpoint_every" => self.checkpoint_every = uint(value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: expected u64, got '{value}'")))?
            }
            "disc_dim" => self.disc_dim = uint(value)?,
            "finetune_4x" => self.finetune_4x = boolean(value)?,
            "crop_mode" => self.crop_mode = parse_crop_mode(value)?,
            "augment" => self.augment = boolean(value)?,
            other => return Err(Error::Config(format!("unknown config key '{}'", other))),
        }
        Ok(())
    }

    /// Parse a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {}: expected 'key = value', got '{}'",
                    lineno + 1,
                    raw
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Canonical text form: every key, fixed order. This is the string
    /// hashed into and echoed by checkpoints.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("scale", self.scale.to_string());
        kv("crop_lr", self.resolved_crop().to_string());
        kv("k", self.k.to_string());
        kv("depth", self.depth.to_string());
        kv("heads", self.heads.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("residual_mode", self.residual_mode.as_str().to_string());
        kv("dropout", self.dropout.to_string());
        kv("loss_variant", self.loss_variant.as_str().to_string());
        kv("squared_l2", self.squared_l2.to_string());
        kv("w_adv", self.w_adv.to_string());
        kv("w_rec", self.w_rec.to_string());
        kv("lr0", self.lr0.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("plateau_patience", self.plateau_patience.to_string());
        kv("plateau_factor", self.plateau_factor.to_string());
        kv("improve_tol", self.improve_tol.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("steps_per_epoch", self.steps_per_epoch.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("seed", self.seed.to_string());
        kv("disc_dim", self.disc_dim.to_string());
        kv("finetune_4x", self.finetune_4x.to_string());
        kv("crop_mode", crop_mode_str(self.crop_mode).to_string());
        kv("augment", self.augment.to_string());
        s
    }

    /// FNV-1a over the canonical text.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical_text().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Keys on which two configs differ (by canonical line).
    pub fn diff_keys(&self, other: &TrainConfig) -> Vec<String> {
        self.canonical_text()
            .lines()
            .zip(other.canonical_text().lines())
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.split(" = ").next().unwrap_or(a).to_string())
            .collect()
    }
}

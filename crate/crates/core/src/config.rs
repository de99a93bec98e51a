//! Run configuration: a flat `key: value` text schema.
//!
//! The canonical schema is the file `config/default` at the repository root;
//! every key it lists is optional in user files and falls back to the default
//! shown there. Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// How to pick adapter/query weights for a domain outside the trained set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterStrategy {
    /// Use the weights of an explicitly named trained domain.
    Specified,
    /// Element-wise mean of all trained domains' weights.
    Mean,
    /// Weights of the last trained domain.
    Last,
}

impl AdapterStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "specified" => Some(Self::Specified),
            "mean" => Some(Self::Mean),
            "last" => Some(Self::Last),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Specified => "specified",
            Self::Mean => "mean",
            Self::Last => "last",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    /// Encoder transformer depth L.
    pub depth: usize,
    /// Token channel width d.
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Bypass adapter rank r.
    pub adapter_rank: usize,
    /// Self-prompt confidence gate threshold.
    pub tau: f64,
    /// Channel width of the fused multi-scale embedding (0 in files = dim/2).
    pub fuse_dim: usize,
    pub decoder_heads: usize,
    /// Focal/dice mixing coefficient.
    pub lambda: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub reset_optimizer_per_domain: bool,
    pub zero_shot_strategy: AdapterStrategy,
    /// Ablation switch: share one adapter/query slot across all domains.
    pub shared_domain_params: bool,
    /// Instance extraction connectivity, 4 or 8.
    pub connectivity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            image_size: 128,
            patch_size: 8,
            in_channels: 3,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            adapter_rank: 8,
            tau: 0.95,
            fuse_dim: 32,
            decoder_heads: 1,
            lambda: 0.8,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1.0,
            lr: 1e-4,
            lr_decay: 0.98,
            batch_size: 4,
            epochs: 30,
            reset_optimizer_per_domain: true,
            zero_shot_strategy: AdapterStrategy::Specified,
            shared_domain_params: false,
            connectivity: 8,
        }
    }
}

impl RunConfig {
    /// Token grid side lengths (ht, wt).
    pub fn token_grid(&self) -> (usize, usize) {
        (
            self.image_size / self.patch_size,
            self.image_size / self.patch_size,
        )
    }

    pub fn token_count(&self) -> usize {
        let (ht, wt) = self.token_grid();
        ht * wt
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, msg: String| Err(Error::Validation(format!("{key}: {msg}")));
        if !(0.0..=1.0).contains(&self.tau) {
            return err("spgen.tau", format!("{} outside [0, 1]", self.tau));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return err("loss.lambda", format!("{} outside [0, 1]", self.lambda));
        }
        if self.depth < 1 {
            return err("encoder.depth", "must be >= 1".into());
        }
        if self.adapter_rank < 1 {
            return err("adapter.rank", "must be >= 1".into());
        }
        if self.adapter_rank >= self.dim {
            return err(
                "adapter.rank",
                format!("rank {} must be < dim {}", self.adapter_rank, self.dim),
            );
        }
        if self.dim < 4 || self.dim % 4 != 0 {
            return err("encoder.dim", "must be a positive multiple of 4".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return err("encoder.heads", format!("{} must divide dim", self.heads));
        }
        if self.decoder_heads == 0 || self.dim % self.decoder_heads != 0 {
            return err(
                "decoder.heads",
                format!("{} must divide dim", self.decoder_heads),
            );
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return err(
                "image_size",
                format!(
                    "{} must be a positive multiple of patch_size {}",
                    self.image_size, self.patch_size
                ),
            );
        }
        let (ht, wt) = self.token_grid();
        if ht < 2 || wt < 2 || ht % 2 != 0 {
            return err(
                "image_size",
                "token grid must be even-sided and at least 2x2".into(),
            );
        }
        if self.in_channels == 0 {
            return err("in_channels", "must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            return err("encoder.mlp_ratio", "must be >= 1".into());
        }
        if self.fuse_dim == 0 {
            return err("spgen.fuse_dim", "must be >= 1".into());
        }
        if self.focal_gamma < 0.0 {
            return err("loss.focal_gamma", "must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return err("loss.focal_alpha", "must be in [0, 1]".into());
        }
        if self.dice_eps <= 0.0 {
            return err("loss.dice_eps", "must be > 0".into());
        }
        if self.lr <= 0.0 {
            return err("optim.lr", "must be > 0".into());
        }
        if self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return err("optim.decay", "must be in (0, 1]".into());
        }
        if self.batch_size == 0 {
            return err("optim.batch_size", "must be >= 1".into());
        }
        if self.epochs == 0 {
            return err("optim.epochs", "must be >= 1".into());
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return err("metrics.connectivity", "must be 4 or 8".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it back reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "image_size: {}", self.image_size);
        let _ = writeln!(s, "patch_size: {}", self.patch_size);
        let _ = writeln!(s, "in_channels: {}", self.in_channels);
        let _ = writeln!(s, "encoder.depth: {}", self.depth);
        let _ = writeln!(s, "encoder.dim: {}", self.dim);
        let _ = writeln!(s, "encoder.heads: {}", self.heads);
        let _ = writeln!(s, "encoder.mlp_ratio: {}", self.mlp_ratio);
        let _ = writeln!(s, "adapter.rank: {}", self.adapter_rank);
        let _ = writeln!(s, "spgen.tau: {}", self.tau);
        let _ = writeln!(s, "spgen.fuse_dim: {}", self.fuse_dim);
        let _ = writeln!(s, "decoder.heads: {}", self.decoder_heads);
        let _ = writeln!(s, "loss.lambda: {}", self.lambda);
        let _ = writeln!(s, "loss.focal_gamma: {}", self.focal_gamma);
        let _ = writeln!(s, "loss.focal_alpha: {}", self.focal_alpha);
        let _ = writeln!(s, "loss.dice_eps: {}", self.dice_eps);
        let _ = writeln!(s, "optim.lr: {}", self.lr);
        let _ = writeln!(s, "optim.decay: {}", self.lr_decay);
        let _ = writeln!(s, "optim.batch_size: {}", self.batch_size);
        let _ = writeln!(s, "optim.epochs: {}", self.epochs);
        let _ = writeln!(
            s,
            "optim.reset_per_domain: {}",
            self.reset_optimizer_per_domain
        );
        let _ = writeln!(s, "zero_shot.strategy: {}", self.zero_shot_strategy.as_str());
        let _ = writeln!(s, "shared_domain_params: {}", self.shared_domain_params);
        let _ = writeln!(s, "metrics.connectivity: {}", self.connectivity);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut fuse_dim_set = false;
        let mut dim_set = false;
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once(':') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key: value`, got `{raw}`",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("{key}: set more than once")));
            }
            seen.push(key.to_string());
            let bad = |key: &str, value: &str| {
                Error::Config(format!("{key}: cannot parse value `{value}`"))
            };
            match key {
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key, value))?,
                "image_size" => cfg.image_size = value.parse().map_err(|_| bad(key, value))?,
                "patch_size" => cfg.patch_size = value.parse().map_err(|_| bad(key, value))?,
                "in_channels" => cfg.in_channels = value.parse().map_err(|_| bad(key, value))?,
                "encoder.depth" => cfg.depth = value.parse().map_err(|_| bad(key, value))?,
                "encoder.dim" => {
                    cfg.dim = value.parse().map_err(|_| bad(key, value))?;
                    dim_set = true;
                }
                "encoder.heads" => cfg.heads = value.parse().map_err(|_| bad(key, value))?,
                "encoder.mlp_ratio" => {
                    cfg.mlp_ratio = value.parse().map_err(|_| bad(key, value))?
                }
                "adapter.rank" => cfg.adapter_rank = value.parse().map_err(|_| bad(key, value))?,
                "spgen.tau" => cfg.tau = value.parse().map_err(|_| bad(key, value))?,
                "spgen.fuse_dim" => {
                    cfg.fuse_dim = value.parse().map_err(|_| bad(key, value))?;
                    fuse_dim_set = true;
                }
                "decoder.heads" => {
                    cfg.decoder_heads = value.parse().map_err(|_| bad(key, value))?
                }
                "loss.lambda" => cfg.lambda = value.parse().map_err(|_| bad(key, value))?,
                "loss.focal_gamma" => {
                    cfg.focal_gamma = value.parse().map_err(|_| bad(key, value))?
                }
                "loss.focal_alpha" => {
                    cfg.focal_alpha = value.parse().map_err(|_| bad(key, value))?
                }
                "loss.dice_eps" => cfg.dice_eps = value.parse().map_err(|_| bad(key, value))?,
                "optim.lr" => cfg.lr = value.parse().map_err(|_| bad(key, value))?,
                "optim.decay" => cfg.lr_decay = value.parse().map_err(|_| bad(key, value))?,
                "optim.batch_size" => {
                    cfg.batch_size = value.parse().map_err(|_| bad(key, value))?
                }
                "optim.epochs" => cfg.epochs = value.parse().map_err(|_| bad(key, value))?,
                "optim.reset_per_domain" => {
                    cfg.reset_optimizer_per_domain = parse_bool(key, value)?
                }
                "zero_shot.strategy" => {
                    cfg.zero_shot_strategy = AdapterStrategy::parse(value)
                        .ok_or_else(|| bad(key, value))?
                }
                "shared_domain_params" => cfg.shared_domain_params = parse_bool(key, value)?,
                "metrics.connectivity" => {
                    cfg.connectivity = value.parse().map_err(|_| bad(key, value))?
                }
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
        }
        // fuse width tracks the model width unless pinned explicitly
        if dim_set && !fuse_dim_set {
            cfg.fuse_dim = (cfg.dim / 2).max(1);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true/false, got `{value}`"
        ))),
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    RunConfig::from_text(&text)
}

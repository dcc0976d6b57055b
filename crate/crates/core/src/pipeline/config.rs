//! Run configuration as a flat `key = value` file.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::adapters::{CompressionMode, CompressionScheme, RankPolicy};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, WindowKind};
use crate::nets::{NetConfig, Pooling, ViTConfig};

use super::scene::SceneKind;

/// What `lr_decay_every` counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayUnit {
    Steps,
    Epochs,
}

impl FromStr for DecayUnit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steps" => Ok(DecayUnit::Steps),
            "epochs" => Ok(DecayUnit::Epochs),
            _ => Err(Error::Config(format!("unknown decay unit {s:?} (expected steps or epochs)"))),
        }
    }
}

impl std::fmt::Display for DecayUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecayUnit::Steps => "steps",
            DecayUnit::Epochs => "epochs",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Model initialisation and batch order.
    pub seed: u64,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lr_decay_unit: DecayUnit,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    /// Build the next batch on a helper thread while the current one trains.
    pub prefetch: bool,
    /// Directory written by `gen-scene`; empty means generate in memory.
    pub scene_dir: String,
    pub scene_kind: SceneKind,
    pub scene_seed: u64,
    pub frames: usize,
    pub net: NetConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            seed: 0,
            learning_rate: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            lr_decay_unit: DecayUnit::Epochs,
            batch_size: 4,
            epochs: 10,
            max_steps: 0,
            prefetch: true,
            scene_dir: String::new(),
            scene_kind: SceneKind::TexturedPlane,
            scene_seed: 0,
            frames: 60,
            loss: LossConfig {
                scales: LossConfig::default_scales(net.vit.width, net.vit.height),
                ..LossConfig::default()
            },
            net,
        }
    }
}

/// Every recognised key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for model initialisation and batch order"),
    ("learning_rate", "initial Adam step size"),
    ("lr_decay_factor", "multiplier applied at every decay boundary"),
    ("lr_decay_every", "decay period"),
    ("lr_decay_unit", "unit of the decay period: steps or epochs"),
    ("batch_size", "frame pairs per optimizer step"),
    ("epochs", "passes over all consecutive frame pairs"),
    ("max_steps", "hard cap on optimizer steps, 0 for none"),
    ("prefetch", "prepare the next batch on a helper thread"),
    ("scene_dir", "scene written by gen-scene; empty generates one"),
    ("scene_kind", "textured-plane, sphere-room or two-plane"),
    ("scene_seed", "seed of the generated scene"),
    ("frames", "frames in the generated scene"),
    ("width", "image width"),
    ("height", "image height"),
    ("patch_size", "transformer patch size, a power of two"),
    ("embed_dim", "token width"),
    ("num_heads", "attention heads"),
    ("mlp_ratio", "feed-forward expansion"),
    ("depth_blocks", "depth encoder blocks"),
    ("pose_encoder_blocks", "pose encoder blocks"),
    ("pose_decoder_blocks", "pose decoder blocks"),
    ("pose_hidden", "pose head hidden width"),
    ("pooling", "pose token pooling: mean or first"),
    ("head_scale", "factor applied to raw pose outputs"),
    ("min_depth", "smallest predicted depth"),
    ("max_depth", "largest predicted depth"),
    ("base_rank", "adapter rank of the first block"),
    ("rank_policy", "linear or constant"),
    ("compression", "truncation-sum or rotation"),
    ("adapt_cross_attention", "also adapt decoder cross-attention"),
    ("alpha", "weight of the structural dissimilarity term"),
    ("beta", "weight of the L1 term"),
    ("ms_ssim_scales", "pyramid levels, 1 to 5"),
    ("smoothness_weight", "weight of the depth smoothness term"),
    ("ssim_window", "gaussian or box"),
    ("ssim_window_size", "odd window width"),
    ("ssim_window_sigma", "gaussian window width"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key} (expected true or false)"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let vit: &mut ViTConfig = &mut self.net.vit;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "lr_decay_every" => self.lr_decay_every = parse(key, v)?,
            "lr_decay_unit" => self.lr_decay_unit = v.parse()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "prefetch" => self.prefetch = parse_bool(key, v)?,
            "scene_dir" => self.scene_dir = v.to_string(),
            "scene_kind" => self.scene_kind = v.parse()?,
            "scene_seed" => self.scene_seed = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "width" => vit.width = parse(key, v)?,
            "height" => vit.height = parse(key, v)?,
            "patch_size" => vit.patch_size = parse(key, v)?,
            "embed_dim" => vit.embed_dim = parse(key, v)?,
            "num_heads" => vit.num_heads = parse(key, v)?,
            "mlp_ratio" => vit.mlp_ratio = parse(key, v)?,
            "depth_blocks" => self.net.depth_blocks = parse(key, v)?,
            "pose_encoder_blocks" => self.net.pose_encoder_blocks = parse(key, v)?,
            "pose_decoder_blocks" => self.net.pose_decoder_blocks = parse(key, v)?,
            "pose_hidden" => self.net.pose_hidden = parse(key, v)?,
            "pooling" => self.net.pooling = v.parse::<Pooling>()?,
            "head_scale" => self.net.head_scale = parse(key, v)?,
            "min_depth" => self.net.min_depth = parse(key, v)?,
            "max_depth" => self.net.max_depth = parse(key, v)?,
            "base_rank" => self.net.base_rank = parse(key, v)?,
            "rank_policy" => self.net.rank_policy = v.parse::<RankPolicy>()?,
            "compression" => {
                self.net.scheme = CompressionScheme {
                    mode: v.parse::<CompressionMode>()?,
                    ..self.net.scheme
                }
            }
            "adapt_cross_attention" => self.net.adapt_cross_attention = parse_bool(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "beta" => self.loss.beta = parse(key, v)?,
            "ms_ssim_scales" => self.loss.scales = parse(key, v)?,
            "smoothness_weight" => self.loss.smoothness_weight = parse(key, v)?,
            "ssim_window" => self.loss.window = v.parse::<WindowKind>()?,
            "ssim_window_size" => self.loss.window_size = parse(key, v)?,
            "ssim_window_sigma" => self.loss.window_sigma = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of `key` in the form [`TrainConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let n = &self.net;
        let l = &self.loss;
        Some(match key {
            "seed" => self.seed.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "lr_decay_every" => self.lr_decay_every.to_string(),
            "lr_decay_unit" => self.lr_decay_unit.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "prefetch" => self.prefetch.to_string(),
            "scene_dir" => self.scene_dir.clone(),
            "scene_kind" => self.scene_kind.to_string(),
            "scene_seed" => self.scene_seed.to_string(),
            "frames" => self.frames.to_string(),
            "width" => n.vit.width.to_string(),
            "height" => n.vit.height.to_string(),
            "patch_size" => n.vit.patch_size.to_string(),
            "embed_dim" => n.vit.embed_dim.to_string(),
            "num_heads" => n.vit.num_heads.to_string(),
            "mlp_ratio" => n.vit.mlp_ratio.to_string(),
            "depth_blocks" => n.depth_blocks.to_string(),
            "pose_encoder_blocks" => n.pose_encoder_blocks.to_string(),
            "pose_decoder_blocks" => n.pose_decoder_blocks.to_string(),
            "pose_hidden" => n.pose_hidden.to_string(),
            "pooling" => n.pooling.to_string(),
            "head_scale" => n.head_scale.to_string(),
            "min_depth" => n.min_depth.to_string(),
            "max_depth" => n.max_depth.to_string(),
            "base_rank" => n.base_rank.to_string(),
            "rank_policy" => n.rank_policy.to_string(),
            "compression" => n.scheme.mode.to_string(),
            "adapt_cross_attention" => n.adapt_cross_attention.to_string(),
            "alpha" => l.alpha.to_string(),
            "beta" => l.beta.to_string(),
            "ms_ssim_scales" => l.scales.to_string(),
            "smoothness_weight" => l.smoothness_weight.to_string(),
            "ssim_window" => l.window.to_string(),
            "ssim_window_size" => l.window_size.to_string(),
            "ssim_window_sigma" => l.window_sigma.to_string(),
            _ => return None,
        })
    }

    /// Applies a `key = value` file over the current values. Blank lines
    /// and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_config(e))))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every key in [`KEYS`] order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("every listed key is readable"));
        }
        s
    }

    /// SHA-256 of [`TrainConfig::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("lr_decay_every", self.lr_decay_every),
            ("frames", self.frames),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.scene_dir.is_empty() && self.frames < 2 {
            return Err(Error::Config("a scene needs at least two frames".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::Config(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor)));
        }
        Ok(())
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// `learning_rate · factor^⌊period / every⌋`, where `period` is the epoch
/// or the step according to the configured unit.
pub fn lr_schedule(period: usize, cfg: &TrainConfig) -> f64 {
    let k = (period / cfg.lr_decay_every) as i32;
    cfg.learning_rate * cfg.lr_decay_factor.powi(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_hash() {
        let mut c = TrainConfig::default();
        c.set("learning_rate", "0.001").unwrap();
        c.set("compression", "rotation").unwrap();
        c.set("pooling", "first").unwrap();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(TrainConfig::default().hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn every_key_reads_and_writes() {
        let c = TrainConfig::default();
        for (k, _) in KEYS {
            let v = c.get(k).unwrap();
            let mut d = c.clone();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
        assert!(c.get("nope").is_none());
    }

    #[test]
    fn comments_blanks_and_errors() {
        let c = TrainConfig::from_text("# run\n\nbatch_size = 2 # small\nseed=9\n").unwrap();
        assert_eq!((c.batch_size, c.seed), (2, 9));
        for bad in ["batch_size 2", "colour = red", "batch_size = two", "batch_size = 0", "ms_ssim_scales = 9"] {
            assert!(matches!(TrainConfig::from_text(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_schedule(0, &c), 1e-4);
        assert_eq!(lr_schedule(9, &c), 1e-4);
        assert!((lr_schedule(10, &c) - 1e-5).abs() < 1e-20);
        assert!((lr_schedule(25, &c) - 1e-6).abs() < 1e-20);
    }
}

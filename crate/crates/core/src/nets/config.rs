use crate::adapters::{rank_vector, CompressionScheme, RankPolicy, RankVector};
use crate::error::{Error, Result};
use crate::geometry::HEAD_OUTPUT_SCALE;

/// Token reduction in front of the pose head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    /// The first token only.
    First,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "first" => Ok(Pooling::First),
            _ => Err(Error::Config(format!("unknown pooling {s:?} (expected mean or first)"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::First => "first",
        })
    }
}

/// Shapes shared by every transformer in the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 4,
            width: 64,
            height: 64,
            channels: 3,
        }
    }
}

impl ViTConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.width / self.patch_size, self.height / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        let (gw, gh) = self.grid();
        gw * gh
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let ViTConfig {
            patch_size: p,
            embed_dim: d,
            num_heads: h,
            ..
        } = *self;
        if p == 0 || d == 0 || h == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if d % h != 0 {
            return Err(Error::Config(format!("embed_dim {d} is not divisible by num_heads {h}")));
        }
        if !self.width.is_multiple_of(p) || !self.height.is_multiple_of(p) || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "image {}×{} is not divisible into {p}-pixel patches",
                self.width, self.height
            )));
        }
        if !p.is_power_of_two() {
            return Err(Error::Config(format!("patch size {p} must be a power of two")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub vit: ViTConfig,
    pub depth_blocks: usize,
    pub pose_encoder_blocks: usize,
    pub pose_decoder_blocks: usize,
    pub pose_hidden: usize,
    pub pooling: Pooling,
    pub head_scale: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub base_rank: usize,
    pub rank_policy: RankPolicy,
    pub scheme: CompressionScheme,
    /// Also adapt the query/value maps of decoder cross-attention.
    pub adapt_cross_attention: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            vit: ViTConfig::default(),
            depth_blocks: 4,
            pose_encoder_blocks: 4,
            pose_decoder_blocks: 2,
            pose_hidden: 64,
            pooling: Pooling::Mean,
            head_scale: HEAD_OUTPUT_SCALE,
            min_depth: 0.1,
            max_depth: 100.0,
            base_rank: 8,
            rank_policy: RankPolicy::Linear,
            scheme: CompressionScheme::truncation_sum(),
            adapt_cross_attention: true,
        }
    }
}

impl NetConfig {
    /// Transformer blocks that carry adapters: depth encoder, pose encoder,
    /// pose decoder, in that order.
    pub fn adapted_blocks(&self) -> usize {
        self.depth_blocks + self.pose_encoder_blocks + self.pose_decoder_blocks
    }

    pub fn rank_vector(&self) -> Result<RankVector> {
        rank_vector(self.adapted_blocks(), self.base_rank, self.rank_policy)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.depth_blocks == 0 || self.pose_encoder_blocks == 0 || self.pose_decoder_blocks == 0 {
            return Err(Error::Config("every network needs at least one block".into()));
        }
        if self.pose_hidden == 0 {
            return Err(Error::Config("pose head hidden width must be positive".into()));
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return Err(Error::Config(format!(
                "depth range needs 0 < min_depth < max_depth, got {} and {}",
                self.min_depth, self.max_depth
            )));
        }
        if !(self.head_scale > 0.0 && self.head_scale.is_finite()) {
            return Err(Error::Config("head output scale must be positive".into()));
        }
        if self.base_rank == 0 || self.base_rank > self.vit.embed_dim {
            return Err(Error::Config(format!(
                "base rank {} must lie in 1..={}",
                self.base_rank, self.vit.embed_dim
            )));
        }
        Ok(())
    }
}

//! Relative pose network: shared-weight twin encoders, a cross-attention
//! decoder over the first stream and an axis-angle regression head.

use nalgebra::Vector3;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::geometry::{rodrigues, scale_head_outputs_by, PoseSE3};
use crate::params::{ParamRole, ParamStore};
use crate::warp::Image;

use super::config::{NetConfig, Pooling};
use super::vit::{DecoderBlock, Encoder, Hooks, LayerNorm, Linear};

/// Graph handles of one pose prediction.
#[derive(Clone, Copy, Debug)]
pub struct PoseOutput {
    /// The six head outputs before scaling: axis-angle then translation.
    pub raw: Var,
    /// Row-major 3×3 rotation.
    pub rot: Var,
    pub trans: Var,
}

/// Pooled features → Linear → ReLU → Linear → 6 raw values.
#[derive(Clone, Debug)]
pub struct PoseHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub scale: f64,
}

impl PoseHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, hidden: usize, scale: f64, rng: &mut R) -> Self {
        let fc1 = Linear::new(store, "pose.head.fc1", hidden, dim, true, true, ParamRole::PoseHead, 2f64.sqrt(), rng);
        let fc2 = Linear::new(store, "pose.head.fc2", 6, hidden, true, true, ParamRole::PoseHead, 1.0, rng);
        Self { fc1, fc2, scale }
    }

    /// Maps pooled 1×d features to a pose: scale the raw outputs first,
    /// then convert the axis-angle part.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> PoseOutput {
        let h = self.fc1.forward(g, store, pooled);
        let h = g.relu(h);
        let raw = self.fc2.forward(g, store, h);
        let raw = g.reshape(raw, &[6]);
        let scaled = g.scale(raw, self.scale);
        let phi = g.slice(scaled, 0, 3);
        let trans = g.slice(scaled, 3, 3);
        let rot = g.rodrigues(phi);
        PoseOutput { raw, rot, trans }
    }
}

/// Pose from six raw head outputs, scaled by `scale` before Rodrigues.
pub fn pose_from_raw(raw: &[f64], scale: f64) -> PoseSE3 {
    let (phi, t) = scale_head_outputs_by(
        &Vector3::new(raw[0], raw[1], raw[2]),
        &Vector3::new(raw[3], raw[4], raw[5]),
        scale,
    );
    PoseSE3::new(rodrigues(&phi), t)
}

#[derive(Clone, Debug)]
pub struct PoseNet {
    pub encoder: Encoder,
    pub decoder: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub head: PoseHead,
    pub pooling: Pooling,
}

impl PoseNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &NetConfig, backbone: &mut R, heads: &mut R) -> Self {
        let encoder = Encoder::new(store, "pose.encoder", &cfg.vit, cfg.pose_encoder_blocks, backbone);
        let decoder = (0..cfg.pose_decoder_blocks)
            .map(|i| DecoderBlock::new(store, &format!("pose.decoder.block{i}"), &cfg.vit, backbone))
            .collect();
        let norm = LayerNorm::new(store, "pose.decoder.norm", cfg.vit.embed_dim);
        let head = PoseHead::new(store, cfg.vit.embed_dim, cfg.pose_hidden, cfg.head_scale, heads);
        Self {
            encoder,
            decoder,
            norm,
            head,
            pooling: cfg.pooling,
        }
    }

    /// Decoder output for the first stream, normalised, T×d.
    pub fn decode_pair(&self, g: &mut Graph, store: &ParamStore, f1: Var, f2: Var, hooks: Hooks) -> Result<Var> {
        if g.value(f1).shape() != g.value(f2).shape() {
            return Err(crate::error::Error::invalid("decoder streams differ in shape"));
        }
        let mut x = f1;
        for b in &self.decoder {
            x = b.forward(g, store, x, f2, hooks)?;
        }
        Ok(self.norm.forward(g, store, x))
    }

    pub fn pool(&self, g: &mut Graph, tokens: Var) -> Var {
        match self.pooling {
            Pooling::Mean => g.mean_rows(tokens),
            Pooling::First => {
                let d = g.value(tokens).cols();
                let first = g.slice(tokens, 0, d);
                g.reshape(first, &[1, d])
            }
        }
    }

    /// Motion from `i1` to `i2`, computed in that one direction only.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, i1: &Image, i2: &Image, hooks: Hooks) -> Result<PoseOutput> {
        let f1 = self.encoder.forward(g, store, i1, hooks)?;
        let f2 = self.encoder.forward(g, store, i2, hooks)?;
        let g1 = self.decode_pair(g, store, f1, f2, hooks)?;
        let pooled = self.pool(g, g1);
        Ok(self.head.forward(g, store, pooled))
    }
}

//! Monocular depth network: transformer encoder, convolutional neck that
//! upsamples the token grid back to full resolution, and a bounded head.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;
use crate::warp::Image;

use super::config::NetConfig;
use super::vit::{Encoder, Hooks};

/// Same-size 3×3 convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, std: f64, rng: &mut R) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[cout, cin, 3, 3], std, rng),
            true,
            ParamRole::DepthHead,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true, ParamRole::DepthHead);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b)
    }
}

/// `1/(σ·(1/d_min − 1/d_max) + 1/d_max)`: σ = 0 gives `d_max`, σ = 1 gives `d_min`.
pub fn sigmoid_to_depth(s: f64, min_depth: f64, max_depth: f64) -> f64 {
    1.0 / (s * (1.0 / min_depth - 1.0 / max_depth) + 1.0 / max_depth)
}

#[derive(Clone, Debug)]
pub struct DepthNet {
    pub encoder: Encoder,
    /// One conv + ReLU + 2× upsample per halving of the patch size.
    pub neck: Vec<Conv>,
    pub head: Conv,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl DepthNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &NetConfig, backbone: &mut R, heads: &mut R) -> Self {
        let encoder = Encoder::new(store, "depth.encoder", &cfg.vit, cfg.depth_blocks, backbone);
        let stages = cfg.vit.patch_size.trailing_zeros() as usize;
        let mut neck = Vec::with_capacity(stages);
        let mut c = cfg.vit.embed_dim;
        for i in 0..stages {
            let cout = (c / 2).max(4);
            let std = (2.0 / (9 * c) as f64).sqrt();
            neck.push(Conv::new(store, &format!("depth.neck{i}"), c, cout, std, heads));
            c = cout;
        }
        let head = Conv::new(store, "depth.head", c, 1, 0.01, heads);
        Self {
            encoder,
            neck,
            head,
            min_depth: cfg.min_depth,
            max_depth: cfg.max_depth,
        }
    }

    /// Pre-sigmoid logits, 1×H×W.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, img: &Image, hooks: Hooks) -> Result<Var> {
        let tokens = self.encoder.forward(g, store, img, hooks)?;
        let (gw, gh) = self.encoder.cfg.grid();
        let d = self.encoder.cfg.embed_dim;
        let x = g.transpose(tokens);
        let mut x = g.reshape(x, &[d, gh, gw]);
        for conv in &self.neck {
            x = conv.forward(g, store, x);
            x = g.relu(x);
            x = g.upsample2(x);
        }
        Ok(self.head.forward(g, store, x))
    }

    /// Depth in `[min_depth, max_depth]`, 1×H×W.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, img: &Image, hooks: Hooks) -> Result<Var> {
        let z = self.logits(g, store, img, hooks)?;
        let s = g.sigmoid(z);
        let inv = g.scale(s, 1.0 / self.min_depth - 1.0 / self.max_depth);
        let inv = g.add_scalar(inv, 1.0 / self.max_depth);
        Ok(g.recip(inv))
    }
}

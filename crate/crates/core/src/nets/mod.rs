//! Depth and pose networks over frozen transformer backbones, DoMoRA
//! injection into attention query/value maps, and the parameter partition.

mod config;
mod depth;
pub mod gradcheck;
mod pose;
mod vit;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{NetConfig, Pooling, ViTConfig};
pub use depth::{sigmoid_to_depth, Conv, DepthNet};
pub use pose::{pose_from_raw, PoseHead, PoseNet, PoseOutput};
pub use vit::{
    patchify, positional_encoding, Attention, DecoderBlock, Encoder, EncoderBlock, Hooks, LayerNorm, Linear, Mlp,
    Projection, LAYER_NORM_EPS,
};

use crate::adapters::{adapter_scalar_count, AdaptedLinear, CompressionScheme, RankVector};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::params::{ParamRole, ParamStore};
use crate::warp::{DepthMap, Image};

/// RNG substreams drawn from the model seed.
const STREAM_BACKBONE: u64 = 1;
const STREAM_HEADS: u64 = 2;
const STREAM_ADAPTERS: u64 = 3;

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adapter placement recorded at injection time.
#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub ranks: RankVector,
    pub scheme: CompressionScheme,
    pub cross_attention: bool,
}

/// Trainable and frozen parameter names; disjoint and covering the store.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamPartition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub trainable_scalars: usize,
    pub frozen_scalars: usize,
}

impl ParamPartition {
    pub fn of(store: &ParamStore) -> Self {
        let mut p = ParamPartition::default();
        for (_, param) in store.iter() {
            if param.trainable {
                p.trainable.push(param.name.clone());
                p.trainable_scalars += param.value.len();
            } else {
                p.frozen.push(param.name.clone());
                p.frozen_scalars += param.value.len();
            }
        }
        p
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        if self.trainable.iter().any(|n| n == name) {
            Some(true)
        } else if self.frozen.iter().any(|n| n == name) {
            Some(false)
        } else {
            None
        }
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_scalars as f64 / (self.trainable_scalars + self.frozen_scalars) as f64
    }
}

/// One line of the closed-form trainable count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountTerm {
    pub label: String,
    /// Adapted maps sharing these dimensions (0 for head terms).
    pub multiplicity: usize,
    pub d: usize,
    pub k: usize,
    pub rank: usize,
    pub scalars: usize,
}

/// Depth network, pose network and their shared parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetConfig,
    pub store: ParamStore,
    pub depth: DepthNet,
    pub pose: PoseNet,
    pub hooks: Hooks,
    pub injection: Option<Injection>,
}

impl Model {
    /// Frozen backbones with seeded weights and trainable heads; no
    /// adapters yet.
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut backbone = substream(seed, STREAM_BACKBONE);
        let mut heads = substream(seed, STREAM_HEADS);
        let depth = DepthNet::new(&mut store, config, &mut backbone, &mut heads);
        let pose = PoseNet::new(&mut store, config, &mut backbone, &mut heads);
        Ok(Self {
            config: config.clone(),
            store,
            depth,
            pose,
            hooks: Hooks::default(),
            injection: None,
        })
    }

    /// [`Model::new`] followed by injection with the configured rank
    /// vector and scheme.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        let ranks = config.rank_vector()?;
        m.inject_adapters(&ranks, config.scheme, seed)?;
        Ok(m)
    }

    /// Wraps every attention query/value map (decoder cross-attention too
    /// when configured) in a zero-initialised DoMoRA adapter. Ranks are
    /// indexed by block: depth encoder, pose encoder, pose decoder.
    pub fn inject_adapters(&mut self, ranks: &RankVector, scheme: CompressionScheme, seed: u64) -> Result<()> {
        if self.injection.is_some() {
            return Err(Error::Config("adapters are already injected".into()));
        }
        let d = self.config.vit.embed_dim;
        ranks.check_against(&vec![d; self.config.adapted_blocks()])?;
        let mut rng = substream(seed, STREAM_ADAPTERS);
        let mut r = ranks.as_slice().iter();
        for b in &mut self.depth.encoder.blocks {
            b.inject(&mut self.store, *r.next().expect("checked length"), scheme, &mut rng)?;
        }
        for b in &mut self.pose.encoder.blocks {
            b.inject(&mut self.store, *r.next().expect("checked length"), scheme, &mut rng)?;
        }
        let cross = self.config.adapt_cross_attention;
        for b in &mut self.pose.decoder {
            b.inject(&mut self.store, *r.next().expect("checked length"), scheme, cross, &mut rng)?;
        }
        self.injection = Some(Injection {
            ranks: ranks.clone(),
            scheme,
            cross_attention: cross,
        });
        Ok(())
    }

    /// Every adapter in block order.
    pub fn adapters(&self) -> Vec<&AdaptedLinear> {
        let mut out = Vec::new();
        for b in &self.depth.encoder.blocks {
            out.extend(b.adapters());
        }
        for b in &self.pose.encoder.blocks {
            out.extend(b.adapters());
        }
        for b in &self.pose.decoder {
            out.extend(b.adapters());
        }
        out
    }

    pub fn partition(&self) -> ParamPartition {
        ParamPartition::of(&self.store)
    }

    /// Trainable count from the configuration alone:
    /// `Σ_blocks n·[k + r(d+k) + r²]` plus the depth neck/head and the pose
    /// head, where n is the number of adapted maps in the block.
    pub fn closed_form_terms(&self) -> Vec<CountTerm> {
        let cfg = &self.config;
        let d = cfg.vit.embed_dim;
        let mut terms = Vec::new();
        if let Some(inj) = &self.injection {
            let per_decoder = if inj.cross_attention { 4 } else { 2 };
            let kinds = std::iter::repeat_n(("depth.encoder", 2), cfg.depth_blocks)
                .chain(std::iter::repeat_n(("pose.encoder", 2), cfg.pose_encoder_blocks))
                .chain(std::iter::repeat_n(("pose.decoder", per_decoder), cfg.pose_decoder_blocks));
            let mut index = [0usize; 3];
            for ((label, n), &r) in kinds.zip(inj.ranks.as_slice()) {
                let slot = match label {
                    "depth.encoder" => 0,
                    "pose.encoder" => 1,
                    _ => 2,
                };
                terms.push(CountTerm {
                    label: format!("{label}.block{}", index[slot]),
                    multiplicity: n,
                    d,
                    k: d,
                    rank: r,
                    scalars: n * adapter_scalar_count(d, d, r),
                });
                index[slot] += 1;
            }
        }
        let mut c = d;
        let mut neck = 0;
        for _ in 0..cfg.vit.patch_size.trailing_zeros() {
            let cout = (c / 2).max(4);
            neck += cout * c * 9 + cout;
            c = cout;
        }
        neck += c * 9 + 1;
        terms.push(CountTerm {
            label: "depth.neck+head".into(),
            multiplicity: 0,
            d: 0,
            k: 0,
            rank: 0,
            scalars: neck,
        });
        let h = cfg.pose_hidden;
        terms.push(CountTerm {
            label: "pose.head".into(),
            multiplicity: 0,
            d: 0,
            k: 0,
            rank: 0,
            scalars: d * h + h + h * 6 + 6,
        });
        terms
    }

    pub fn closed_form_trainable(&self) -> usize {
        self.closed_form_terms().iter().map(|t| t.scalars).sum()
    }

    /// Scalars per role, for reporting.
    pub fn role_counts(&self) -> Vec<(ParamRole, usize)> {
        let roles = [
            ParamRole::Backbone,
            ParamRole::Adapter,
            ParamRole::DepthHead,
            ParamRole::PoseHead,
            ParamRole::Other,
        ];
        roles
            .iter()
            .map(|&r| {
                let n = self.store.iter().filter(|(_, p)| p.role == r).map(|(_, p)| p.value.len()).sum();
                (r, n)
            })
            .filter(|(_, n)| *n > 0)
            .collect()
    }

    pub fn predict_depth(&self, img: &Image) -> Result<DepthMap> {
        let mut g = Graph::inference();
        let d = self.depth.forward(&mut g, &self.store, img, self.hooks)?;
        DepthMap::new(img.width(), img.height(), g.value(d).data().to_vec())
    }

    /// Predicted motion from `i1` to `i2` and the six raw head outputs.
    pub fn predict_pose(&self, i1: &Image, i2: &Image) -> Result<(PoseSE3, [f64; 6])> {
        let mut g = Graph::inference();
        let out = self.pose.forward(&mut g, &self.store, i1, i2, self.hooks)?;
        let mut raw = [0.0; 6];
        raw.copy_from_slice(g.value(out.raw).data());
        Ok((pose_from_raw(&raw, self.pose.head.scale), raw))
    }
}

#[cfg(test)]
mod tests;

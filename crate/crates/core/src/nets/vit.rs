//! Pre-norm transformer pieces: patch embedding, self/cross attention
//! blocks and the token encoder shared by both networks.

use rand::Rng;

use crate::adapters::{AdaptedLinear, CompressionScheme};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;
use crate::warp::Image;

use super::config::ViTConfig;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Ablation switches used by tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Hooks {
    /// Replace every attention output (self and cross) with zeros.
    pub zero_attention: bool,
    /// Replace only decoder cross-attention outputs with zeros.
    pub zero_cross_attention: bool,
}

/// `y = x·Wᵀ + b` over rows, W stored out×in.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights drawn from N(0, gain²/in).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        out: usize,
        inp: usize,
        bias: bool,
        trainable: bool,
        role: ParamRole,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::randn(&[out, inp], gain / (inp as f64).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w, trainable, role);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out]), trainable, role));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul_nt(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.frozen(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.frozen(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// A frozen projection that may carry an adapter.
#[derive(Clone, Debug)]
pub enum Projection {
    Frozen(Linear),
    Adapted(AdaptedLinear),
}

impl Projection {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Projection::Frozen(l) => Ok(l.forward(g, store, x)),
            Projection::Adapted(a) => a.forward(g, store, x),
        }
    }

    pub fn adapter(&self) -> Option<&AdaptedLinear> {
        match self {
            Projection::Adapted(a) => Some(a),
            Projection::Frozen(_) => None,
        }
    }

    fn inject<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        scheme: CompressionScheme,
        rng: &mut R,
    ) -> Result<()> {
        let Projection::Frozen(lin) = self else {
            return Err(Error::Config("adapters are already injected".into()));
        };
        let name = store.get(lin.weight).name.trim_end_matches(".weight").to_string();
        *self = Projection::Adapted(AdaptedLinear::inject(store, &name, lin.weight, rank, scheme, rng)?);
        Ok(())
    }
}

/// Multi-head scaled dot-product attention without projection biases.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Projection,
    pub k: Linear,
    pub v: Projection,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        let mut lin = |n: &str| Linear::new(store, &format!("{name}.{n}"), dim, dim, false, false, ParamRole::Backbone, 1.0, rng);
        let q = Projection::Frozen(lin("q"));
        let k = lin("k");
        let v = Projection::Frozen(lin("v"));
        let o = lin("o");
        Self { q, k, v, o, heads }
    }

    /// Queries from `xq`, keys and values from `xkv`; row-softmax
    /// attention per head, heads concatenated and projected.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xq: Var, xkv: Var) -> Result<Var> {
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv);
        let v = self.v.forward(g, store, xkv)?;
        let dim = g.value(q).cols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_nt(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        Ok(self.o.forward(g, store, cat))
    }

    fn inject<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        scheme: CompressionScheme,
        rng: &mut R,
    ) -> Result<()> {
        self.q.inject(store, rank, scheme, rng)?;
        self.v.inject(store, rank, scheme, rng)
    }

    fn adapters(&self) -> impl Iterator<Item = &AdaptedLinear> {
        self.q.adapter().into_iter().chain(self.v.adapter())
    }
}

/// Two-layer GELU feed-forward with biases.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), hidden, dim, true, false, ParamRole::Backbone, 1.0, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), dim, hidden, true, false, ParamRole::Backbone, 1.0, rng);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ViTConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.num_heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, hooks: Hooks) -> Result<Var> {
        let x = if hooks.zero_attention {
            x
        } else {
            let h = self.norm1.forward(g, store, x);
            let a = self.attn.forward(g, store, h, h)?;
            g.add(x, a)
        };
        let h = self.norm2.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        Ok(g.add(x, m))
    }

    pub fn inject<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        scheme: CompressionScheme,
        rng: &mut R,
    ) -> Result<()> {
        self.attn.inject(store, rank, scheme, rng)
    }

    pub fn adapters(&self) -> Vec<&AdaptedLinear> {
        self.attn.adapters().collect()
    }
}

/// Self-attention on the first stream, cross-attention with keys and
/// values from the (normalised) second stream, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub norm_context: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ViTConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, cfg.num_heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            norm_context: LayerNorm::new(store, &format!("{name}.norm_context"), d),
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, cfg.num_heads, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, context: Var, hooks: Hooks) -> Result<Var> {
        let x = if hooks.zero_attention {
            x
        } else {
            let h = self.norm1.forward(g, store, x);
            let a = self.self_attn.forward(g, store, h, h)?;
            g.add(x, a)
        };
        let x = if hooks.zero_attention || hooks.zero_cross_attention {
            x
        } else {
            let h = self.norm2.forward(g, store, x);
            let c = self.norm_context.forward(g, store, context);
            let a = self.cross_attn.forward(g, store, h, c)?;
            g.add(x, a)
        };
        let h = self.norm3.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        Ok(g.add(x, m))
    }

    pub fn inject<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        scheme: CompressionScheme,
        cross: bool,
        rng: &mut R,
    ) -> Result<()> {
        self.self_attn.inject(store, rank, scheme, rng)?;
        if cross {
            self.cross_attn.inject(store, rank, scheme, rng)?;
        }
        Ok(())
    }

    pub fn adapters(&self) -> Vec<&AdaptedLinear> {
        self.self_attn.adapters().chain(self.cross_attn.adapters()).collect()
    }
}

/// Fixed 2-D sinusoidal encoding, T×d: the first half of the channels
/// encodes the column, the second half the row.
pub fn positional_encoding(grid_w: usize, grid_h: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; grid_w * grid_h * dim];
    let enc = |pos: f64, out: &mut [f64]| {
        let n = out.len();
        for i in 0..n / 2 {
            let freq = 10000f64.powf(-2.0 * i as f64 / n as f64);
            out[2 * i] = (pos * freq).sin();
            out[2 * i + 1] = (pos * freq).cos();
        }
    };
    for y in 0..grid_h {
        for x in 0..grid_w {
            let row = &mut data[(y * grid_w + x) * dim..(y * grid_w + x + 1) * dim];
            enc(x as f64, &mut row[..half]);
            enc(y as f64, &mut row[half..]);
        }
    }
    Tensor::from_vec(&[grid_w * grid_h, dim], data)
}

/// Non-overlapping p×p patches as rows of a T×(C·p·p) matrix, tokens in
/// row-major grid order and features ordered channel, row, column.
pub fn patchify(img: &Image, p: usize) -> Tensor {
    let (gw, gh, c) = (img.width() / p, img.height() / p, img.channels());
    let dim = c * p * p;
    let mut data = Vec::with_capacity(gw * gh * dim);
    for ty in 0..gh {
        for tx in 0..gw {
            for ci in 0..c {
                for iy in 0..p {
                    for ix in 0..p {
                        data.push(img.get(tx * p + ix, ty * p + iy, ci));
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[gw * gh, dim], data)
}

/// Patch embedding, positional encoding, a stack of encoder blocks and a
/// final norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: ViTConfig,
    pub embed: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
    pos: Tensor,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ViTConfig, blocks: usize, rng: &mut R) -> Self {
        let embed = Linear::new(
            store,
            &format!("{name}.patch_embed"),
            cfg.embed_dim,
            cfg.patch_dim(),
            true,
            false,
            ParamRole::Backbone,
            1.0,
            rng,
        );
        let blocks = (0..blocks)
            .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), cfg, rng))
            .collect();
        let norm = LayerNorm::new(store, &format!("{name}.norm"), cfg.embed_dim);
        let (gw, gh) = cfg.grid();
        Self {
            cfg: *cfg,
            embed,
            blocks,
            norm,
            pos: positional_encoding(gw, gh, cfg.embed_dim),
        }
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        let c = &self.cfg;
        if img.width() != c.width || img.height() != c.height || img.channels() != c.channels {
            return Err(Error::invalid(format!(
                "network expects {}×{}×{} images, got {}×{}×{}",
                c.width,
                c.height,
                c.channels,
                img.width(),
                img.height(),
                img.channels()
            )));
        }
        Ok(())
    }

    /// T×d token features of `img`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, img: &Image, hooks: Hooks) -> Result<Var> {
        self.check_image(img)?;
        let patches = g.constant(patchify(img, self.cfg.patch_size));
        let x = self.embed.forward(g, store, patches);
        let pos = g.constant(self.pos.clone());
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            x = b.forward(g, store, x, hooks)?;
        }
        Ok(self.norm.forward(g, store, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patchify_orders_tokens_and_features() {
        let img = Image::from_fn(4, 4, 1, |x, y, _| (y * 4 + x) as f64 / 16.0);
        let t = patchify(&img, 2);
        assert_eq!(t.shape(), &[4, 4]);
        let row1: Vec<f64> = t.data()[4..8].iter().map(|v| v * 16.0).collect();
        assert_eq!(row1, vec![2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn positional_encoding_is_distinct_per_token() {
        let pe = positional_encoding(4, 3, 8);
        let rows: Vec<&[f64]> = pe.data().chunks(8).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert!(rows[i].iter().zip(rows[j]).any(|(a, b)| (a - b).abs() > 1e-3));
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", 8, 2, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
        let q = att.q.forward(&mut g, &store, x).unwrap();
        let k = att.k.forward(&mut g, &store, x);
        let s = g.matmul_nt(q, k);
        let a = g.softmax_rows(s);
        for row in g.value(a).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

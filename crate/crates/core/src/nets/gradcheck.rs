//! Central-difference verification of analytic gradients on small network
//! fragments.
//!
//! The error of one tensor is `‖g_a − g_n‖ / max(‖g_a‖, ‖g_n‖)`; a
//! fragment reports the worst tensor. Tensors whose gradients are both
//! below [`ZERO_GRADIENT`] in norm count as agreeing: a rank-1 sum
//! compression of layer-normalised rows is exactly zero, for instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{AdaptedLinear, CompressionScheme};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::losses::LossConfig;
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;
use crate::warp::{synthesize_view, DepthMap, Image, Intrinsics};

use super::config::{NetConfig, ViTConfig};
use super::vit::{DecoderBlock, EncoderBlock, Hooks};
use super::Model;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const ZERO_GRADIENT: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub module: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub scalars: usize,
    pub tensors: Vec<TensorError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

/// Compares the analytic gradient of the scalar built by `f` against
/// central differences for every parameter in `ids` that is trainable.
/// Frozen parameters must receive no gradient at all.
pub fn grad_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    step: f64,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<(f64, usize, Vec<TensorError>)> {
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss);
    let bound: std::collections::HashMap<ParamId, Var> = g.bound_params().into_iter().collect();
    let mut worst: f64 = 0.0;
    let mut scalars = 0;
    let mut report = Vec::new();
    for &id in ids {
        let name = store.get(id).name.clone();
        let analytic = bound.get(&id).and_then(|v| grads.get(*v)).cloned();
        if !store.get(id).trainable {
            if analytic.is_some() {
                return Err(Error::NonFiniteGradient(format!("frozen parameter {name} received a gradient")));
            }
            continue;
        }
        let analytic = analytic.unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        if !analytic.is_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
        let n = store.value(id).len();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + step;
            let up = eval(store, &f)?;
            store.value_mut(id).data_mut()[j] = orig - step;
            let down = eval(store, &f)?;
            store.value_mut(id).data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * step);
        }
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let an = analytic.norm();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = an.max(nn);
        let rel = if scale > ZERO_GRADIENT { diff / scale } else { 0.0 };
        worst = worst.max(rel);
        scalars += n;
        report.push(TensorError {
            name,
            rel_error: rel,
            analytic_norm: an,
        });
    }
    Ok((worst, scalars, report))
}

fn eval(store: &ParamStore, f: &impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::inference();
    let v = f(&mut g, store)?;
    Ok(g.value(v).item())
}

/// Fragments known to [`run`], with their pass thresholds.
pub const MODULES: &[(&str, f64)] = &[
    ("adapted-linear", 1e-6),
    ("encoder-block", 1e-4),
    ("decoder-block", 1e-4),
    ("warp-depth", 1e-3),
    ("reprojection-loss", 1e-3),
    ("pose-head", 1e-4),
    ("depth-net", 1e-4),
    ("pose-net", 1e-4),
];

pub fn threshold(module: &str) -> Option<f64> {
    MODULES.iter().find(|(m, _)| *m == module).map(|(_, t)| *t)
}

/// Replaces every adapter tensor with random values so that all adapter
/// gradients are non-trivial.
fn randomise_adapter<R: Rng + ?Sized>(store: &mut ParamStore, a: &AdaptedLinear, rng: &mut R) {
    for id in [a.b, a.square] {
        let t = Tensor::uniform(store.value(id).shape(), 0.3, rng);
        *store.value_mut(id) = t;
    }
    let noise = Tensor::uniform(store.value(a.m).shape(), 0.2, rng);
    let m = store.value(a.m).zip_map(&noise, |v, n| v * (1.0 + n));
    *store.value_mut(a.m) = m;
}

fn make_all_trainable(store: &mut ParamStore) -> Vec<ParamId> {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for &id in &ids {
        store.set_trainable(id, true);
    }
    ids
}

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        mlp_ratio: 2,
        width: 8,
        height: 8,
        channels: 3,
    }
}

fn half_sum_of_squares(g: &mut Graph, y: Var) -> Var {
    let sq = g.square(y);
    let s = g.sum(sq);
    g.scale(s, 0.5)
}

fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Var {
    let w = g.constant(w.clone());
    let p = g.mul(y, w);
    g.sum(p)
}

fn smooth_image(w: usize, h: usize, phase: f64) -> Image {
    Image::from_fn(w, h, 3, |x, y, c| {
        let (x, y) = (x as f64, y as f64);
        0.5 + 0.3 * (0.9 * x + 0.5 * y + c as f64 + phase).sin() * (0.6 * y - 0.3 * x + phase).cos()
    })
}

/// Runs one named fragment.
pub fn run(module: &str, seed: u64) -> Result<GradCheckReport> {
    let thr = threshold(module).ok_or_else(|| {
        let names: Vec<&str> = MODULES.iter().map(|(m, _)| *m).collect();
        Error::Config(format!("unknown grad-check module {module:?} (expected one of {})", names.join(", ")))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (worst, scalars, tensors) = match module {
        "adapted-linear" => {
            let mut store = ParamStore::new();
            let w0 = store.frozen("fc.weight", Tensor::randn(&[7, 6], 0.5, &mut rng));
            let lin = AdaptedLinear::inject(&mut store, "fc", w0, 3, CompressionScheme::rotation(), &mut rng)?;
            randomise_adapter(&mut store, &lin, &mut rng);
            let x = Tensor::randn(&[5, 6], 1.0, &mut rng);
            let ids = vec![w0, lin.m, lin.a, lin.b, lin.square];
            grad_check(&mut store, &ids, DEFAULT_STEP, |g, s| {
                let xv = g.constant(x.clone());
                let y = lin.forward(g, s, xv)?;
                Ok(half_sum_of_squares(g, y))
            })?
        }
        "encoder-block" => {
            let cfg = tiny_vit();
            let mut store = ParamStore::new();
            let mut block = EncoderBlock::new(&mut store, "block", &cfg, &mut rng);
            block.inject(&mut store, 2, CompressionScheme::truncation_sum(), &mut rng)?;
            for a in block.adapters() {
                randomise_adapter(&mut store, a, &mut rng);
            }
            randomise_norms(&mut store, &mut rng);
            let ids = make_all_trainable(&mut store);
            let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 8], 1.0, &mut rng);
            grad_check(&mut store, &ids, DEFAULT_STEP, |g, s| {
                let xv = g.constant(x.clone());
                let y = block.forward(g, s, xv, Hooks::default())?;
                Ok(weighted_sum(g, y, &w))
            })?
        }
        "decoder-block" => {
            let cfg = tiny_vit();
            let mut store = ParamStore::new();
            let mut block = DecoderBlock::new(&mut store, "block", &cfg, &mut rng);
            block.inject(&mut store, 2, CompressionScheme::truncation_sum(), true, &mut rng)?;
            for a in block.adapters() {
                randomise_adapter(&mut store, a, &mut rng);
            }
            randomise_norms(&mut store, &mut rng);
            let ids = make_all_trainable(&mut store);
            let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
            let ctx = Tensor::randn(&[4, 8], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 8], 1.0, &mut rng);
            grad_check(&mut store, &ids, DEFAULT_STEP, |g, s| {
                let xv = g.constant(x.clone());
                let cv = g.constant(ctx.clone());
                let y = block.forward(g, s, xv, cv, Hooks::default())?;
                Ok(weighted_sum(g, y, &w))
            })?
        }
        "warp-depth" => {
            let (w, h) = (8, 8);
            let src = smooth_image(w, h, 0.0);
            let k = Intrinsics::centered(8.0, w, h);
            let pose = PoseSE3::from_axis_angle(
                crate::geometry::AxisAngle::new(0.01, -0.02, 0.015),
                nalgebra::Vector3::new(0.06, -0.03, 0.02),
            );
            let depth: Vec<f64> = (0..w * h).map(|_| rng.random_range(1.6..2.4)).collect();
            let gt = DepthMap::new(w, h, depth.iter().map(|d| d * 1.1).collect())?;
            let (target, _) = synthesize_view(&src, &gt, &k, &pose)?;
            let mut store = ParamStore::new();
            let d = store.add("depth", Tensor::from_vec(&[h, w], depth), true, ParamRole::Other);
            let cfg = LossConfig {
                window_size: 3,
                scales: 2,
                ..LossConfig::default()
            };
            let target_t = target.to_chw();
            let m = pose.rotation.matrix();
            let rot = Tensor::from_vec(&[3, 3], (0..9).map(|i| m[(i / 3, i % 3)]).collect());
            let trans = Tensor::from_vec(&[3], pose.translation.iter().copied().collect());
            grad_check(&mut store, &[d], DEFAULT_STEP, |g, s| {
                let dv = g.param(s, d);
                let r = g.constant(rot.clone());
                let t = g.constant(trans.clone());
                let (warped, mask) = g.warp(&src, dv, r, t, &k);
                let tv = g.constant(target_t.clone());
                g.reprojection_loss(tv, warped, &mask, &cfg)
            })?
        }
        "reprojection-loss" => {
            let target = smooth_image(16, 16, 0.3);
            let synth = smooth_image(16, 16, 0.9).to_chw();
            let mut store = ParamStore::new();
            let id = store.add("synth", synth, true, ParamRole::Other);
            let mut mask = vec![true; 256];
            for v in mask.iter_mut().take(16 * 3) {
                *v = false;
            }
            let mask = crate::warp::ValidityMask::new(16, 16, mask)?;
            let cfg = LossConfig {
                window_size: 5,
                scales: 2,
                ..LossConfig::default()
            };
            let tt = target.to_chw();
            grad_check(&mut store, &[id], DEFAULT_STEP, |g, s| {
                let x = g.constant(tt.clone());
                let y = g.param(s, id);
                g.reprojection_loss(x, y, &mask, &cfg)
            })?
        }
        "pose-head" => {
            let mut store = ParamStore::new();
            let head = super::PoseHead::new(&mut store, 8, 6, 0.05, &mut rng);
            for id in [head.fc1.bias.unwrap(), head.fc2.bias.unwrap()] {
                let t = Tensor::uniform(store.value(id).shape(), 0.5, &mut rng);
                *store.value_mut(id) = t;
            }
            let ids: Vec<ParamId> = store.trainable_ids();
            let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
            let wr = Tensor::randn(&[3, 3], 1.0, &mut rng);
            let wt = Tensor::randn(&[3], 1.0, &mut rng);
            grad_check(&mut store, &ids, DEFAULT_STEP, |g, s| {
                let xv = g.constant(x.clone());
                let out = head.forward(g, s, xv);
                let a = weighted_sum(g, out.rot, &wr);
                let b = weighted_sum(g, out.trans, &wt);
                Ok(g.add(a, b))
            })?
        }
        "depth-net" | "pose-net" => {
            let cfg = NetConfig {
                vit: ViTConfig {
                    width: 16,
                    height: 16,
                    ..tiny_vit()
                },
                depth_blocks: 1,
                pose_encoder_blocks: 1,
                pose_decoder_blocks: 1,
                pose_hidden: 8,
                base_rank: 2,
                head_scale: 0.05,
                min_depth: 0.5,
                max_depth: 5.0,
                ..NetConfig::default()
            };
            let mut model = Model::build(&cfg, seed)?;
            for a in model.adapters().into_iter().cloned().collect::<Vec<_>>() {
                randomise_adapter(&mut model.store, &a, &mut rng);
            }
            let head = model.depth.head.weight;
            let t = Tensor::randn(model.store.value(head).shape(), 0.3, &mut rng);
            *model.store.value_mut(head) = t;
            let i1 = smooth_image(16, 16, 0.1);
            let i2 = smooth_image(16, 16, 0.4);
            let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
            let w = Tensor::randn(&[1, 16, 16], 1.0, &mut rng);
            let (depth, pose) = (model.depth.clone(), model.pose.clone());
            if module == "depth-net" {
                grad_check(&mut model.store, &ids, DEFAULT_STEP, |g, s| {
                    let d = depth.forward(g, s, &i1, Hooks::default())?;
                    Ok(weighted_sum(g, d, &w))
                })?
            } else {
                let wr = Tensor::randn(&[3, 3], 1.0, &mut rng);
                let wt = Tensor::randn(&[3], 1.0, &mut rng);
                grad_check(&mut model.store, &ids, DEFAULT_STEP, |g, s| {
                    let out = pose.forward(g, s, &i1, &i2, Hooks::default())?;
                    let a = weighted_sum(g, out.rot, &wr);
                    let b = weighted_sum(g, out.trans, &wt);
                    Ok(g.add(a, b))
                })?
            }
        }
        _ => unreachable!("threshold lookup covers every module"),
    };
    Ok(GradCheckReport {
        module: module.to_string(),
        max_rel_error: worst,
        threshold: thr,
        scalars,
        tensors,
    })
}

/// Moves layer-norm gains and offsets away from 1 and 0.
fn randomise_norms<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".gamma") || p.name.ends_with(".beta"))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let noise = Tensor::uniform(store.value(id).shape(), 0.3, rng);
        let t = store.value(id).zip_map(&noise, |v, n| v + n);
        *store.value_mut(id) = t;
    }
}

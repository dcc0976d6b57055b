use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adapters::RankPolicy;
use crate::tensor::Tensor;

fn small_config() -> NetConfig {
    NetConfig {
        vit: ViTConfig {
            patch_size: 4,
            embed_dim: 16,
            num_heads: 2,
            mlp_ratio: 2,
            width: 16,
            height: 16,
            channels: 3,
        },
        depth_blocks: 2,
        pose_encoder_blocks: 2,
        pose_decoder_blocks: 1,
        pose_hidden: 16,
        base_rank: 4,
        ..NetConfig::default()
    }
}

fn image(phase: f64) -> Image {
    Image::from_fn(16, 16, 3, |x, y, c| {
        0.5 + 0.4 * ((x as f64) * 0.7 + (y as f64) * 0.3 + c as f64 + phase).sin()
    })
}

fn depth_values(m: &Model, img: &Image) -> Vec<f64> {
    m.predict_depth(img).unwrap().data().to_vec()
}

fn pose_raw(m: &Model, a: &Image, b: &Image) -> [f64; 6] {
    m.predict_pose(a, b).unwrap().1
}

#[test]
fn injection_leaves_outputs_unchanged() {
    let cfg = small_config();
    let bare = Model::new(&cfg, 11).unwrap();
    let mut adapted = bare.clone();
    adapted.inject_adapters(&cfg.rank_vector().unwrap(), cfg.scheme, 11).unwrap();
    let (a, b) = (image(0.0), image(0.8));
    for (x, y) in depth_values(&bare, &a).iter().zip(depth_values(&adapted, &a)) {
        assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
    }
    for (x, y) in pose_raw(&bare, &a, &b).iter().zip(pose_raw(&adapted, &a, &b)) {
        assert!((x - y).abs() <= 1e-10);
    }
}

#[test]
fn adapter_count_and_naming() {
    let cfg = small_config();
    let m = Model::build(&cfg, 3).unwrap();
    let per_block = 2 * (cfg.depth_blocks + cfg.pose_encoder_blocks) + 4 * cfg.pose_decoder_blocks;
    assert_eq!(m.adapters().len(), per_block);
    for suffix in ["m", "A", "B", "M"] {
        assert!(m.store.id(&format!("depth.encoder.block0.attn.q.{suffix}")).is_some());
        assert!(m.store.id(&format!("pose.decoder.block0.cross_attn.v.{suffix}")).is_some());
    }
    let no_cross = NetConfig {
        adapt_cross_attention: false,
        ..cfg.clone()
    };
    let m2 = Model::build(&no_cross, 3).unwrap();
    assert_eq!(m2.adapters().len(), per_block - 2 * cfg.pose_decoder_blocks);
}

#[test]
fn second_injection_and_bad_rank_length_are_rejected() {
    let cfg = small_config();
    let mut m = Model::build(&cfg, 1).unwrap();
    let ranks = cfg.rank_vector().unwrap();
    assert!(matches!(m.inject_adapters(&ranks, cfg.scheme, 1), Err(Error::Config(_))));
    let mut bare = Model::new(&cfg, 1).unwrap();
    let short = crate::adapters::rank_vector(2, 4, RankPolicy::Constant).unwrap();
    assert!(bare.inject_adapters(&short, cfg.scheme, 1).is_err());
}

#[test]
fn partition_is_disjoint_and_covering() {
    let m = Model::build(&small_config(), 5).unwrap();
    let p = m.partition();
    assert_eq!(p.trainable.len() + p.frozen.len(), m.store.len());
    for n in &p.trainable {
        assert!(!p.frozen.contains(n));
    }
    for (_, param) in m.store.iter() {
        let expect = param.role != ParamRole::Backbone;
        assert_eq!(p.is_trainable(&param.name), Some(expect), "{}", param.name);
    }
    assert_eq!(p.is_trainable("missing"), None);
    assert_eq!(p.trainable_scalars, m.store.scalar_count(true));
}

#[test]
fn default_model_trains_a_small_fraction() {
    let m = Model::build(&NetConfig::default(), 0).unwrap();
    let p = m.partition();
    assert!(p.trainable_fraction() < 0.35, "{}", p.trainable_fraction());
    assert!(p.trainable_fraction() > 0.0);
}

#[test]
fn closed_form_count_matches_store() {
    for cfg in [small_config(), NetConfig::default()] {
        let m = Model::build(&cfg, 2).unwrap();
        assert_eq!(m.closed_form_trainable(), m.partition().trainable_scalars);
    }
    let bare = Model::new(&small_config(), 2).unwrap();
    assert_eq!(bare.closed_form_trainable(), bare.partition().trainable_scalars);
}

#[test]
fn depth_stays_in_range() {
    let cfg = NetConfig {
        min_depth: 0.5,
        max_depth: 20.0,
        ..small_config()
    };
    let mut m = Model::build(&cfg, 4).unwrap();
    let id = m.depth.head.weight;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    *m.store.value_mut(id) = Tensor::randn(m.store.value(id).shape(), 5.0, &mut rng);
    for v in depth_values(&m, &image(0.2)) {
        assert!((0.5..=20.0).contains(&v), "{v}");
    }
}

#[test]
fn sigmoid_to_depth_endpoints() {
    assert!((sigmoid_to_depth(0.0, 0.1, 100.0) - 100.0).abs() < 1e-9);
    assert!((sigmoid_to_depth(1.0, 0.1, 100.0) - 0.1).abs() < 1e-12);
    let mid = sigmoid_to_depth(0.5, 0.1, 100.0);
    assert!((1.0 / mid - 0.5 * (10.0 + 0.01)).abs() < 1e-9);
}

#[test]
fn pose_from_raw_scales_before_rotation() {
    let p = pose_from_raw(&[0.0; 6], 0.001);
    assert_eq!(p.translation, nalgebra::Vector3::zeros());
    assert!((p.rotation.matrix() - nalgebra::Matrix3::identity()).norm() < 1e-15);
    let p = pose_from_raw(&[0.0, 0.0, 1000.0 * std::f64::consts::FRAC_PI_2, 1000.0, -2000.0, 0.0], 0.001);
    assert!((p.translation - nalgebra::Vector3::new(1.0, -2.0, 0.0)).norm() < 1e-12);
    let expect = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    assert!((p.rotation.matrix() - expect).norm() < 1e-12);
}

#[test]
fn pose_head_graph_matches_plain_conversion() {
    let m = Model::build(&small_config(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[1, 16], 3.0, &mut rng);
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let out = m.pose.head.forward(&mut g, &m.store, xv);
    let raw = g.value(out.raw).data().to_vec();
    let p = pose_from_raw(&raw, 0.001);
    let rot = g.value(out.rot).data();
    for i in 0..9 {
        assert!((rot[i] - p.rotation.matrix()[(i / 3, i % 3)]).abs() < 1e-14);
    }
    for i in 0..3 {
        assert!((g.value(out.trans).data()[i] - p.translation[i]).abs() < 1e-15);
    }
}

#[test]
fn twin_encoders_share_weights() {
    let m = Model::build(&small_config(), 6).unwrap();
    let img = image(0.4);
    let mut g = Graph::inference();
    let f1 = m.pose.encoder.forward(&mut g, &m.store, &img, Hooks::default()).unwrap();
    let f2 = m.pose.encoder.forward(&mut g, &m.store, &img, Hooks::default()).unwrap();
    assert_eq!(g.value(f1), g.value(f2));
    let mut g = Graph::new();
    let _ = m.pose.forward(&mut g, &m.store, &img, &image(0.9), Hooks::default()).unwrap();
    let embeds = g
        .bound_params()
        .iter()
        .filter(|(id, _)| m.store.get(*id).name.starts_with("pose.encoder.patch_embed.weight"))
        .count();
    assert_eq!(embeds, 1);
}

#[test]
fn zero_attention_hook_reduces_blocks_to_mlp() {
    let cfg = small_config();
    let mut m = Model::build(&cfg, 12).unwrap();
    m.hooks.zero_attention = true;
    let img = image(0.1);
    let mut g = Graph::inference();
    let got = m.depth.encoder.forward(&mut g, &m.store, &img, m.hooks).unwrap();
    let got = g.value(got).clone();

    let mut g = Graph::inference();
    let enc = &m.depth.encoder;
    let patches = g.constant(patchify(&img, cfg.vit.patch_size));
    let x = enc.embed.forward(&mut g, &m.store, patches);
    let pos = g.constant(positional_encoding(4, 4, 16));
    let mut x = g.add(x, pos);
    for b in &enc.blocks {
        let h = b.norm2.forward(&mut g, &m.store, x);
        let y = b.mlp.forward(&mut g, &m.store, h);
        x = g.add(x, y);
    }
    let want = enc.norm.forward(&mut g, &m.store, x);
    assert!(got.zip_map(g.value(want), |a, b| a - b).max_abs() < 1e-12);
}

#[test]
fn zeroed_cross_attention_ignores_second_image() {
    let mut m = Model::build(&small_config(), 13).unwrap();
    let a = image(0.0);
    let with = pose_raw(&m, &a, &image(0.5));
    let other = pose_raw(&m, &a, &image(2.5));
    assert!(with.iter().zip(&other).any(|(x, y)| (x - y).abs() > 1e-9));
    m.hooks.zero_cross_attention = true;
    let p = pose_raw(&m, &a, &image(0.5));
    let q = pose_raw(&m, &a, &image(2.5));
    assert_eq!(p, q);
}

/// Plain-loop attention with frozen q/k/v/o read straight from the store.
#[test]
fn attention_matches_hand_assembled_oracle() {
    let (t, d, heads) = (4, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "a", d, heads, &mut rng);
    let xq = Tensor::randn(&[t, d], 1.0, &mut rng);
    let xkv = Tensor::randn(&[t, d], 1.0, &mut rng);
    let mut g = Graph::inference();
    let (q, kv) = (g.constant(xq.clone()), g.constant(xkv.clone()));
    let out = attn.forward(&mut g, &store, q, kv).unwrap();
    let got = g.value(out).data().to_vec();

    let w = |name: &str| store.value(store.id(name).unwrap()).data().to_vec();
    let (wq, wk, wv, wo) = (w("a.q.weight"), w("a.k.weight"), w("a.v.weight"), w("a.o.weight"));
    let lin = |x: &[f64], w: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; t * d];
        for r in 0..t {
            for o in 0..d {
                y[r * d + o] = (0..d).map(|i| x[r * d + i] * w[o * d + i]).sum();
            }
        }
        y
    };
    let (qm, km, vm) = (lin(xq.data(), &wq), lin(xkv.data(), &wk), lin(xkv.data(), &wv));
    let dh = d / heads;
    let mut cat = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|c| qm[i * d + h * dh + c] * km[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                cat[i * d + h * dh + c] = (0..t).map(|j| e[j] / z * vm[j * d + h * dh + c]).sum();
            }
        }
    }
    let want = lin(&cat, &wo);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn seeds_are_reproducible_and_distinct() {
    let cfg = small_config();
    let a = Model::build(&cfg, 7).unwrap();
    let b = Model::build(&cfg, 7).unwrap();
    let c = Model::build(&cfg, 8).unwrap();
    let img = image(0.3);
    assert_eq!(depth_values(&a, &img), depth_values(&b, &img));
    assert_ne!(depth_values(&a, &img), depth_values(&c, &img));
}

#[test]
fn wrong_image_size_is_rejected() {
    let m = Model::build(&small_config(), 0).unwrap();
    let img = Image::from_fn(8, 8, 3, |_, _, _| 0.5);
    assert!(matches!(m.predict_depth(&img), Err(Error::InvalidInput(_))));
}

#[test]
fn grad_check_fragments_pass() {
    for (module, thr) in gradcheck::MODULES {
        let r = gradcheck::run(module, 0).unwrap();
        assert!(r.scalars > 0, "{module}");
        assert!(r.max_rel_error <= *thr, "{module}: {} > {thr}", r.max_rel_error);
    }
    assert!(matches!(gradcheck::run("nope", 0), Err(Error::Config(_))));
}


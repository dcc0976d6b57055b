use depthpose::nets::Model;
use depthpose::params::ParamRole;
use depthpose::pipeline::train::{step_learning_rate, train};
use depthpose::pipeline::{
    forward_only_loss, generate_scene_sized, plan_batches, train_step, Adam, SceneKind, SceneSequence, TrainConfig,
};
use depthpose::Image;

fn tiny() -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("width", "16"),
        ("height", "16"),
        ("patch_size", "4"),
        ("embed_dim", "8"),
        ("num_heads", "2"),
        ("depth_blocks", "1"),
        ("pose_encoder_blocks", "1"),
        ("pose_decoder_blocks", "1"),
        ("pose_hidden", "8"),
        ("base_rank", "2"),
        ("frames", "7"),
        ("epochs", "2"),
        ("batch_size", "2"),
        ("ms_ssim_scales", "1"),
        ("learning_rate", "0.001"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn scene(cfg: &TrainConfig) -> SceneSequence {
    generate_scene_sized(cfg.scene_seed, cfg.scene_kind, cfg.net.vit.width, cfg.net.vit.height, cfg.frames)
}

fn batch(s: &SceneSequence, pairs: &[(usize, usize)]) -> Vec<(Image, Image)> {
    pairs.iter().map(|&(a, b)| (s.frames[a].clone(), s.frames[b].clone())).collect()
}

fn snapshot(m: &Model) -> Vec<(String, ParamRole, bool, Vec<f64>)> {
    m.store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.role, p.trainable, p.value.data().to_vec()))
        .collect()
}

#[test]
fn first_step_loss_matches_plain_forward_pass() {
    let cfg = tiny();
    let s = scene(&cfg);
    let mut model = Model::build(&cfg.net, cfg.seed).unwrap();
    let data = batch(&s, &[(0, 1), (3, 4)]);
    let plain = forward_only_loss(&model, &data, &s.intrinsics, &cfg.loss).unwrap();
    let mut adam = Adam::new();
    let graph = train_step(&mut model, &mut adam, &data, &s.intrinsics, &cfg.loss, 1e-3, 0).unwrap();
    assert!((plain.reproj - graph.reproj).abs() < 1e-10, "{plain:?} vs {graph:?}");
    assert!((plain.tikhonov - graph.tikhonov).abs() < 1e-12);
    assert_eq!(graph.total, graph.reproj + graph.tikhonov);
}

#[test]
fn steps_move_only_trainable_parameters() {
    let cfg = tiny();
    let s = scene(&cfg);
    let mut model = Model::build(&cfg.net, cfg.seed).unwrap();
    let before = snapshot(&model);
    let mut adam = Adam::new();
    for i in 0..3 {
        let data = batch(&s, &[(i, i + 1)]);
        train_step(&mut model, &mut adam, &data, &s.intrinsics, &cfg.loss, 1e-3, i).unwrap();
    }
    let after = snapshot(&model);
    let mut moved_trainable = 0;
    for (b, a) in before.iter().zip(&after) {
        if b.2 {
            moved_trainable += usize::from(b.3 != a.3);
        } else {
            assert_eq!(b.1, ParamRole::Backbone);
            assert_eq!(b.3, a.3, "frozen {} changed", b.0);
        }
    }
    assert!(moved_trainable > 0);
}

#[test]
fn zero_learning_rate_leaves_the_model_and_loss_unchanged() {
    let mut cfg = tiny();
    cfg.set("learning_rate", "0").unwrap();
    let s = scene(&cfg);
    let mut losses = Vec::new();
    let model = train(&cfg, &s, |r| {
        losses.push(r.loss.total);
        Ok(())
    })
    .unwrap();
    assert_eq!(snapshot(&model), snapshot(&Model::build(&cfg.net, cfg.seed).unwrap()));
    // the same pair in two epochs gives the same loss
    let plan = plan_batches(&cfg, s.len());
    for (i, a) in plan.iter().enumerate() {
        for (j, b) in plan.iter().enumerate() {
            if a.pairs == b.pairs {
                assert_eq!(losses[i], losses[j]);
            }
        }
    }
}

#[test]
fn prefetching_does_not_change_the_run() {
    let mut cfg = tiny();
    let s = scene(&cfg);
    let mut with = Vec::new();
    let a = train(&cfg, &s, |r| {
        with.push(*r);
        Ok(())
    })
    .unwrap();
    cfg.prefetch = false;
    let mut without = Vec::new();
    let b = train(&cfg, &s, |r| {
        without.push(*r);
        Ok(())
    })
    .unwrap();
    assert_eq!(with, without);
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn step_cap_and_decay_schedule() {
    let mut cfg = tiny();
    cfg.set("max_steps", "4").unwrap();
    cfg.set("lr_decay_unit", "steps").unwrap();
    cfg.set("lr_decay_every", "2").unwrap();
    cfg.set("lr_decay_factor", "0.5").unwrap();
    let s = scene(&cfg);
    let mut rates = Vec::new();
    train(&cfg, &s, |r| {
        rates.push(r.learning_rate);
        Ok(())
    })
    .unwrap();
    assert_eq!(rates, vec![1e-3, 1e-3, 5e-4, 5e-4]);

    cfg.set("max_steps", "0").unwrap();
    cfg.set("lr_decay_unit", "epochs").unwrap();
    cfg.set("lr_decay_every", "1").unwrap();
    let plan = plan_batches(&cfg, s.len());
    assert_eq!(plan.len(), 6);
    for b in &plan {
        assert_eq!(step_learning_rate(&cfg, b), 1e-3 * 0.5f64.powi(b.epoch as i32));
    }
}

#[test]
fn mismatched_scene_size_is_a_config_error() {
    let cfg = tiny();
    let s = generate_scene_sized(0, SceneKind::SphereRoom, 8, 8, 4);
    assert!(matches!(train(&cfg, &s, |_| Ok(())), Err(depthpose::Error::Config(_))));
}

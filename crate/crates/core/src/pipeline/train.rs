//! Self-supervised training on consecutive frame pairs and the evaluation
//! of the trained model against scene ground truth.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::losses::{reprojection_loss, tikhonov_regulariser, total_loss, LossBreakdown, LossConfig};
use crate::nets::Model;
use crate::params::ParamId;
use crate::warp::{synthesize_view, DepthMap, Image};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{lr_schedule, DecayUnit, TrainConfig};
use super::io::{load_sequence, save_trajectory};
use super::metrics::{accumulate_trajectory, ate, bbox_diagonal, evaluate_depth, AteResult, DepthMetrics};
use super::optim::Adam;
use super::scene::{generate_scene_sized, SceneSequence};

/// Batch order substream of the run seed; streams 1–3 initialise the model.
const STREAM_BATCHES: u64 = 4;

/// Frame indices `(s, t)` with `t = s + 1`.
pub type FramePair = (usize, usize);

/// Consecutive pairs of an `n`-frame sequence.
pub fn consecutive_pairs(n: usize) -> Vec<FramePair> {
    (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect()
}

/// One optimizer step worth of pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedBatch {
    pub step: usize,
    pub epoch: usize,
    pub pairs: Vec<FramePair>,
}

/// Every batch of the run: pairs reshuffled each epoch, the last batch of
/// an epoch possibly short, cut at `max_steps` when that is set.
pub fn plan_batches(cfg: &TrainConfig, frames: usize) -> Vec<PlannedBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_BATCHES);
    let base = consecutive_pairs(frames);
    let mut out = Vec::new();
    'epochs: for epoch in 0..cfg.epochs {
        let mut pairs = base.clone();
        pairs.shuffle(&mut rng);
        for chunk in pairs.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && out.len() == cfg.max_steps {
                break 'epochs;
            }
            out.push(PlannedBatch {
                step: out.len(),
                epoch,
                pairs: chunk.to_vec(),
            });
        }
    }
    out
}

pub fn step_learning_rate(cfg: &TrainConfig, b: &PlannedBatch) -> f64 {
    match cfg.lr_decay_unit {
        DecayUnit::Epochs => lr_schedule(b.epoch, cfg),
        DecayUnit::Steps => lr_schedule(b.step, cfg),
    }
}

/// Graph terms of one pair: depth of the source frame, motion from source
/// to target, source warped into the target view.
pub fn pair_terms(
    g: &mut Graph,
    model: &Model,
    source: &Image,
    target: &Image,
    k: &crate::warp::Intrinsics,
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    let depth = model.depth.forward(g, &model.store, source, model.hooks)?;
    let pose = model.pose.forward(g, &model.store, source, target, model.hooks)?;
    let (warped, mask) = g.warp(source, depth, pose.rot, pose.trans, k);
    let t = g.constant(target.to_chw());
    let reproj = g.reprojection_loss(t, warped, &mask, cfg)?;
    let tik = g.tikhonov(depth, source, cfg.smoothness_weight)?;
    Ok((reproj, tik))
}

fn check_finite(b: &LossBreakdown, batch_index: usize) -> Result<()> {
    if b.reproj.is_finite() && b.tikhonov.is_finite() && b.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            batch_index: Some(batch_index),
            detail: format!("reproj {} tikhonov {}", b.reproj, b.tikhonov),
        })
    }
}

/// Batch-mean losses and one Adam update of the trainable parameters.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[(Image, Image)],
    k: &crate::warp::Intrinsics,
    cfg: &LossConfig,
    lr: f64,
    batch_index: usize,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut g = Graph::new();
    let mut reproj = Vec::with_capacity(batch.len());
    let mut tik = Vec::with_capacity(batch.len());
    for (s, t) in batch {
        let (r, m) = pair_terms(&mut g, model, s, t, k, cfg)?;
        reproj.push(r);
        tik.push(m);
    }
    let inv = 1.0 / batch.len() as f64;
    let sum = |g: &mut Graph, v: &[Var]| {
        let mut acc = v[0];
        for &x in &v[1..] {
            acc = g.add(acc, x);
        }
        g.scale(acc, inv)
    };
    let r = sum(&mut g, &reproj);
    let m = sum(&mut g, &tik);
    let total = g.add(r, m);
    let b = total_loss(g.value(r).item(), g.value(m).item())?;
    check_finite(&b, batch_index)?;
    let mut grads = g.backward(total);
    let updates: Vec<(ParamId, crate::tensor::Tensor)> = g
        .bound_params()
        .into_iter()
        .filter(|(id, _)| model.store.get(*id).trainable)
        .filter_map(|(id, v)| grads.take(v).map(|t| (id, t)))
        .collect();
    adam.update(&mut model.store, &updates, lr)?;
    Ok(b)
}

/// The same batch losses computed with the plain image functions and no
/// graph.
pub fn forward_only_loss(
    model: &Model,
    batch: &[(Image, Image)],
    k: &crate::warp::Intrinsics,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut r = 0.0;
    let mut m = 0.0;
    for (s, t) in batch {
        let depth = model.predict_depth(s)?;
        let (pose, _) = model.predict_pose(s, t)?;
        let (synth, mask) = synthesize_view(s, &depth, k, &pose)?;
        r += reprojection_loss(t, &synth, &mask, cfg)?;
        m += tikhonov_regulariser(&depth, s, cfg.smoothness_weight)?;
    }
    let n = batch.len() as f64;
    total_loss(r / n, m / n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub learning_rate: f64,
}

impl StepRecord {
    /// `step,reproj,tikhonov,total,learning_rate`
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss.reproj, self.loss.tikhonov, self.loss.total, self.learning_rate
        )
    }
}

pub const LOSS_LOG_HEADER: &str = "step,reproj,tikhonov,total,learning_rate";

fn gather(scene: &SceneSequence, pairs: &[FramePair]) -> Vec<(Image, Image)> {
    pairs
        .iter()
        .map(|&(s, t)| (scene.frames[s].clone(), scene.frames[t].clone()))
        .collect()
}

/// Builds the model from `cfg` and runs every planned batch. With
/// `prefetch`, batches are assembled on a helper thread through a
/// two-slot channel; the results do not depend on it.
pub fn train(
    cfg: &TrainConfig,
    scene: &SceneSequence,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Model> {
    cfg.validate()?;
    scene.validate()?;
    let vit = &cfg.net.vit;
    if scene.width() != vit.width || scene.height() != vit.height {
        return Err(Error::Config(format!(
            "scene frames are {}×{} but the model expects {}×{}",
            scene.width(),
            scene.height(),
            vit.width,
            vit.height
        )));
    }
    if scene.len() < 2 {
        return Err(Error::Config("training needs at least two frames".into()));
    }
    let mut model = Model::build(&cfg.net, cfg.seed)?;
    let mut adam = Adam::new();
    let plan = plan_batches(cfg, scene.len());
    let k = scene.intrinsics;
    let mut run = |b: &PlannedBatch, data: &[(Image, Image)], model: &mut Model| -> Result<()> {
        let lr = step_learning_rate(cfg, b);
        let loss = train_step(model, &mut adam, data, &k, &cfg.loss, lr, b.step)?;
        on_step(&StepRecord {
            step: b.step,
            epoch: b.epoch,
            loss,
            learning_rate: lr,
        })
    };
    if cfg.prefetch {
        std::thread::scope(|sc| -> Result<()> {
            let (tx, rx) = sync_channel::<Vec<(Image, Image)>>(2);
            let plan_ref = &plan;
            sc.spawn(move || {
                for b in plan_ref {
                    if tx.send(gather(scene, &b.pairs)).is_err() {
                        break;
                    }
                }
            });
            for b in &plan {
                let data = rx.recv().map_err(|_| Error::invalid("batch producer stopped early"))?;
                run(b, &data, &mut model)?;
            }
            Ok(())
        })?;
    } else {
        for b in &plan {
            run(b, &gather(scene, &b.pairs), &mut model)?;
        }
    }
    Ok(model)
}

/// Depth and trajectory quality of a model on a sequence.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub per_frame: Vec<DepthMetrics>,
    pub depth: DepthMetrics,
    pub predicted_depth: Vec<DepthMap>,
    pub relative_poses: Vec<PoseSE3>,
    pub trajectory: Vec<PoseSE3>,
    pub ate: AteResult,
    pub ate_rigid: AteResult,
    pub bbox_diagonal: f64,
}

pub fn evaluate(model: &Model, scene: &SceneSequence) -> Result<Evaluation> {
    let mut per_frame = Vec::with_capacity(scene.len());
    let mut predicted_depth = Vec::with_capacity(scene.len());
    for (img, gt) in scene.frames.iter().zip(&scene.depths) {
        let d = model.predict_depth(img)?;
        per_frame.push(evaluate_depth(&d, gt)?);
        predicted_depth.push(d);
    }
    let relative_poses = scene
        .frames
        .windows(2)
        .map(|w| model.predict_pose(&w[0], &w[1]).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;
    let trajectory = accumulate_trajectory(&relative_poses);
    Ok(Evaluation {
        depth: DepthMetrics::mean(&per_frame),
        per_frame,
        predicted_depth,
        ate: ate(&trajectory, &scene.poses, false)?,
        ate_rigid: ate(&trajectory, &scene.poses, true)?,
        bbox_diagonal: bbox_diagonal(&scene.poses),
        relative_poses,
        trajectory,
    })
}

/// The sequence named by `scene_dir`, or a generated one.
pub fn load_or_generate(cfg: &TrainConfig) -> Result<SceneSequence> {
    if cfg.scene_dir.is_empty() {
        Ok(generate_scene_sized(
            cfg.scene_seed,
            cfg.scene_kind,
            cfg.net.vit.width,
            cfg.net.vit.height,
            cfg.frames,
        ))
    } else {
        load_sequence(Path::new(&cfg.scene_dir))
    }
}

/// Summary of a finished run, also written as `summary.json`.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: usize,
    pub records: Vec<StepRecord>,
    pub evaluation: Evaluation,
    pub summary_json: serde_json::Value,
}

/// Mean total loss over the first and the last `window` steps.
pub fn window_means(records: &[StepRecord], window: usize) -> Option<(f64, f64)> {
    if records.len() < window || window == 0 {
        return None;
    }
    let mean = |r: &[StepRecord]| r.iter().map(|x| x.loss.total).sum::<f64>() / r.len() as f64;
    Some((mean(&records[..window]), mean(&records[records.len() - window..])))
}

/// Trains, then writes into `out`: `config.txt`, `loss_log.csv`,
/// `checkpoint.{manifest,bin}`, `depth_metrics.csv`,
/// `trajectory_pred.txt`, `trajectory_gt.txt` and `summary.json`.
pub fn run_training(cfg: &TrainConfig, out: &Path, mut progress: impl FnMut(&StepRecord)) -> Result<RunSummary> {
    cfg.validate()?;
    let scene = load_or_generate(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let mut log = std::io::BufWriter::new(fs::File::create(out.join("loss_log.csv"))?);
    writeln!(log, "# seed={} scene_seed={} config_hash={}", cfg.seed, cfg.scene_seed, cfg.hash())?;
    writeln!(log, "{LOSS_LOG_HEADER}")?;
    let mut records = Vec::new();
    let model = train(cfg, &scene, |r| {
        writeln!(log, "{}", r.csv())?;
        records.push(*r);
        progress(r);
        Ok(())
    })?;
    log.flush()?;
    drop(log);
    save_checkpoint(&out.join("checkpoint"), &Checkpoint::of(&model, cfg, records.len() as u64))?;

    let ev = evaluate(&model, &scene)?;
    let mut csv = String::from("# seed=");
    csv.push_str(&format!("{}\nframe,abs_rel,sq_rel,rmse,delta\n", cfg.seed));
    for (i, m) in ev.per_frame.iter().enumerate() {
        csv.push_str(&format!("{i},{},{},{},{}\n", m.abs_rel, m.sq_rel, m.rmse, m.delta));
    }
    fs::write(out.join("depth_metrics.csv"), csv)?;
    save_trajectory(&out.join("trajectory_pred.txt"), &ev.trajectory)?;
    save_trajectory(&out.join("trajectory_gt.txt"), &scene.poses)?;

    let windows = window_means(&records, 100);
    let summary = json!({
        "seed": cfg.seed,
        "scene_seed": cfg.scene_seed,
        "scene_kind": scene.kind.to_string(),
        "config_hash": cfg.hash(),
        "steps": records.len(),
        "first_window_loss": windows.map(|w| w.0),
        "last_window_loss": windows.map(|w| w.1),
        "final_loss": records.last().map(|r| r.loss.total),
        "abs_rel": ev.depth.abs_rel,
        "sq_rel": ev.depth.sq_rel,
        "rmse": ev.depth.rmse,
        "delta": ev.depth.delta,
        "ate": ev.ate.ate_rmse,
        "ate_scale": ev.ate.alignment.scale,
        "ate_rigid": ev.ate_rigid.ate_rmse,
        "bbox_diagonal": ev.bbox_diagonal,
        "trainable_scalars": model.partition().trainable_scalars,
        "frozen_scalars": model.partition().frozen_scalars,
    });
    fs::write(out.join("summary.json"), format!("{summary}\n"))?;
    Ok(RunSummary {
        steps: records.len(),
        records,
        evaluation: ev,
        summary_json: summary,
    })
}

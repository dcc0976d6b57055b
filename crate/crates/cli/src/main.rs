use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use serde_json::json;

use depthpose::nets::gradcheck;
use depthpose::pipeline::io::{read_depth, read_trajectory, save_sequence};
use depthpose::pipeline::{
    ate, evaluate_depth, generate_scene_sized, load_checkpoint, run_training, DepthMetrics, SceneKind, TrainConfig,
    CONFIG_KEYS,
};
use depthpose::{Error, Result};

fn cli() -> Command {
    let train = CONFIG_KEYS.iter().fold(
        Command::new("train")
            .about("Train on a generated or saved scene and write logs, checkpoint and evaluation")
            .arg(Arg::new("config").long("config").value_name("FILE").help("key = value configuration file"))
            .arg(Arg::new("out").long("out").required(true).value_name("DIR"))
            .arg(Arg::new("quiet").long("quiet").action(ArgAction::SetTrue).help("no progress on stderr")),
        |cmd, (key, help)| cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*help)),
    );
    Command::new("depthpose")
        .about("Self-supervised depth and ego-motion with adapter-tuned transformers")
        .subcommand_required(true)
        .subcommand(
            Command::new("gen-scene")
                .about("Render a synthetic sequence with ground-truth depth and poses")
                .arg(Arg::new("kind").long("kind").default_value("textured-plane"))
                .arg(Arg::new("seed").long("seed").default_value("0").value_parser(value_parser!(u64)))
                .arg(Arg::new("out").long("out").required(true).value_name("DIR"))
                .arg(Arg::new("frames").long("frames").default_value("60").value_parser(value_parser!(usize)))
                .arg(Arg::new("width").long("width").default_value("64").value_parser(value_parser!(usize)))
                .arg(Arg::new("height").long("height").default_value("64").value_parser(value_parser!(usize))),
        )
        .subcommand(train)
        .subcommand(
            Command::new("eval-depth")
                .about("Median-scaled depth metrics; files or directories of .dpth files matched by name")
                .arg(Arg::new("pred").long("pred").required(true))
                .arg(Arg::new("gt").long("gt").required(true)),
        )
        .subcommand(
            Command::new("eval-pose")
                .about("Absolute trajectory error between two TUM trajectories")
                .arg(Arg::new("pred").long("pred").required(true))
                .arg(Arg::new("gt").long("gt").required(true))
                .arg(Arg::new("rigid").long("rigid").action(ArgAction::SetTrue).help("rotation and translation only"))
                .arg(Arg::new("residuals").long("residuals").value_name("CSV").help("per-pose errors")),
        )
        .subcommand(
            Command::new("grad-check")
                .about("Compare analytic and finite-difference gradients")
                .arg(Arg::new("module").long("module").help("one fragment; all when omitted"))
                .arg(Arg::new("seed").long("seed").default_value("0").value_parser(value_parser!(u64))),
        )
        .subcommand(
            Command::new("inspect-params")
                .about("Parameter partition and trainable-count audit of a checkpoint")
                .arg(Arg::new("checkpoint").long("checkpoint").required(true)),
        )
}

fn line(v: serde_json::Value) {
    println!("{v}");
}

fn gen_scene(m: &ArgMatches) -> Result<()> {
    let kind: SceneKind = m.get_one::<String>("kind").unwrap().parse()?;
    let seed = *m.get_one::<u64>("seed").unwrap();
    let (w, h, n) = (
        *m.get_one::<usize>("width").unwrap(),
        *m.get_one::<usize>("height").unwrap(),
        *m.get_one::<usize>("frames").unwrap(),
    );
    if w == 0 || h == 0 || n == 0 {
        return Err(Error::Config("width, height and frames must be positive".into()));
    }
    let out = PathBuf::from(m.get_one::<String>("out").unwrap());
    let scene = generate_scene_sized(seed, kind, w, h, n);
    save_sequence(&out, &scene)?;
    line(json!({
        "kind": kind.to_string(),
        "seed": seed,
        "frames": n,
        "width": w,
        "height": h,
        "out": out.display().to_string(),
    }));
    Ok(())
}

fn train(m: &ArgMatches) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {path}: {e}")))?;
        cfg.apply_text(&text)?;
    }
    for (key, _) in CONFIG_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    let quiet = m.get_flag("quiet");
    let out = PathBuf::from(m.get_one::<String>("out").unwrap());
    let summary = run_training(&cfg, &out, |r| {
        if !quiet && r.step % 50 == 0 {
            eprintln!("step {} loss {:.6} lr {}", r.step, r.loss.total, r.learning_rate);
        }
    })?;
    line(summary.summary_json);
    Ok(())
}

fn depth_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "dpth"))
            .collect();
        v.sort();
        Ok(v)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn eval_depth(m: &ArgMatches) -> Result<()> {
    let pred = Path::new(m.get_one::<String>("pred").unwrap());
    let gt = Path::new(m.get_one::<String>("gt").unwrap());
    let preds = depth_files(pred)?;
    if preds.is_empty() {
        return Err(Error::Config(format!("no .dpth files in {}", pred.display())));
    }
    println!("name,abs_rel,sq_rel,rmse,delta");
    let mut all = Vec::new();
    for p in &preds {
        let g = if gt.is_dir() {
            gt.join(p.file_name().expect("listed files have names"))
        } else {
            gt.to_path_buf()
        };
        let r = evaluate_depth(&read_depth(p)?, &read_depth(&g)?)?;
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("?");
        println!("{name},{},{},{},{}", r.abs_rel, r.sq_rel, r.rmse, r.delta);
        all.push(r);
    }
    let mean = DepthMetrics::mean(&all);
    println!("mean,{},{},{},{}", mean.abs_rel, mean.sq_rel, mean.rmse, mean.delta);
    Ok(())
}

fn eval_pose(m: &ArgMatches) -> Result<()> {
    let pred = read_trajectory(Path::new(m.get_one::<String>("pred").unwrap()))?;
    let gt = read_trajectory(Path::new(m.get_one::<String>("gt").unwrap()))?;
    let rigid = m.get_flag("rigid");
    let r = ate(&pred, &gt, rigid)?;
    if let Some(path) = m.get_one::<String>("residuals") {
        let mut s = String::from("index,error\n");
        for (i, e) in r.residuals.iter().enumerate() {
            s.push_str(&format!("{i},{e}\n"));
        }
        fs::write(path, s)?;
    }
    let rot: Vec<f64> = r.alignment.rotation.transpose().iter().copied().collect();
    line(json!({
        "ate": r.ate_rmse,
        "rigid": rigid,
        "poses": pred.len(),
        "scale": r.alignment.scale,
        "rotation": rot,
        "translation": [r.alignment.translation.x, r.alignment.translation.y, r.alignment.translation.z],
    }));
    Ok(())
}

fn grad_check(m: &ArgMatches) -> Result<()> {
    let seed = *m.get_one::<u64>("seed").unwrap();
    let modules: Vec<&str> = match m.get_one::<String>("module") {
        Some(name) => vec![name.as_str()],
        None => gradcheck::MODULES.iter().map(|(n, _)| *n).collect(),
    };
    let mut failed = Vec::new();
    for name in modules {
        let r = gradcheck::run(name, seed)?;
        line(json!({
            "module": r.module,
            "max_rel_error": r.max_rel_error,
            "threshold": r.threshold,
            "passed": r.passed(),
            "scalars": r.scalars,
            "tensors": r.tensors.len(),
        }));
        if !r.passed() {
            failed.push(r.module);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn inspect_params(m: &ArgMatches) -> Result<()> {
    let ck = load_checkpoint(Path::new(m.get_one::<String>("checkpoint").unwrap()))?;
    for e in &ck.entries {
        line(json!({
            "param": e.name,
            "role": e.role.as_str(),
            "trainable": e.trainable,
            "shape": e.shape,
            "scalars": e.values.len(),
        }));
    }
    let model = ck.restore()?;
    for t in model.closed_form_terms() {
        line(json!({
            "term": t.label,
            "maps": t.multiplicity,
            "d": t.d,
            "k": t.k,
            "rank": t.rank,
            "scalars": t.scalars,
        }));
    }
    let reported = ck.scalar_count(true);
    let frozen = ck.scalar_count(false);
    let formula = model.closed_form_trainable();
    line(json!({
        "trainable": reported,
        "frozen": frozen,
        "total": reported + frozen,
        "trainable_fraction": reported as f64 / (reported + frozen) as f64,
        "closed_form_trainable": formula,
        "formula_matches": reported == formula,
        "ranks": ck.ranks,
        "scheme": ck.config.net.scheme.mode.to_string(),
        "config_hash": ck.config_hash,
        "seed": ck.config.seed,
    }));
    if reported == formula {
        Ok(())
    } else {
        Err(Error::DegeneratePrediction(format!(
            "checkpoint holds {reported} trainable scalars, closed form gives {formula}"
        )))
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("gen-scene", m)) => gen_scene(m),
        Some(("train", m)) => train(m),
        Some(("eval-depth", m)) => eval_depth(m),
        Some(("eval-pose", m)) => eval_pose(m),
        Some(("grad-check", m)) => grad_check(m),
        Some(("inspect-params", m)) => inspect_params(m),
        _ => unreachable!("a subcommand is required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

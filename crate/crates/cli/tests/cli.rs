use std::process::{Command, Output};

fn depthpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthpose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_lines(o: &Output) -> Vec<serde_json::Value> {
    stdout(o)
        .lines()
        .map(|l| serde_json::from_str(l).expect("each stdout line is JSON"))
        .collect()
}

const TINY: &[&str] = &[
    "--width", "16", "--height", "16", "--patch_size", "4", "--embed_dim", "8", "--num_heads", "2",
    "--depth_blocks", "1", "--pose_encoder_blocks", "1", "--pose_decoder_blocks", "1", "--pose_hidden", "8",
    "--base_rank", "2", "--frames", "6", "--epochs", "2", "--batch_size", "2", "--ms_ssim_scales", "1",
];

#[test]
fn generated_scene_scores_perfectly_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scene");
    let o = depthpose(&["gen-scene", "--kind", "two-plane", "--seed", "5", "--frames", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json_lines(&o)[0]["kind"], "two-plane");
    for sub in ["frames", "depth"] {
        assert_eq!(std::fs::read_dir(out.join(sub)).unwrap().count(), 4);
    }

    let depth = out.join("depth");
    let o = depthpose(&["eval-depth", "--pred", depth.to_str().unwrap(), "--gt", depth.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "name,abs_rel,sq_rel,rmse,delta");
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[5], "mean,0,0,0,1");

    let traj = out.join("trajectory.txt");
    let o = depthpose(&["eval-pose", "--pred", traj.to_str().unwrap(), "--gt", traj.to_str().unwrap(), "--rigid"]);
    assert!(o.status.success());
    let r = &json_lines(&o)[0];
    assert!(r["ate"].as_f64().unwrap() < 1e-8);
    assert_eq!(r["scale"], 1.0);
    assert_eq!(r["rigid"], true);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = depthpose(&["gen-scene", "--kind", "cube", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = depthpose(&["train", "--out", out.to_str().unwrap(), "--batch_size", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = depthpose(&["train", "--out", out.to_str().unwrap(), "--no_such_key", "1"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "0 1 2 3\n").unwrap();
    let o = depthpose(&["eval-pose", "--pred", bad.to_str().unwrap(), "--gt", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    let o = depthpose(&["grad-check", "--module", "nothing"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_flags_combine_with_flags_winning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\nseed = 9\nepochs = 5\n").unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--quiet", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = depthpose(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = &json_lines(&o)[0];
    assert_eq!(summary["seed"], 9);
    // 5 pairs in batches of 2 over 2 epochs (flag overrides the file's 5)
    assert_eq!(summary["steps"], 6);
    let written = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(written.contains("epochs = 2"));
    assert!(written.contains("seed = 9"));
    let log = std::fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("# seed=9 "));
    assert_eq!(log.lines().count(), 2 + 6);
}

#[test]
fn checkpoint_audit_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train", "--quiet", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    assert!(depthpose(&args).status.success());

    let o = depthpose(&["inspect-params", "--checkpoint", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = json_lines(&o);
    let audit = lines.last().unwrap();
    assert_eq!(audit["formula_matches"], true);
    let per_param: u64 = lines
        .iter()
        .filter(|l| l.get("param").is_some() && l["trainable"] == true)
        .map(|l| l["scalars"].as_u64().unwrap())
        .sum();
    assert_eq!(audit["trainable"].as_u64().unwrap(), per_param);
    let terms: u64 = lines
        .iter()
        .filter(|l| l.get("term").is_some())
        .map(|l| l["scalars"].as_u64().unwrap())
        .sum();
    assert_eq!(audit["closed_form_trainable"].as_u64().unwrap(), terms);
    assert!(lines
        .iter()
        .filter(|l| l["role"] == "backbone")
        .all(|l| l["trainable"] == false));

    // a truncated weight file is a parse failure
    let bin = out.join("checkpoint.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    let o = depthpose(&["inspect-params", "--checkpoint", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn grad_check_reports_every_fragment() {
    let o = depthpose(&["grad-check"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let lines = json_lines(&o);
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|l| l["passed"] == true));
}

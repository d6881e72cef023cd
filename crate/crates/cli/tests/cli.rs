use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cdgc(args: &[&str]) -> Output {
    cdgc_env(args, &[])
}

fn cdgc_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cdgc"));
    cmd.args(args).env_remove("CDGC_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run cdgc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn zero_clip(frames: usize) -> String {
    let mut s = format!("T {frames} V 25 label 0\n");
    for _ in 0..frames {
        s.push_str(&vec!["0"; 75].join(" "));
        s.push('\n');
    }
    s
}

fn score_rows(csv: &str) -> Vec<(Vec<f64>, usize)> {
    csv.lines()
        .skip(1)
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            let probs = fields[1..fields.len() - 1].iter().map(|v| v.parse().unwrap()).collect();
            (probs, fields[fields.len() - 1].parse().unwrap())
        })
        .collect()
}

#[test]
fn params_defaults_and_presets() {
    let desk = cdgc(&["params"]);
    assert_eq!(code(&desk), 0, "{}", stderr(&desk));
    let desk: usize = stdout(&desk).trim().parse().unwrap();
    let full = cdgc(&["params", "--preset", "full", "--classes", "60"]);
    assert_eq!(stdout(&full).trim(), "613133");
    let matrix = cdgc(&["params", "--preset", "full", "--classes", "60", "--variant", "cdgc_matrix"]);
    assert_eq!(stdout(&matrix).trim(), "3115970");
    assert!(desk < 613_133);
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# desk run\nvariant=cdgc_matrix\nclasses=10\n").unwrap();
    let cfg = path_str(&cfg);
    let count = |args: &[&str]| -> usize { stdout(&cdgc(args)).trim().parse().unwrap() };
    let default = count(&["params"]);
    let from_file = count(&["params", "--config", cfg]);
    let overridden = count(&["params", "--config", cfg, "--variant", "accelerated_cdgc"]);
    let fewer_classes = count(&["params", "--config", cfg, "--classes", "4"]);
    assert_ne!(default, from_file);
    assert_eq!(
        overridden,
        count(&["params", "--classes", "10", "--variant", "accelerated_cdgc"])
    );
    assert_eq!(from_file, count(&["params", "--classes", "10", "--variant", "cdgc_matrix"]));
    assert_eq!(from_file - fewer_classes, 6 * 17);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&cdgc(&["no-such-command"])), 2);
    assert_eq!(code(&cdgc(&["params", "--alpha", "1.5"])), 2);
    assert_eq!(code(&cdgc(&["params", "--variant", "gcn"])), 2);
    assert_eq!(code(&cdgc(&["gradcheck", "--scope", "everything"])), 2);
    assert_eq!(code(&cdgc(&["forward", "/nonexistent/clip.txt"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "colour=blue\n").unwrap();
    let o = cdgc(&["params", "--config", path_str(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn thread_variable_is_validated() {
    assert_eq!(code(&cdgc_env(&["params"], &[("CDGC_THREADS", "1")])), 0);
    let many = cdgc_env(&["params"], &[("CDGC_THREADS", "8")]);
    assert_eq!(code(&many), 0);
    assert!(stderr(&many).contains("one thread"));
    assert_eq!(code(&cdgc_env(&["params"], &[("CDGC_THREADS", "lots")])), 2);
    assert_eq!(code(&cdgc_env(&["params"], &[("CDGC_THREADS", "0")])), 2);
}

#[test]
fn equivcheck_passes_and_reports_alphas() {
    let o = cdgc(&["equivcheck", "--trials", "40"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("trials=40 "), "{line}");
    assert!(line.trim_end().ends_with(" pass"), "{line}");
}

#[test]
fn injected_fault_fails_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let artifact = dir.path().join("fail.txt");
    let o = cdgc(&["equivcheck", "--trials", "5", "--inject-fault", "--out", path_str(&artifact)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let text = fs::read_to_string(&artifact).unwrap();
    assert!(text.lines().next().unwrap().ends_with(" fail"), "{text}");
    assert!(text.lines().count() > 1, "no replay artifact in {text}");

    let replay = cdgc(&["equivcheck", "--replay", path_str(&artifact)]);
    assert_eq!(code(&replay), 0, "{}", stderr(&replay));
    assert!(stdout(&replay).trim_end().ends_with(" pass"));
    let replay_fault = cdgc(&["equivcheck", "--replay", path_str(&artifact), "--inject-fault"]);
    assert_eq!(code(&replay_fault), 1);
}

#[test]
fn gradcheck_emits_csv() {
    let o = cdgc(&["gradcheck", "--scope", "operator", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = stdout(&o);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("name,seed,max_relative_error"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    for row in rows {
        let err: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(err < 1e-6, "{row}");
    }
}

#[test]
fn forward_on_zero_clip_gives_distributions() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("zero.txt");
    fs::write(&clip, zero_clip(4)).unwrap();
    for variant in ["vanilla", "cdgc_matrix", "accelerated_cdgc"] {
        let o = cdgc(&["forward", "--variant", variant, path_str(&clip), path_str(&clip)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let rows = score_rows(&stdout(&o));
        assert_eq!(rows.len(), 2);
        for (probs, _) in &rows {
            assert_eq!(probs.len(), 6);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn train_then_forward_then_fuse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, "frames=8\nclasses=2\nbatch_size=4\n").unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("log.csv");
    let o = cdgc(&[
        "train",
        "--config",
        path_str(&cfg),
        "--epochs",
        "2",
        "--clips-per-class",
        "4",
        "--out",
        path_str(&ckpt),
        "--log",
        path_str(&log),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 3);

    let clip = dir.path().join("zero.txt");
    fs::write(&clip, zero_clip(8)).unwrap();
    let scores = dir.path().join("scores.csv");
    let o = cdgc(&[
        "forward",
        "--checkpoint",
        path_str(&ckpt),
        "--out",
        path_str(&scores),
        path_str(&clip),
        path_str(&clip),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let single = score_rows(&fs::read_to_string(&scores).unwrap());
    assert_eq!(single.len(), 2);
    assert_eq!(single[0].0.len(), 2);

    let fused = cdgc(&["fuse", path_str(&scores), path_str(&scores), "--weights", "0.25,0.75"]);
    assert_eq!(code(&fused), 0, "{}", stderr(&fused));
    let fused = score_rows(&stdout(&fused));
    for ((p, pred), (q, fused_pred)) in single.iter().zip(&fused) {
        assert_eq!(pred, fused_pred);
        for (a, b) in p.iter().zip(q) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(code(&cdgc(&["fuse", path_str(&scores), "--weights", "1,2"])), 2);
}

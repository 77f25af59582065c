//! End-to-end command-line tests: every subcommand, exit-code semantics,
//! determinism, and the file formats the commands exchange.

use charpose::heatmap::{dump_heatmap, GridTransform, VolumetricHeatmap, GRID_VOL, PROB_BINS};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_charpose"))
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("charpose-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawning the binary")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Train a tiny model once per test binary; several tests read from it.
fn trained_dir() -> &'static (PathBuf, PathBuf) {
    use std::sync::OnceLock;
    static DIR: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tmpdir("shared-train");
        let data = dir.join("d.jsonl");
        let out = run(bin().args([
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "3",
            "--n-per-mode",
            "2",
            "--layout",
            "two-mode",
            "--actors",
            "2",
        ]));
        assert_exit(&out, 0);
        let ckpt = dir.join("ckpt");
        let out = run(bin().args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out-dir",
            ckpt.to_str().unwrap(),
            "--seed",
            "5",
            "--embed-dim",
            "8",
            "--max-steps",
            "30",
            "--batch-size",
            "2",
            "--learning-rate",
            "0.01",
            "--warmup-steps",
            "5",
        ]));
        assert_exit(&out, 0);
        (data, ckpt)
    })
}

#[test]
fn gen_data_deterministic_and_counts() {
    let dir = tmpdir("gen");
    let a = dir.join("a.jsonl");
    let b = dir.join("b.jsonl");
    for path in [&a, &b] {
        let out = run(bin().args([
            "gen-data",
            "--out",
            path.to_str().unwrap(),
            "--seed",
            "7",
            "--n-per-mode",
            "3",
            "--layout",
            "standard",
        ]));
        assert_exit(&out, 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let text = fs::read_to_string(&a).unwrap();
    // standard layout: reach has 2 modes (6), hold 1 (3), still 1 (3).
    assert_eq!(text.lines().count(), 12);
}

#[test]
fn gen_data_usage_and_empty() {
    // Missing --out is a usage error.
    let out = run(bin().args(["gen-data", "--seed", "1"]));
    assert_exit(&out, 2);

    // Zero records still writes a valid (empty) file.
    let dir = tmpdir("gen-empty");
    let path = dir.join("empty.jsonl");
    let out = run(bin().args([
        "gen-data",
        "--out",
        path.to_str().unwrap(),
        "--n-per-mode",
        "0",
    ]));
    assert_exit(&out, 0);
    assert_eq!(fs::read_to_string(&path).unwrap(), "");
}

#[test]
fn train_writes_checkpoints_and_logs() {
    let (_, ckpt) = trained_dir();
    for stage in ["right", "left", "body"] {
        assert!(ckpt.join(format!("{stage}.ckpt")).exists());
        let log = fs::read_to_string(ckpt.join(format!("train_{stage}.csv"))).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], "step,lr,loss,wall_ms");
        assert_eq!(lines.len(), 31, "30 steps + header");
    }
}

#[test]
fn train_rejects_bad_config() {
    let (data, _) = trained_dir();
    let dir = tmpdir("badcfg");
    let out = run(bin().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out-dir",
        dir.join("x").to_str().unwrap(),
        "--batch-size",
        "0",
    ]));
    assert_exit(&out, 2);
}

/// Strip the wall-clock column, which is timing rather than state.
fn strip_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn train_is_deterministic_per_seed() {
    let (data, _) = trained_dir();
    let dir = tmpdir("det");
    let run_train = |out_dir: &Path| {
        let out = run(bin().args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--seed",
            "9",
            "--embed-dim",
            "8",
            "--max-steps",
            "2",
            "--batch-size",
            "2",
            "--warmup-steps",
            "2",
        ]));
        assert_exit(&out, 0);
    };
    let a = dir.join("a");
    let b = dir.join("b");
    run_train(&a);
    run_train(&b);
    for stage in ["right", "left", "body"] {
        let ca = fs::read(a.join(format!("{stage}.ckpt"))).unwrap();
        let cb = fs::read(b.join(format!("{stage}.ckpt"))).unwrap();
        assert_eq!(ca, cb, "checkpoints must be byte-identical");
        let la = fs::read_to_string(a.join(format!("train_{stage}.csv"))).unwrap();
        let lb = fs::read_to_string(b.join(format!("train_{stage}.csv"))).unwrap();
        assert_eq!(strip_wall(&la), strip_wall(&lb), "logs must match modulo timing");
    }
}

#[test]
fn resume_reproduces_next_step_loss() {
    let (data, ckpt) = trained_dir();
    let dir = tmpdir("resume");
    let resume_once = |out_dir: &Path| {
        let out = run(bin().args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--resume",
            ckpt.to_str().unwrap(),
            "--seed",
            "5",
            "--embed-dim",
            "8",
            "--max-steps",
            "1",
            "--batch-size",
            "2",
            "--warmup-steps",
            "2",
        ]));
        assert_exit(&out, 0);
    };
    let a = dir.join("a");
    let b = dir.join("b");
    resume_once(&a);
    resume_once(&b);
    for stage in ["right", "left", "body"] {
        let la = fs::read_to_string(a.join(format!("train_{stage}.csv"))).unwrap();
        let lb = fs::read_to_string(b.join(format!("train_{stage}.csv"))).unwrap();
        assert_eq!(strip_wall(&la), strip_wall(&lb), "resumed first step must reproduce");
    }
}

#[test]
fn predict_defaults_and_reproducibility() {
    let (data, ckpt) = trained_dir();
    let dir = tmpdir("predict");
    let predict = |out_path: &Path, extra: &[&str]| {
        let mut cmd = bin();
        cmd.args([
            "predict",
            "--data",
            data.to_str().unwrap(),
            "--checkpoints",
            ckpt.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
            "--seed",
            "21",
        ]);
        cmd.args(extra);
        let out = run(&mut cmd);
        assert_exit(&out, 0);
    };
    // Fast refinement for tests.
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, r#"{"refine_iterations": 25, "seed": 21}"#).unwrap();

    let a = dir.join("a.jsonl");
    predict(&a, &["--config", cfg.to_str().unwrap()]);
    let text = fs::read_to_string(&a).unwrap();
    let records = fs::read_to_string(&data).unwrap().lines().count();
    assert_eq!(text.lines().count(), records * 6, "k defaults to 6");

    // Same seed, same bytes.
    let b = dir.join("b.jsonl");
    predict(&b, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    // k override and --no-refine both work; skipping refinement changes
    // the poses.
    let k2 = dir.join("k2.jsonl");
    predict(&k2, &["--k", "2", "--config", cfg.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(&k2).unwrap().lines().count(), records * 2);
    let raw = dir.join("raw.jsonl");
    predict(&raw, &["--no-refine"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&raw).unwrap());

    // Missing checkpoints are a runtime failure.
    let out = run(bin().args([
        "predict",
        "--data",
        data.to_str().unwrap(),
        "--checkpoints",
        dir.join("nothing").to_str().unwrap(),
        "--out",
        dir.join("x.jsonl").to_str().unwrap(),
    ]));
    assert_exit(&out, 1);
}

#[test]
fn eval_exact_predictions_and_mismatch() {
    let (data, _) = trained_dir();
    let dir = tmpdir("eval");
    // Predictions that exactly equal the targets.
    let records = charpose::data::load_dataset_file(&data).unwrap();
    let sets: Vec<(String, Vec<charpose::skeleton::Pose>)> = records
        .iter()
        .map(|r| (r.id.clone(), vec![r.target_pose.clone()]))
        .collect();
    let preds = dir.join("exact.jsonl");
    let mut buf = Vec::new();
    charpose::sampler::write_predictions(&sets, &mut buf).unwrap();
    fs::write(&preds, buf).unwrap();

    let report_path = dir.join("report.json");
    let csv_path = dir.join("per_joint.csv");
    let out = run(bin().args([
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
        "--per-joint-csv",
        csv_path.to_str().unwrap(),
    ]));
    assert_exit(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["mpjpe_mean"].as_f64().unwrap(), 0.0);
    assert_eq!(report["pct_below_015"].as_f64().unwrap(), 100.0);
    assert_eq!(report["pct_below_025"].as_f64().unwrap(), 100.0);
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 26);

    // Dropping one record's predictions is an id mismatch -> exit 1.
    let partial = dir.join("partial.jsonl");
    let text = fs::read_to_string(&preds).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    fs::write(&partial, lines.join("\n")).unwrap();
    let out = run(bin().args([
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--predictions",
        partial.to_str().unwrap(),
    ]));
    assert_exit(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}

#[test]
fn eval_zero_velocity_baseline() {
    // Hand-built dataset where the target equals the input: the baseline
    // error is exactly zero.
    let dir = tmpdir("eval-zv");
    let records = charpose::data::synth_generate(
        4,
        2,
        &charpose::data::LayoutSpec {
            actors: vec!["a".into()],
            actions: vec![charpose::data::ActionSpec {
                name: "still".into(),
                modes: vec![charpose::data::PoseMode::Identity],
            }],
            jitter: 0.0,
        },
    )
    .unwrap();
    let data = dir.join("still.jsonl");
    let mut buf = Vec::new();
    charpose::data::save_dataset(&records, &mut buf).unwrap();
    fs::write(&data, buf).unwrap();

    let report_path = dir.join("report.json");
    let out = run(bin().args([
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--baseline",
        "zero-velocity",
        "--out",
        report_path.to_str().unwrap(),
    ]));
    assert_exit(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["mpjpe_mean"].as_f64().unwrap(), 0.0);

    // Average-pose baselines run end to end as well.
    let out = run(bin().args([
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--baseline",
        "avg-per-action",
    ]));
    assert_exit(&out, 0);
}

#[test]
fn eval_nll_of_uniform_heatmap_dumps() {
    let (data, _) = trained_dir();
    let dir = tmpdir("eval-nll");
    let records = charpose::data::load_dataset_file(&data).unwrap();
    let maps_dir = dir.join("maps");
    fs::create_dir_all(&maps_dir).unwrap();
    let t = GridTransform::new([0.0; 3], 0.125);
    let uniform = VolumetricHeatmap::logits(t, vec![0.0; GRID_VOL * PROB_BINS]).unwrap();
    for r in &records {
        for j in 0..25 {
            let mut f = fs::File::create(maps_dir.join(format!("{}_j{j:02}.chm", r.id))).unwrap();
            dump_heatmap(&uniform, &mut f).unwrap();
        }
    }
    let sets: Vec<(String, Vec<charpose::skeleton::Pose>)> = records
        .iter()
        .map(|r| (r.id.clone(), vec![r.target_pose.clone()]))
        .collect();
    let preds = dir.join("preds.jsonl");
    let mut buf = Vec::new();
    charpose::sampler::write_predictions(&sets, &mut buf).unwrap();
    fs::write(&preds, buf).unwrap();

    let report_path = dir.join("report.json");
    let out = run(bin().args([
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
        "--heatmaps",
        maps_dir.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]));
    assert_exit(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let nll = report["nll_mean"].as_f64().unwrap();
    assert!(
        (nll - (GRID_VOL as f64).ln()).abs() < 1e-9,
        "uniform heatmaps give ln(4096), got {nll}"
    );
}

#[test]
fn inspect_slices_and_redump() {
    let dir = tmpdir("inspect");
    // A blob heatmap with a known peak.
    let t = GridTransform::new([0.0; 3], 0.125);
    let h = charpose::heatmap::gaussian_target(t, [4, 8, 12]).unwrap();
    let path = dir.join("h.chm");
    let mut f = fs::File::create(&path).unwrap();
    dump_heatmap(&h, &mut f).unwrap();
    drop(f);

    let slices = dir.join("slices");
    let redump = dir.join("again.chm");
    let out = run(bin().args([
        "inspect",
        "--heatmap",
        path.to_str().unwrap(),
        "--pgm-dir",
        slices.to_str().unwrap(),
        "--axis",
        "x",
        "--redump",
        redump.to_str().unwrap(),
    ]));
    assert_exit(&out, 0);
    let files: Vec<_> = fs::read_dir(&slices).unwrap().collect();
    assert_eq!(files.len(), 16, "one slice per grid layer");
    let img = fs::read(slices.join("slice_x04.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n16 16\n255\n"));
    let pixels = &img[img.len() - 256..];
    assert_eq!(pixels[8 * 16 + 12], 255, "peak voxel renders at full white");
    assert_eq!(fs::read(&path).unwrap(), fs::read(&redump).unwrap(), "redump is bit-exact");

    // Survivor overlay marks the blob's peak.
    let overlay_dir = dir.join("overlay");
    let out = run(bin().args([
        "inspect",
        "--heatmap",
        path.to_str().unwrap(),
        "--pgm-dir",
        overlay_dir.to_str().unwrap(),
        "--axis",
        "x",
        "--overlay-nms",
    ]));
    assert_exit(&out, 0);
    let img = fs::read(overlay_dir.join("slice_x04.pgm")).unwrap();
    let pixels = &img[img.len() - 256..];
    assert_eq!(pixels[8 * 16 + 12], 255, "survivor voxel marked");
    assert_eq!(pixels.iter().filter(|&&p| p == 255).count(), 1);

    // A missing file is a runtime failure.
    let out = run(bin().args(["inspect", "--heatmap", dir.join("no.chm").to_str().unwrap()]));
    assert_exit(&out, 1);
}

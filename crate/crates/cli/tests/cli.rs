use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use confex::conformal::read_mask_records;
use confex::conformity::write_scores_jsonl;
use confex::evaluation::Scenario;
use confex::tensor::{read_tensor, write_tensor};
use confex::{ConformityKind, ConformityScore, PixelMask};
use serde_json::json;
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
    manifest: PathBuf,
    predictor: String,
}

impl Fixture {
    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut full: Vec<String> = vec![
            "--manifest".into(),
            self.manifest.display().to_string(),
            "--predictor".into(),
            self.predictor.clone(),
            "--out".into(),
            self.out().display().to_string(),
            "--tau-quantiles".into(),
            "20".into(),
        ];
        if !args.contains(&"--slic-k") {
            full.extend(["--slic-k".into(), "9".into()]);
        }
        full.extend(args.iter().map(|s| s.to_string()));
        confex(&full)
    }
}

fn confex<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confex"))
        .args(args)
        .output()
        .expect("spawn confex")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

fn write_json(path: &Path, value: &serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

/// Witness-scenario images and attributions exported as a manifest.
fn fixture(count: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let s = Scenario::witness();
    let spec_path = dir.path().join("model.json");
    fs::write(&spec_path, serde_json::to_string(&s.predictor_spec()).unwrap()).unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    let mut items = Vec::new();
    for inst in s.sample_many(7, count).unwrap() {
        let img = format!("data/{}.img.cfxt", inst.id);
        let att = format!("data/{}.att.cfxt", inst.id);
        write_tensor(&inst.image, dir.path().join(&img)).unwrap();
        write_tensor(&inst.attribution, dir.path().join(&att)).unwrap();
        items.push(json!({"instance_id": inst.id, "image_path": img, "attribution_path": att}));
    }
    let manifest = dir.path().join("manifest.json");
    write_json(&manifest, &json!({"num_classes": 2, "items": items}));
    Fixture {
        predictor: format!("synthetic:{}", spec_path.display()),
        manifest,
        dir,
    }
}

#[test]
fn full_pipeline_and_evaluate_from_disk() {
    let f = fixture(40);
    for step in ["scores", "calibrate", "explain"] {
        assert_ok(&f.run(&["--kind", "superpixel", "--epsilon", "0.1", step]));
    }
    let out = f.run(&["--kind", "superpixel", "--epsilon", "0.1", "evaluate"]);
    assert_ok(&out);
    assert!(stdout(&out).contains("fidelity"), "{}", stdout(&out));

    let records = read_mask_records(f.out().join("masks/masks.jsonl")).unwrap();
    assert_eq!(records.len(), 20);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.out().join("report.json")).unwrap()).unwrap();
    let matches = records.iter().filter(|r| r.matches_full).count() as f64;
    let fidelity = report["fidelity"].as_f64().unwrap();
    assert!((fidelity - matches / records.len() as f64).abs() < 1e-12);

    let render = f.run(&["render"]);
    assert_ok(&render);
    let text = stdout(&render);
    assert_eq!(text.lines().filter(|l| l.contains("S_E size: ")).count(), 20);
    assert!(f.out().join("render/captions.txt").is_file());
}

#[test]
fn segment_is_idempotent_and_keyed_by_parameters() {
    let f = fixture(6);
    let first = f.run(&["segment"]);
    assert_ok(&first);
    assert!(stdout(&first).contains("written"));
    let again = f.run(&["segment"]);
    assert_ok(&again);
    assert!(stdout(&again).contains("up to date"));

    let other = f.run(&["--slic-k", "4", "segment"]);
    assert_ok(&other);
    assert!(stdout(&other).contains("written"));
    let dirs = fs::read_dir(f.out().join("segments")).unwrap().count();
    assert_eq!(dirs, 2);
}

#[test]
fn empty_manifest_is_a_usage_error() {
    let f = fixture(1);
    write_json(&f.manifest, &json!({"num_classes": 2, "items": []}));
    let out = f.run(&["scores"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no instances"), "{}", stderr(&out));
}

#[test]
fn bad_flags_are_usage_errors() {
    let f = fixture(1);
    assert_eq!(f.run(&["--epsilon", "2", "scores"]).status.code(), Some(1));
    assert_eq!(f.run(&["--kind", "fuzzy", "scores"]).status.code(), Some(1));
    assert_eq!(confex(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn missing_predictor_server_is_a_transport_error() {
    let f = fixture(4);
    let out = confex(&[
        "--manifest",
        f.manifest.to_str().unwrap(),
        "--predictor",
        "subprocess:/nonexistent/model-server",
        "--out",
        f.out().to_str().unwrap(),
        "--kind",
        "pixelwise",
        "scores",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn changed_segmentation_is_a_data_error() {
    let f = fixture(12);
    for step in ["scores", "calibrate"] {
        assert_ok(&f.run(&["--kind", "superpixel", step]));
    }
    let out = f.run(&["--kind", "superpixel", "--slic-k", "4", "explain"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("segmentation"));
}

#[test]
fn changed_split_is_a_data_error() {
    let f = fixture(12);
    for step in ["scores", "calibrate"] {
        assert_ok(&f.run(&["--kind", "pixelwise", step]));
    }
    let out = f.run(&["--kind", "pixelwise", "--seed", "5", "explain"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

fn write_scores(out: &Path, kind: ConformityKind, values: &[f64]) {
    write_scores_with(out, kind, values, true)
}

fn write_scores_with(out: &Path, kind: ConformityKind, values: &[f64], valid: bool) {
    fs::create_dir_all(out).unwrap();
    let scores: Vec<_> = values
        .iter()
        .enumerate()
        .map(|(i, v)| ConformityScore {
            instance_id: format!("s{i:02}"),
            kind,
            value: *v,
            valid,
        })
        .collect();
    write_scores_jsonl(&scores, out.join("scores.jsonl")).unwrap();
    write_json(
        &out.join("scores.meta.json"),
        &json!({
            "kind": kind.name(),
            "rho": kind.rho(),
            "tau_mode": {"mode": "quantile_levels", "q": 100},
            "slic_digest": null,
            "manifest_digest": "m",
            "split_seed": 0,
            "calibration_fraction": 0.5,
            "count": values.len(),
            "invalid": if valid { 0 } else { values.len() }
        }),
    );
}

fn artifact_threshold(out: &Path) -> serde_json::Value {
    let art: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("artifact.json")).unwrap()).unwrap();
    art["threshold"].clone()
}

#[test]
fn calibrate_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("px");
    let values: Vec<f64> = (1..=19).map(|i| i as f64 / 20.0).collect();
    write_scores(&out, ConformityKind::Pixelwise, &values);
    let o = confex(&["--out", out.to_str().unwrap(), "--epsilon", "0.05", "calibrate"]);
    assert_ok(&o);
    assert_eq!(artifact_threshold(&out).as_f64(), Some(0.1));

    let out = dir.path().join("sum");
    let values: Vec<f64> = (1..=19).map(f64::from).collect();
    write_scores(&out, ConformityKind::SummedValues, &values);
    let o = confex(&["--out", out.to_str().unwrap(), "--epsilon", "0.05", "calibrate"]);
    assert_ok(&o);
    assert_eq!(artifact_threshold(&out).as_f64(), Some(18.0));
}

#[test]
fn sentinel_threshold_warns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("few");
    write_scores_with(&out, ConformityKind::Pixelwise, &[f64::NEG_INFINITY; 3], false);
    let o = confex(&["--out", out.to_str().unwrap(), "--epsilon", "0.01", "calibrate"]);
    assert_ok(&o);
    assert!(stderr(&o).contains("sentinel"), "{}", stderr(&o));
    assert!(stdout(&o).contains("(sentinel)"));
}

#[test]
fn render_caption_for_a_known_mask() {
    let f = fixture(1);
    let id = {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&f.manifest).unwrap()).unwrap();
        m["items"][0]["instance_id"].as_str().unwrap().to_owned()
    };
    let masks = f.out().join("masks");
    fs::create_dir_all(&masks).unwrap();
    let pixels: Vec<(usize, usize)> = (0..20).map(|p| (p / 12, p % 12)).collect();
    let keep = PixelMask::from_pixels(12, 12, &pixels).unwrap();
    write_tensor(&keep, masks.join(confex::conformal::mask_file_name(&id))).unwrap();
    fs::write(
        masks.join("masks.jsonl"),
        format!(
            "{}\n",
            json!({"instance_id": id, "size_fraction": keep.fraction(), "reproduced_class": 1, "matches_full": true})
        ),
    )
    .unwrap();
    let o = f.run(&["render", "--instance", &id]);
    assert_ok(&o);
    assert!(stdout(&o).contains("S_E size: 13.9%"), "{}", stdout(&o));
    let png = fs::read_dir(f.out().join("render"))
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| e.path().extension().is_some_and(|x| x == "png"))
        .expect("overlay png");
    let bytes = fs::read(png.path()).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
    let back: PixelMask = read_tensor(masks.join(confex::conformal::mask_file_name(&id))).unwrap();
    assert_eq!(back, keep);
}

#[test]
fn sweep_and_charts() {
    let f = fixture(30);
    let o = f.run(&["--epsilon", "0.05,0.1,0.2", "evaluate", "--sweep"]);
    assert_ok(&o);
    assert_eq!(stdout(&o).lines().count(), 12);
    let csv = fs::read_to_string(f.out().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    let o = f.run(&["render", "--sweep"]);
    assert_ok(&o);
    assert!(f.out().join("render/sweep_size.png").is_file());
    assert!(f.out().join("render/sweep_fidelity.png").is_file());
}

#[test]
fn small_simulation_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = confex(&[
        "--out",
        out.to_str().unwrap(),
        "--kind",
        "pixelwise",
        "--epsilon",
        "0.1",
        "simulate",
        "--seeds",
        "2",
        "--k-calibration",
        "60",
        "--n-test",
        "100",
    ]);
    assert_ok(&o);
    let csv = fs::read_to_string(out.join("coverage.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("seed,kind,rho,epsilon"));
    assert_eq!(lines.count(), 2);
}

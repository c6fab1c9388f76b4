//! segment, scores, calibrate, explain and evaluate.

use std::fs;
use std::path::{Path, PathBuf};

use confex::conformal::{calibrate_threshold, explain_all, read_mask_records, write_masks, CalibrationArtifact};
use confex::conformity::{read_scores_jsonl, score_all, write_scores_jsonl};
use confex::dataset::{load_manifest, split_indices};
use confex::digest::json_digest;
use confex::evaluation::{confidence_sweep, evaluate_records, format_mean_std, write_sweep_csv};
use confex::segmentation::{slic_segment, write_segmentation, SlicParams};
use confex::{ConformityKind, DatasetManifest, Instance, PredictorHandle, TauGridMode};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::exit::{data, usage, CliResult};

pub const SCORES_FILE: &str = "scores.jsonl";
pub const SCORES_META_FILE: &str = "scores.meta.json";
pub const SPLIT_FILE: &str = "split.json";
pub const ARTIFACT_FILE: &str = "artifact.json";
pub const MASKS_DIR: &str = "masks";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.csv";

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| usage(format!("{}: {e} ({hint})", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| data(format!("{}: {e}", path.display())))
}

pub fn open_manifest(cfg: &RunConfig) -> CliResult<DatasetManifest> {
    let manifest = load_manifest(cfg.manifest_path()?)?;
    if manifest.is_empty() {
        return Err(usage("no instances in manifest"));
    }
    Ok(manifest)
}

pub fn open_predictor(cfg: &RunConfig) -> CliResult<PredictorHandle> {
    Ok(PredictorHandle::from_spec_str(cfg.predictor_spec()?)?)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct SegmentKey {
    slic: SlicParams,
    manifest_digest: String,
}

/// Where the segmentation for the current SLIC parameters lives.
pub struct Segments {
    pub dir: PathBuf,
    pub digest: String,
}

impl Segments {
    pub fn locate(cfg: &RunConfig, manifest: &DatasetManifest) -> Self {
        let key = SegmentKey {
            slic: cfg.slic,
            manifest_digest: manifest.digest.clone(),
        };
        let digest = json_digest(&key);
        Self {
            dir: cfg.out.join("segments").join(&digest[..16]),
            digest,
        }
    }

    pub fn path_for(&self, instance_id: &str) -> PathBuf {
        self.dir.join(format!("{}.seg.cfxt", safe_name(instance_id)))
    }
}

/// Segments every manifest image without its own segmentation. Returns
/// false when the outputs for these parameters already exist.
pub fn cmd_segment(cfg: &RunConfig) -> CliResult<bool> {
    let manifest = open_manifest(cfg)?;
    let (_, fresh) = ensure_segments(cfg, &manifest)?;
    Ok(fresh)
}

fn ensure_segments(cfg: &RunConfig, manifest: &DatasetManifest) -> CliResult<(Segments, bool)> {
    let segs = Segments::locate(cfg, manifest);
    let key = SegmentKey {
        slic: cfg.slic,
        manifest_digest: manifest.digest.clone(),
    };
    let params_path = segs.dir.join("params.json");
    let pending: Vec<_> = manifest
        .items
        .iter()
        .filter(|it| it.segmentation_path.is_none())
        .collect();
    let complete = params_path.is_file()
        && read_json::<SegmentKey>(&params_path, "segment parameters").ok().as_ref() == Some(&key)
        && pending.iter().all(|it| segs.path_for(&it.instance_id).is_file());
    if complete {
        info!("segmentation {} is up to date", &segs.digest[..16]);
        return Ok((segs, false));
    }
    fs::create_dir_all(&segs.dir).map_err(|e| data(format!("{}: {e}", segs.dir.display())))?;
    pending.par_iter().try_for_each(|item| -> CliResult<()> {
        let img = confex::tensor::read_tensor(manifest.resolve(&item.image_path))?;
        let seg = slic_segment(&img, &cfg.slic)?;
        write_segmentation(&seg, segs.path_for(&item.instance_id))?;
        Ok(())
    })?;
    write_json(&key, &params_path)?;
    info!("segmented {} images into {}", pending.len(), segs.dir.display());
    Ok((segs, true))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitRecord {
    pub seed: u64,
    pub calibration_fraction: f64,
    pub manifest_digest: String,
    pub calibration: Vec<String>,
    pub test: Vec<String>,
}

fn make_split(cfg: &RunConfig, manifest: &DatasetManifest) -> CliResult<(Vec<usize>, Vec<usize>, SplitRecord)> {
    let (cal, test) = split_indices(manifest.len(), cfg.calibration_fraction, cfg.seed)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| manifest.items[i].instance_id.clone()).collect();
    let record = SplitRecord {
        seed: cfg.seed,
        calibration_fraction: cfg.calibration_fraction,
        manifest_digest: manifest.digest.clone(),
        calibration: ids(&cal),
        test: ids(&test),
    };
    Ok((cal, test, record))
}

/// Loads the given items, attaching segmentations when `kinds` need them.
fn load_instances(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    indices: &[usize],
    needs_segments: bool,
) -> CliResult<(Vec<Instance>, Option<String>)> {
    let segs = if needs_segments {
        Some(ensure_segments(cfg, manifest)?.0)
    } else {
        None
    };
    let instances = indices
        .par_iter()
        .map(|&i| {
            let fallback = segs.as_ref().map(|s| s.path_for(&manifest.items[i].instance_id));
            manifest.load_instance(i, fallback.as_deref())
        })
        .collect::<confex::Result<Vec<_>>>()?;
    let digest = segs.map(|s| s.digest);
    Ok((instances, digest))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoresMeta {
    pub kind: String,
    pub rho: Option<f64>,
    pub tau_mode: TauGridMode,
    pub slic_digest: Option<String>,
    pub manifest_digest: String,
    pub split_seed: u64,
    pub calibration_fraction: f64,
    pub count: usize,
    pub invalid: usize,
}

pub fn cmd_scores(cfg: &RunConfig) -> CliResult<ScoresMeta> {
    let manifest = open_manifest(cfg)?;
    let h = open_predictor(cfg)?;
    let (cal, _, split) = make_split(cfg, &manifest)?;
    let (instances, slic_digest) = load_instances(cfg, &manifest, &cal, cfg.kind.needs_segmentation())?;
    let baseline = manifest.load_baseline()?;
    let scores = score_all(&instances, cfg.kind, &h, cfg.tau_mode, &baseline)?;
    fs::create_dir_all(&cfg.out).map_err(|e| data(format!("{}: {e}", cfg.out.display())))?;
    write_scores_jsonl(&scores, cfg.out.join(SCORES_FILE))?;
    let meta = ScoresMeta {
        kind: cfg.kind.name().to_owned(),
        rho: cfg.kind.rho(),
        tau_mode: cfg.tau_mode,
        slic_digest,
        manifest_digest: manifest.digest.clone(),
        split_seed: cfg.seed,
        calibration_fraction: cfg.calibration_fraction,
        count: scores.len(),
        invalid: scores.iter().filter(|s| !s.valid).count(),
    };
    write_json(&meta, &cfg.out.join(SCORES_META_FILE))?;
    write_json(&split, &cfg.out.join(SPLIT_FILE))?;
    Ok(meta)
}

pub fn cmd_calibrate(cfg: &RunConfig) -> CliResult<CalibrationArtifact> {
    let epsilon = cfg.single_epsilon()?;
    let scores_path = cfg.out.join(SCORES_FILE);
    if !scores_path.is_file() {
        return Err(usage(format!("{} not found; run `confex scores` first", scores_path.display())));
    }
    let scores = read_scores_jsonl(&scores_path)?;
    let meta: ScoresMeta = read_json(&cfg.out.join(SCORES_META_FILE), "run `confex scores` first")?;
    let art = calibrate_threshold(&scores, epsilon)?.with_provenance(
        meta.tau_mode,
        meta.slic_digest,
        Some(meta.manifest_digest),
    );
    art.save(cfg.out.join(ARTIFACT_FILE))?;
    Ok(art)
}

pub fn load_artifact(cfg: &RunConfig) -> CliResult<CalibrationArtifact> {
    let path = cfg.out.join(ARTIFACT_FILE);
    if !path.is_file() {
        return Err(usage(format!("{} not found; run `confex calibrate` first", path.display())));
    }
    Ok(CalibrationArtifact::load(path)?)
}

pub struct ExplainSummary {
    pub count: usize,
    pub matches: usize,
}

pub fn cmd_explain(cfg: &RunConfig) -> CliResult<ExplainSummary> {
    let art = load_artifact(cfg)?;
    let manifest = open_manifest(cfg)?;
    let (_, test, split) = make_split(cfg, &manifest)?;
    let split_path = cfg.out.join(SPLIT_FILE);
    if split_path.is_file() {
        let recorded: SplitRecord = read_json(&split_path, "split record")?;
        if recorded != split {
            return Err(data(format!(
                "{} does not match the split implied by the current manifest and seed",
                split_path.display()
            )));
        }
    }
    let (instances, slic_digest) = load_instances(cfg, &manifest, &test, art.kind.needs_segmentation())?;
    art.check_provenance(slic_digest.as_deref(), Some(&manifest.digest))?;
    let h = open_predictor(cfg)?;
    let baseline = manifest.load_baseline()?;
    let masks = explain_all(&instances, &art, &h, &baseline)?;
    write_masks(&masks, cfg.out.join(MASKS_DIR))?;
    Ok(ExplainSummary {
        count: masks.len(),
        matches: masks.iter().filter(|m| m.matches_full).count(),
    })
}

pub fn cmd_evaluate(cfg: &RunConfig) -> CliResult<String> {
    let art = load_artifact(cfg)?;
    let meta = cfg.out.join(MASKS_DIR).join("masks.jsonl");
    if !meta.is_file() {
        return Err(usage(format!("{} not found; run `confex explain` first", meta.display())));
    }
    let report = evaluate_records(read_mask_records(&meta)?, &art)?;
    write_json(&report, &cfg.out.join(REPORT_FILE))?;
    Ok(format!(
        "{} eps={}: fidelity {:.4} on {} test instances, size {}",
        art.kind,
        art.epsilon,
        report.fidelity,
        report.n_test,
        report.size_summary()
    ))
}

pub fn cmd_sweep(cfg: &RunConfig) -> CliResult<Vec<confex::evaluation::SweepRow>> {
    let manifest = open_manifest(cfg)?;
    let h = open_predictor(cfg)?;
    let kinds: Vec<ConformityKind> = if cfg.kind_given {
        vec![cfg.kind]
    } else {
        let rho = cfg.kind.rho().unwrap_or(confex::conformity::DEFAULT_RHO);
        ConformityKind::NAMES
            .iter()
            .map(|n| ConformityKind::parse(n, rho))
            .collect::<confex::Result<_>>()?
    };
    let needs = kinds.iter().any(ConformityKind::needs_segmentation);
    let (cal_idx, test_idx, _) = make_split(cfg, &manifest)?;
    let (cal, _) = load_instances(cfg, &manifest, &cal_idx, needs)?;
    let (test, _) = load_instances(cfg, &manifest, &test_idx, needs)?;
    let baseline = manifest.load_baseline()?;
    let rows = confidence_sweep(&cal, &test, &h, &kinds, &cfg.epsilons, cfg.tau_mode, &baseline)?;
    fs::create_dir_all(&cfg.out).map_err(|e| data(format!("{}: {e}", cfg.out.display())))?;
    write_sweep_csv(&rows, cfg.out.join(SWEEP_FILE))?;
    Ok(rows)
}

pub fn sweep_line(r: &confex::evaluation::SweepRow) -> String {
    format!(
        "{:<10} eps={:<5} fidelity {:.4}  size {}",
        r.kind,
        r.epsilon,
        r.fidelity,
        format_mean_std(r.mean_size, r.std_size)
    )
}

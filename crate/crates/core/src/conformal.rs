//! Split-conformal calibration of the selection threshold and construction of
//! explanation masks at inference time.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformity::{
    select_pixels, select_segments, ConformityKind, ConformityScore, RankedScores, TauGridMode, DEFAULT_RHO,
};
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::predictor::{apply_baseline_mask, Baseline, Predictor};
use crate::segmentation::SegmentationMap;
use crate::tensor::{write_tensor, AttributionMap, ImageTensor, PixelMask};

/// `(count + 1) / (k + 1) >= 1 - eps`
fn meets_level(count: usize, k: usize, epsilon: f64) -> bool {
    (count + 1) as f64 / (k + 1) as f64 >= 1.0 - epsilon
}

/// Largest score `s` with `(#{v >= s} + 1) / (k + 1) >= 1 - eps`.
pub fn lower_conformal_quantile(scores: &[f64], epsilon: f64) -> Option<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let mut best = None;
    for (i, s) in sorted.iter().enumerate() {
        if i > 0 && sorted[i - 1] == *s {
            continue;
        }
        if meets_level(k - i, k, epsilon) {
            best = Some(*s);
        } else {
            break;
        }
    }
    best
}

/// Smallest score `s` with `(#{v <= s} + 1) / (k + 1) >= 1 - eps`.
pub fn upper_conformal_quantile(scores: &[f64], epsilon: f64) -> Option<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    (0..k)
        .filter(|&i| i + 1 == k || sorted[i + 1] != sorted[i])
        .find(|&i| meets_level(i + 1, k, epsilon))
        .map(|i| sorted[i])
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationArtifact {
    pub kind: ConformityKind,
    pub epsilon: f64,
    pub k: usize,
    pub threshold: f64,
    pub tau_mode: TauGridMode,
    pub slic_digest: Option<String>,
    pub manifest_digest: Option<String>,
    pub sentinel: bool,
}

#[derive(Serialize, Deserialize)]
struct ArtifactRecord {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    epsilon: f64,
    k: usize,
    #[serde(with = "crate::json_float")]
    threshold: f64,
    tau_mode: String,
    #[serde(default)]
    q: Option<usize>,
    #[serde(default)]
    slic_digest: Option<String>,
    #[serde(default)]
    manifest_digest: Option<String>,
    sentinel: bool,
}

impl CalibrationArtifact {
    pub fn confidence(&self) -> f64 {
        1.0 - self.epsilon
    }

    pub fn with_provenance(
        mut self,
        tau_mode: TauGridMode,
        slic_digest: Option<String>,
        manifest_digest: Option<String>,
    ) -> Self {
        self.tau_mode = tau_mode;
        self.slic_digest = slic_digest;
        self.manifest_digest = manifest_digest;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = ArtifactRecord {
            kind: self.kind.name().to_owned(),
            rho: self.kind.rho(),
            epsilon: self.epsilon,
            k: self.k,
            threshold: self.threshold,
            tau_mode: self.tau_mode.name().to_owned(),
            q: self.tau_mode.q(),
            slic_digest: self.slic_digest.clone(),
            manifest_digest: self.manifest_digest.clone(),
            sentinel: self.sentinel,
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: ArtifactRecord = serde_json::from_str(text)?;
        let art = Self {
            kind: ConformityKind::parse(&rec.kind, rec.rho.unwrap_or(DEFAULT_RHO))?,
            epsilon: rec.epsilon,
            k: rec.k,
            threshold: rec.threshold,
            tau_mode: TauGridMode::from_parts(&rec.tau_mode, rec.q)?,
            slic_digest: rec.slic_digest,
            manifest_digest: rec.manifest_digest,
            sentinel: rec.sentinel,
        };
        check_epsilon(art.epsilon)?;
        if art.k == 0 {
            return Err(Error::invalid("artifact has k = 0"));
        }
        Ok(art)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fails when the artifact was produced under a different manifest or
    /// segmentation configuration. `None` on either side skips that check.
    pub fn check_provenance(&self, slic_digest: Option<&str>, manifest_digest: Option<&str>) -> Result<()> {
        if let (Some(a), Some(b)) = (self.manifest_digest.as_deref(), manifest_digest) {
            if a != b {
                return Err(Error::Manifest(format!(
                    "artifact was calibrated on manifest {a}, not {b}"
                )));
            }
        }
        if self.kind.needs_segmentation() {
            if let (Some(a), Some(b)) = (self.slic_digest.as_deref(), slic_digest) {
                if a != b {
                    return Err(Error::Manifest(format!(
                        "artifact was calibrated with segmentation {a}, not {b}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("epsilon must lie in (0,1), got {epsilon}")))
    }
}

/// Conformal threshold from calibration scores (invalid scores included).
pub fn calibrate_threshold(scores: &[ConformityScore], epsilon: f64) -> Result<CalibrationArtifact> {
    check_epsilon(epsilon)?;
    let first = scores
        .first()
        .ok_or_else(|| Error::invalid("no calibration scores"))?;
    let kind = first.kind;
    if let Some(other) = scores.iter().find(|s| s.kind != kind) {
        return Err(Error::invalid(format!(
            "calibration scores mix kinds {kind} and {}",
            other.kind
        )));
    }
    let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    let picked = if kind.is_threshold() {
        lower_conformal_quantile(&values, epsilon)
    } else {
        upper_conformal_quantile(&values, epsilon)
    };
    let threshold = picked.unwrap_or_else(|| kind.invalid_sentinel());
    let sentinel = !threshold.is_finite();
    if sentinel {
        warn!(
            "calibrated {kind} threshold at eps={epsilon} with k={} is a sentinel; explanations will keep every pixel",
            scores.len()
        );
    }
    Ok(CalibrationArtifact {
        kind,
        epsilon,
        k: scores.len(),
        threshold,
        tau_mode: TauGridMode::default(),
        slic_digest: None,
        manifest_digest: None,
        sentinel,
    })
}

/// Pixels kept for threshold `threshold` under `kind`.
///
/// Summed kinds keep the longest prefix of pixels in descending attribution
/// order whose running sum stays at or below the threshold.
pub fn explanation_keep(
    phi: &AttributionMap,
    kind: ConformityKind,
    threshold: f64,
    seg: Option<&SegmentationMap>,
) -> Result<PixelMask> {
    let (h, w) = (phi.height(), phi.width());
    if threshold.is_nan() {
        return Err(Error::invalid("threshold is NaN"));
    }
    let values = kind.effective_scores(phi);
    match kind {
        ConformityKind::Pixelwise => Ok(select_pixels(&values, threshold, h, w)),
        ConformityKind::SuperPixels { rho } | ConformityKind::ScaledValues { rho } => {
            let seg = seg.ok_or_else(|| Error::invalid(format!("{} explanations need a segmentation", kind.name())))?;
            seg.check_matches(h, w)?;
            Ok(select_segments(&values, threshold, seg, rho))
        }
        ConformityKind::SummedValues => {
            let ranked = RankedScores::new(&values);
            let kept = ranked.prefix[1..]
                .iter()
                .position(|s| *s > threshold)
                .unwrap_or(values.len());
            Ok(ranked.top_mask(kept, h, w))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationMask {
    pub instance_id: String,
    pub keep: PixelMask,
    pub size_fraction: f64,
    pub reproduced_class: usize,
    pub matches_full: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub instance_id: String,
    pub size_fraction: f64,
    pub reproduced_class: usize,
    pub matches_full: bool,
}

impl ExplanationMask {
    pub fn record(&self) -> MaskRecord {
        MaskRecord {
            instance_id: self.instance_id.clone(),
            size_fraction: self.size_fraction,
            reproduced_class: self.reproduced_class,
            matches_full: self.matches_full,
        }
    }
}

fn masks_with_predictions(
    id: &str,
    x: &ImageTensor,
    keeps: Vec<PixelMask>,
    h: &dyn Predictor,
    baseline: &Baseline,
    reference: Option<usize>,
) -> Result<Vec<ExplanationMask>> {
    let mut batch = Vec::with_capacity(keeps.len() + 1);
    if reference.is_none() {
        batch.push(x.clone());
    }
    for keep in &keeps {
        batch.push(apply_baseline_mask(x, keep, baseline)?);
    }
    let preds = h.predict_batch(&batch)?;
    let (full, masked) = match reference {
        Some(c) => (c, &preds[..]),
        None => (preds[0].predicted_class(), &preds[1..]),
    };
    Ok(keeps
        .into_iter()
        .zip(masked)
        .map(|(keep, p)| ExplanationMask {
            instance_id: id.to_owned(),
            size_fraction: keep.fraction(),
            keep,
            reproduced_class: p.predicted_class(),
            matches_full: p.predicted_class() == full,
        })
        .collect())
}

/// Builds the explanation mask for one input and checks it against the
/// model's prediction on the full input (or `reference` when known).
#[allow(clippy::too_many_arguments)]
pub fn explain(
    id: &str,
    x: &ImageTensor,
    phi: &AttributionMap,
    art: &CalibrationArtifact,
    h: &dyn Predictor,
    seg: Option<&SegmentationMap>,
    baseline: &Baseline,
    reference: Option<usize>,
) -> Result<ExplanationMask> {
    phi.check_matches(x)?;
    let keep = explanation_keep(phi, art.kind, art.threshold, seg)?;
    let mut out = masks_with_predictions(id, x, vec![keep], h, baseline, reference)?;
    Ok(out.pop().expect("one mask"))
}

pub fn explain_instance(
    inst: &Instance,
    art: &CalibrationArtifact,
    h: &dyn Predictor,
    baseline: &Baseline,
) -> Result<ExplanationMask> {
    explain(
        &inst.id,
        &inst.image,
        &inst.attribution,
        art,
        h,
        inst.segmentation.as_ref(),
        baseline,
        inst.reference_class,
    )
}

/// Explains instances in parallel; the result is sorted by instance id.
pub fn explain_all(
    instances: &[Instance],
    art: &CalibrationArtifact,
    h: &dyn Predictor,
    baseline: &Baseline,
) -> Result<Vec<ExplanationMask>> {
    let mut masks = instances
        .par_iter()
        .map(|inst| explain_instance(inst, art, h, baseline))
        .collect::<Result<Vec<_>>>()?;
    masks.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(masks)
}

/// One mask per artifact, in the order given. Artifacts must share kind and
/// provenance.
pub fn nested_masks(
    inst: &Instance,
    arts: &[CalibrationArtifact],
    h: &dyn Predictor,
    baseline: &Baseline,
) -> Result<Vec<ExplanationMask>> {
    let Some(first) = arts.first() else {
        return Ok(Vec::new());
    };
    for a in arts {
        if a.kind != first.kind {
            return Err(Error::invalid(format!("artifacts mix kinds {} and {}", first.kind, a.kind)));
        }
        if a.slic_digest != first.slic_digest || a.manifest_digest != first.manifest_digest || a.tau_mode != first.tau_mode {
            return Err(Error::invalid("artifacts come from different configurations"));
        }
    }
    let keeps = arts
        .iter()
        .map(|a| explanation_keep(&inst.attribution, a.kind, a.threshold, inst.segmentation.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    masks_with_predictions(&inst.id, &inst.image, keeps, h, baseline, inst.reference_class)
}

pub fn mask_file_name(instance_id: &str) -> String {
    let safe: String = instance_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.mask.cfxt")
}

/// Writes one CFXT tensor per mask plus `masks.jsonl` with the metadata.
pub fn write_masks(masks: &[ExplanationMask], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = dir.join("masks.jsonl");
    let file = File::create(&meta).map_err(|e| Error::io(&meta, e))?;
    let mut w = BufWriter::new(file);
    for m in masks {
        write_tensor(&m.keep, dir.join(mask_file_name(&m.instance_id)))?;
        writeln!(w, "{}", serde_json::to_string(&m.record())?).map_err(|e| Error::io(&meta, e))?;
    }
    w.flush().map_err(|e| Error::io(&meta, e))?;
    Ok(meta)
}

pub fn read_mask_records(path: impl AsRef<Path>) -> Result<Vec<MaskRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

//! Per-instance conformity scores.
//!
//! For an instance with attributions `phi`, each candidate threshold `tau`
//! induces a selection of pixels that is kept while everything else is set to
//! the baseline. A threshold *preserves* the instance when the model's argmax
//! on the masked input equals its argmax on the full input.
//!
//! * pixelwise: select `{j : phi_j >= tau}`; score = largest preserving `tau`.
//! * super-pixels: select every segment where at least `ceil(rho * |segment|)`
//!   pixels have `phi_j >= tau`; score = largest preserving `tau`.
//! * scaled values: as super-pixels, on per-instance standardized scores.
//! * summed values: pixelwise selections; score = smallest signed sum of the
//!   selected attributions over preserving thresholds.
//!
//! Every threshold in the grid is evaluated; the set of preserving thresholds
//! does not have to be contiguous.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::predictor::{apply_baseline_mask, Baseline, Predictor};
use crate::segmentation::SegmentationMap;
use crate::tensor::{AttributionMap, ImageTensor, PixelMask};

pub const DEFAULT_RHO: f64 = 0.5;
pub const DEFAULT_QUANTILES: usize = 100;
const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConformityKind {
    Pixelwise,
    SuperPixels { rho: f64 },
    ScaledValues { rho: f64 },
    SummedValues,
}

impl ConformityKind {
    pub const NAMES: [&'static str; 4] = ["pixelwise", "superpixel", "scaled", "summed"];

    pub fn parse(name: &str, rho: f64) -> Result<Self> {
        let kind = match name {
            "pixelwise" => ConformityKind::Pixelwise,
            "superpixel" | "super_pixels" => ConformityKind::SuperPixels { rho },
            "scaled" | "scaled_values" => ConformityKind::ScaledValues { rho },
            "summed" | "summed_values" => ConformityKind::SummedValues,
            other => {
                return Err(Error::invalid(format!(
                    "unknown conformity kind {other:?}; expected one of {:?}",
                    Self::NAMES
                )))
            }
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(rho) = self.rho() {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::invalid(format!("rho must lie in (0,1], got {rho}")));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConformityKind::Pixelwise => "pixelwise",
            ConformityKind::SuperPixels { .. } => "superpixel",
            ConformityKind::ScaledValues { .. } => "scaled",
            ConformityKind::SummedValues => "summed",
        }
    }

    pub fn rho(&self) -> Option<f64> {
        match self {
            ConformityKind::SuperPixels { rho } | ConformityKind::ScaledValues { rho } => Some(*rho),
            _ => None,
        }
    }

    /// Threshold kinds calibrate a lower quantile of thresholds; the summed
    /// kind calibrates an upper quantile of sums.
    pub fn is_threshold(&self) -> bool {
        !matches!(self, ConformityKind::SummedValues)
    }

    pub fn needs_segmentation(&self) -> bool {
        self.rho().is_some()
    }

    /// Score given to instances where no threshold preserves the prediction.
    pub fn invalid_sentinel(&self) -> f64 {
        if self.is_threshold() {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    }

    /// Attribution values in the space this kind thresholds.
    pub fn effective_scores(&self, phi: &AttributionMap) -> Vec<f64> {
        let raw: Vec<f64> = phi.scores().iter().map(|v| *v as f64).collect();
        match self {
            ConformityKind::ScaledValues { .. } => standardize(&raw),
            _ => raw,
        }
    }
}

impl std::fmt::Display for ConformityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.rho() {
            Some(rho) => write!(f, "{}(rho={rho})", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// `(v - mean) / std` with population std; a std below 1e-12 is replaced by 1.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let std = if std < STD_FLOOR { 1.0 } else { std };
    values.iter().map(|v| (v - mean) / std).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "q", rename_all = "snake_case")]
pub enum TauGridMode {
    /// Linear-interpolated empirical quantiles at `q` evenly spaced levels in [0,1].
    QuantileLevels(usize),
    /// Every distinct attribution value.
    AllDistinct,
    /// `q` evenly spaced values between the minimum and maximum attribution.
    Linspace(usize),
}

impl Default for TauGridMode {
    fn default() -> Self {
        TauGridMode::QuantileLevels(DEFAULT_QUANTILES)
    }
}

impl TauGridMode {
    pub fn name(&self) -> &'static str {
        match self {
            TauGridMode::QuantileLevels(_) => "quantile",
            TauGridMode::AllDistinct => "distinct",
            TauGridMode::Linspace(_) => "linspace",
        }
    }

    pub fn q(&self) -> Option<usize> {
        match self {
            TauGridMode::QuantileLevels(q) | TauGridMode::Linspace(q) => Some(*q),
            TauGridMode::AllDistinct => None,
        }
    }

    pub fn from_parts(name: &str, q: Option<usize>) -> Result<Self> {
        let need_q = || q.filter(|q| *q >= 1).ok_or_else(|| Error::invalid("grid mode needs q >= 1"));
        match name {
            "quantile" => Ok(TauGridMode::QuantileLevels(need_q()?)),
            "linspace" => Ok(TauGridMode::Linspace(need_q()?)),
            "distinct" => Ok(TauGridMode::AllDistinct),
            other => Err(Error::invalid(format!("unknown tau grid mode {other:?}"))),
        }
    }
}

/// Candidate thresholds for one instance, ascending and deduplicated.
#[derive(Debug, Clone, PartialEq)]
pub struct TauGrid {
    values: Vec<f64>,
}

impl TauGrid {
    pub fn from_scores(scores: &[f64], mode: TauGridMode) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("cannot build a threshold grid from no scores"));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let (lo, hi) = (sorted[0], sorted[n - 1]);
        let levels = |q: usize| -> Vec<f64> {
            if q == 1 {
                vec![0.0]
            } else {
                (0..q).map(|i| i as f64 / (q - 1) as f64).collect()
            }
        };
        let mut values: Vec<f64> = match mode {
            TauGridMode::AllDistinct => sorted.clone(),
            TauGridMode::QuantileLevels(q) => levels(q.max(1))
                .into_iter()
                .map(|p| {
                    let h = p * (n - 1) as f64;
                    let i = h.floor() as usize;
                    if i + 1 >= n {
                        sorted[n - 1]
                    } else {
                        let (a, b) = (sorted[i], sorted[i + 1]);
                        (a + (h - i as f64) * (b - a)).clamp(a, b)
                    }
                })
                .collect(),
            TauGridMode::Linspace(q) => levels(q.max(1))
                .into_iter()
                .map(|p| (lo + p * (hi - lo)).clamp(lo, hi))
                .collect(),
        };
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Self { values })
    }

    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("grid needs at least one non-NaN value"));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Grid over raw attribution values.
pub fn make_tau_grid(phi: &AttributionMap, mode: TauGridMode) -> Result<TauGrid> {
    let raw: Vec<f64> = phi.scores().iter().map(|v| *v as f64).collect();
    TauGrid::from_scores(&raw, mode)
}

/// Grid in the score space `kind` thresholds (standardized for scaled values).
pub fn tau_grid_for(phi: &AttributionMap, kind: ConformityKind, mode: TauGridMode) -> Result<TauGrid> {
    TauGrid::from_scores(&kind.effective_scores(phi), mode)
}

/// Minimum count of above-threshold pixels for a segment of `size` pixels.
pub fn required_count(rho: f64, size: usize) -> usize {
    // The small offset absorbs products like 0.3 * 10 = 3.0000000000000004.
    ((rho * size as f64 - 1e-9).ceil() as usize).max(1)
}

pub(crate) fn select_pixels(values: &[f64], tau: f64, height: usize, width: usize) -> PixelMask {
    let bits = values.iter().map(|v| *v >= tau).collect();
    PixelMask::new(height, width, bits).expect("values cover the image")
}

pub(crate) fn select_segments(values: &[f64], tau: f64, seg: &SegmentationMap, rho: f64) -> PixelMask {
    let mut above = vec![0usize; seg.num_segments()];
    for (v, l) in values.iter().zip(seg.labels()) {
        if *v >= tau {
            above[*l as usize] += 1;
        }
    }
    let chosen: Vec<bool> = above
        .iter()
        .zip(seg.segment_sizes())
        .map(|(a, size)| *a >= required_count(rho, size))
        .collect();
    let bits = seg.labels().iter().map(|l| chosen[*l as usize]).collect();
    PixelMask::new(seg.height(), seg.width(), bits).expect("segmentation covers the image")
}

fn require_segmentation<'a>(kind: ConformityKind, seg: Option<&'a SegmentationMap>, phi: &AttributionMap) -> Result<&'a SegmentationMap> {
    let seg = seg.ok_or_else(|| Error::invalid(format!("{} conformity needs a segmentation", kind.name())))?;
    seg.check_matches(phi.height(), phi.width())?;
    Ok(seg)
}

/// Pixels kept at threshold `tau` (in the kind's score space).
pub fn selection_at_tau(
    phi: &AttributionMap,
    tau: f64,
    kind: ConformityKind,
    seg: Option<&SegmentationMap>,
) -> Result<PixelMask> {
    let values = kind.effective_scores(phi);
    match kind {
        ConformityKind::Pixelwise | ConformityKind::SummedValues => {
            Ok(select_pixels(&values, tau, phi.height(), phi.width()))
        }
        ConformityKind::SuperPixels { rho } | ConformityKind::ScaledValues { rho } => {
            let seg = require_segmentation(kind, seg, phi)?;
            Ok(select_segments(&values, tau, seg, rho))
        }
    }
}

/// Value and validity of one instance's conformity score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformityScore {
    pub instance_id: String,
    pub kind: ConformityKind,
    pub value: f64,
    pub valid: bool,
}

pub fn reference_class(h: &dyn Predictor, x: &ImageTensor, cached: Option<usize>) -> Result<usize> {
    match cached {
        Some(c) => Ok(c),
        None => Ok(h.predict(x)?.predicted_class()),
    }
}

/// Evaluates the model on each masked input and reports whether the argmax
/// matches `reference`. Consecutive identical masks reuse the previous answer.
fn preserving_flags(
    x: &ImageTensor,
    h: &dyn Predictor,
    baseline: &Baseline,
    reference: usize,
    masks: &[PixelMask],
) -> Result<Vec<bool>> {
    let mut flags = vec![false; masks.len()];
    let mut to_query: Vec<usize> = Vec::with_capacity(masks.len());
    for i in 0..masks.len() {
        if i == 0 || masks[i] != masks[i - 1] {
            to_query.push(i);
        }
    }
    let chunk = h.batch_limit().clamp(1, 64);
    for idxs in to_query.chunks(chunk) {
        let batch = idxs
            .iter()
            .map(|&i| apply_baseline_mask(x, &masks[i], baseline))
            .collect::<Result<Vec<_>>>()?;
        let preds = h.predict_batch(&batch)?;
        for (&i, p) in idxs.iter().zip(&preds) {
            flags[i] = p.predicted_class() == reference;
        }
    }
    for i in 1..masks.len() {
        if masks[i] == masks[i - 1] {
            flags[i] = flags[i - 1];
        }
    }
    Ok(flags)
}

fn max_preserving(grid: &TauGrid, flags: &[bool]) -> Scored {
    grid.values()
        .iter()
        .zip(flags)
        .rev()
        .find(|(_, ok)| **ok)
        .map_or(
            Scored {
                value: f64::NEG_INFINITY,
                valid: false,
            },
            |(tau, _)| Scored {
                value: *tau,
                valid: true,
            },
        )
}

pub fn score_pixelwise(
    x: &ImageTensor,
    phi: &AttributionMap,
    h: &dyn Predictor,
    grid: &TauGrid,
    baseline: &Baseline,
    reference: Option<usize>,
) -> Result<Scored> {
    phi.check_matches(x)?;
    let reference = reference_class(h, x, reference)?;
    let values = ConformityKind::Pixelwise.effective_scores(phi);
    let masks: Vec<PixelMask> = grid
        .values()
        .iter()
        .map(|&tau| select_pixels(&values, tau, phi.height(), phi.width()))
        .collect();
    let flags = preserving_flags(x, h, baseline, reference, &masks)?;
    Ok(max_preserving(grid, &flags))
}

/// Super-pixel conformity; with `scaled`, `grid` is expected in standardized
/// score space (see [`tau_grid_for`]).
#[allow(clippy::too_many_arguments)]
pub fn score_superpixel(
    x: &ImageTensor,
    phi: &AttributionMap,
    h: &dyn Predictor,
    grid: &TauGrid,
    seg: &SegmentationMap,
    rho: f64,
    baseline: &Baseline,
    scaled: bool,
    reference: Option<usize>,
) -> Result<Scored> {
    phi.check_matches(x)?;
    seg.check_matches(phi.height(), phi.width())?;
    let kind = if scaled {
        ConformityKind::ScaledValues { rho }
    } else {
        ConformityKind::SuperPixels { rho }
    };
    kind.validate()?;
    let reference = reference_class(h, x, reference)?;
    let values = kind.effective_scores(phi);
    let masks: Vec<PixelMask> = grid
        .values()
        .iter()
        .map(|&tau| select_segments(&values, tau, seg, rho))
        .collect();
    let flags = preserving_flags(x, h, baseline, reference, &masks)?;
    Ok(max_preserving(grid, &flags))
}

/// Pixels ordered by descending attribution (ties by index) with running sums.
pub(crate) struct RankedScores {
    pub order: Vec<usize>,
    /// `prefix[j]` is the sum of the first `j` ranked scores.
    pub prefix: Vec<f64>,
    sorted: Vec<f64>,
}

impl RankedScores {
    pub fn new(values: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        let mut prefix = Vec::with_capacity(values.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for v in &sorted {
            acc += v;
            prefix.push(acc);
        }
        Self { order, prefix, sorted }
    }

    /// Number of scores `>= tau`.
    pub fn count_at_least(&self, tau: f64) -> usize {
        self.sorted.partition_point(|v| *v >= tau)
    }

    pub fn top_mask(&self, count: usize, height: usize, width: usize) -> PixelMask {
        let mut bits = vec![false; height * width];
        for &i in &self.order[..count] {
            bits[i] = true;
        }
        PixelMask::new(height, width, bits).expect("ranked scores cover the image")
    }
}

pub fn score_summed(
    x: &ImageTensor,
    phi: &AttributionMap,
    h: &dyn Predictor,
    grid: &TauGrid,
    baseline: &Baseline,
    reference: Option<usize>,
) -> Result<Scored> {
    phi.check_matches(x)?;
    let reference = reference_class(h, x, reference)?;
    let values = ConformityKind::SummedValues.effective_scores(phi);
    let ranked = RankedScores::new(&values);
    let counts: Vec<usize> = grid.values().iter().map(|&t| ranked.count_at_least(t)).collect();
    let masks: Vec<PixelMask> = counts
        .iter()
        .map(|&c| ranked.top_mask(c, phi.height(), phi.width()))
        .collect();
    let flags = preserving_flags(x, h, baseline, reference, &masks)?;
    let best = counts
        .iter()
        .zip(&flags)
        .filter(|(_, ok)| **ok)
        .map(|(&c, _)| ranked.prefix[c])
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.min(s))));
    Ok(match best {
        Some(value) => Scored { value, valid: true },
        None => Scored {
            value: f64::INFINITY,
            valid: false,
        },
    })
}

/// Scores one instance with the grid built in the kind's score space.
pub fn score_instance(
    inst: &Instance,
    kind: ConformityKind,
    h: &dyn Predictor,
    mode: TauGridMode,
    baseline: &Baseline,
) -> Result<ConformityScore> {
    kind.validate()?;
    let grid = tau_grid_for(&inst.attribution, kind, mode)?;
    let reference = inst.reference_class;
    let scored = match kind {
        ConformityKind::Pixelwise => score_pixelwise(&inst.image, &inst.attribution, h, &grid, baseline, reference)?,
        ConformityKind::SummedValues => score_summed(&inst.image, &inst.attribution, h, &grid, baseline, reference)?,
        ConformityKind::SuperPixels { rho } | ConformityKind::ScaledValues { rho } => {
            let seg = require_segmentation(kind, inst.segmentation.as_ref(), &inst.attribution)?;
            let scaled = matches!(kind, ConformityKind::ScaledValues { .. });
            score_superpixel(&inst.image, &inst.attribution, h, &grid, seg, rho, baseline, scaled, reference)?
        }
    };
    Ok(ConformityScore {
        instance_id: inst.id.clone(),
        kind,
        value: if scored.valid { scored.value } else { kind.invalid_sentinel() },
        valid: scored.valid,
    })
}

/// Scores instances in parallel; the result is sorted by instance id.
pub fn score_all(
    instances: &[Instance],
    kind: ConformityKind,
    h: &dyn Predictor,
    mode: TauGridMode,
    baseline: &Baseline,
) -> Result<Vec<ConformityScore>> {
    let mut scores = instances
        .par_iter()
        .map(|inst| score_instance(inst, kind, h, mode, baseline))
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(scores)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRecord {
    instance_id: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(with = "crate::json_float")]
    value: f64,
    valid: bool,
}

impl ConformityScore {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&ScoreRecord {
            instance_id: self.instance_id.clone(),
            kind: self.kind.name().to_owned(),
            rho: self.kind.rho(),
            value: self.value,
            valid: self.valid,
        })?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: ScoreRecord = serde_json::from_str(line)?;
        let kind = ConformityKind::parse(&rec.kind, rec.rho.unwrap_or(DEFAULT_RHO))?;
        Ok(Self {
            instance_id: rec.instance_id,
            kind,
            value: rec.value,
            valid: rec.valid,
        })
    }
}

pub fn write_scores_jsonl(scores: &[ConformityScore], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in scores {
        writeln!(w, "{}", s.to_json_line()?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_jsonl(path: impl AsRef<Path>) -> Result<Vec<ConformityScore>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(ConformityScore::from_json_line(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{PredictionVector, SyntheticModel};

    fn phi_2x2() -> AttributionMap {
        AttributionMap::new(2, 2, vec![0.9, 0.1, 0.2, 0.05]).unwrap()
    }

    fn f(v: f32) -> f64 {
        v as f64
    }

    fn witness_00() -> SyntheticModel {
        SyntheticModel::region_witness(PixelMask::from_pixels(2, 2, &[(0, 0)]).unwrap(), 0.5).unwrap()
    }

    struct Constant;
    impl Predictor for Constant {
        fn num_classes(&self) -> usize {
            2
        }
        fn predict_chunk(&self, chunk: &[ImageTensor]) -> Result<Vec<PredictionVector>> {
            chunk.iter().map(|_| PredictionVector::from_scores(vec![0.0, 1.0])).collect()
        }
    }

    /// Class 1 on the untouched image (no zeros), class 0 once anything is masked.
    struct FlipOnMask;
    impl Predictor for FlipOnMask {
        fn num_classes(&self) -> usize {
            2
        }
        fn predict_chunk(&self, chunk: &[ImageTensor]) -> Result<Vec<PredictionVector>> {
            chunk
                .iter()
                .map(|x| {
                    let masked = x.data().contains(&0.0);
                    PredictionVector::from_scores(if masked { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
                })
                .collect()
        }
    }

    #[test]
    fn grid_distinct_values() {
        let phi = AttributionMap::new(2, 2, vec![3.0, 1.0, 4.0, 2.0]).unwrap();
        let grid = make_tau_grid(&phi, TauGridMode::AllDistinct).unwrap();
        assert_eq!(grid.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn grid_constant_dedups() {
        let phi = AttributionMap::new(3, 3, vec![0.7; 9]).unwrap();
        let grid = make_tau_grid(&phi, TauGridMode::QuantileLevels(100)).unwrap();
        assert_eq!(grid.values(), &[f(0.7)]);
    }

    #[test]
    fn grid_interpolated_quantiles() {
        let phi = AttributionMap::new(1, 2, vec![0.0, 10.0]).unwrap();
        let grid = make_tau_grid(&phi, TauGridMode::QuantileLevels(5)).unwrap();
        assert_eq!(grid.values(), &[0.0, 2.5, 5.0, 7.5, 10.0]);
    }

    #[test]
    fn grid_linspace_vs_quantile() {
        let phi = AttributionMap::new(1, 3, vec![0.0, 1.0, 10.0]).unwrap();
        let lin = make_tau_grid(&phi, TauGridMode::Linspace(3)).unwrap();
        assert_eq!(lin.values(), &[0.0, 5.0, 10.0]);
        let q = make_tau_grid(&phi, TauGridMode::QuantileLevels(3)).unwrap();
        assert_eq!(q.values(), &[0.0, 1.0, 10.0]);
    }

    #[test]
    fn pixel_selection() {
        let mask = selection_at_tau(&phi_2x2(), f(0.2), ConformityKind::Pixelwise, None).unwrap();
        assert_eq!(mask, PixelMask::from_pixels(2, 2, &[(0, 0), (1, 0)]).unwrap());
        let empty = selection_at_tau(&phi_2x2(), 0.95, ConformityKind::Pixelwise, None).unwrap();
        assert_eq!(empty.count(), 0);
    }

    #[test]
    fn superpixel_selection_by_columns() {
        let seg = SegmentationMap::new(2, 2, vec![0, 1, 0, 1], 2).unwrap();
        let kind = ConformityKind::SuperPixels { rho: 0.5 };
        let mask = selection_at_tau(&phi_2x2(), f(0.2), kind, Some(&seg)).unwrap();
        assert_eq!(mask, PixelMask::from_pixels(2, 2, &[(0, 0), (1, 0)]).unwrap());
        assert!(selection_at_tau(&phi_2x2(), 0.2, kind, None).is_err());
    }

    #[test]
    fn required_count_is_robust_to_rounding() {
        assert_eq!(required_count(0.5, 2), 1);
        assert_eq!(required_count(0.3, 10), 3);
        assert_eq!(required_count(0.5, 3), 2);
        assert_eq!(required_count(1.0, 7), 7);
        assert_eq!(required_count(0.01, 5), 1);
    }

    #[test]
    fn pixelwise_witness_example() {
        let x = ImageTensor::new(1, 2, 2, vec![0.7, 0.2, 0.1, 0.3]).unwrap();
        let phi = phi_2x2();
        let grid = make_tau_grid(&phi, TauGridMode::AllDistinct).unwrap();
        let s = score_pixelwise(&x, &phi, &witness_00(), &grid, &Baseline::Zero, None).unwrap();
        assert_eq!(s, Scored { value: f(0.9), valid: true });
    }

    #[test]
    fn constant_predictor_scores_max() {
        let x = ImageTensor::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let phi = phi_2x2();
        let grid = make_tau_grid(&phi, TauGridMode::AllDistinct).unwrap();
        let s = score_pixelwise(&x, &phi, &Constant, &grid, &Baseline::Zero, None).unwrap();
        assert_eq!(s, Scored { value: f(0.9), valid: true });
    }

    #[test]
    fn flip_on_any_mask_scores_min() {
        let x = ImageTensor::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let phi = phi_2x2();
        let grid = make_tau_grid(&phi, TauGridMode::AllDistinct).unwrap();
        let s = score_pixelwise(&x, &phi, &FlipOnMask, &grid, &Baseline::Zero, None).unwrap();
        assert_eq!(s, Scored { value: f(0.05), valid: true });
    }

    #[test]
    fn adversarial_is_invalid() {
        // Grid without the minimum never selects every pixel, so FlipOnMask
        // never preserves.
        let x = ImageTensor::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let phi = phi_2x2();
        let grid = TauGrid::from_values(vec![f(0.1), f(0.2), f(0.9), 1.5]).unwrap();
        let s = score_pixelwise(&x, &phi, &FlipOnMask, &grid, &Baseline::Zero, None).unwrap();
        assert!(!s.valid);
        let s = score_summed(&x, &phi, &FlipOnMask, &grid, &Baseline::Zero, None).unwrap();
        assert!(!s.valid);
        assert_eq!(s.value, f64::INFINITY);
        // A cached reference that disagrees with the model also yields invalid.
        let full = make_tau_grid(&phi, TauGridMode::AllDistinct).unwrap();
        let s = score_pixelwise(&x, &phi, &Constant, &full, &Baseline::Zero, Some(0)).unwrap();
        assert!(!s.valid);
    }

    #[test]
    fn summed_witness_example() {
        let x = ImageTensor::new(1, 2, 2, vec![0.7, 0.2, 0.1, 0.3]).unwrap();
        let phi = phi_2x2();
        let grid = make_tau_grid(&phi, TauGridMode::AllDistinct).unwrap();
        let s = score_summed(&x, &phi, &witness_00(), &grid, &Baseline::Zero, None).unwrap();
        assert!(s.valid);
        assert_eq!(s.value, f(0.9));
    }

    #[test]
    fn summed_sums_by_threshold() {
        // Sums for tau = .05, .1, .2, .9 are 1.25, 1.2, 1.1, 0.9.
        let ranked = RankedScores::new(&ConformityKind::SummedValues.effective_scores(&phi_2x2()));
        let sums: Vec<f64> = [0.05f32, 0.1, 0.2, 0.9]
            .iter()
            .map(|t| ranked.prefix[ranked.count_at_least(*t as f64)])
            .collect();
        let expected = [1.25, 1.2, 1.1, 0.9];
        for (s, e) in sums.iter().zip(expected) {
            assert!((s - e).abs() < 1e-6, "{sums:?}");
        }
    }

    #[test]
    fn standardize_population_std() {
        let z = standardize(&[2.0, 4.0, 6.0]);
        let expected = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{z:?}");
        }
        assert_eq!(standardize(&[3.0, 3.0, 3.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn scaled_constant_attribution_selects_everything() {
        let x = ImageTensor::new(1, 2, 2, vec![0.7, 0.2, 0.1, 0.3]).unwrap();
        let phi = AttributionMap::new(2, 2, vec![0.4; 4]).unwrap();
        let seg = SegmentationMap::new(2, 2, vec![0, 1, 0, 1], 2).unwrap();
        let kind = ConformityKind::ScaledValues { rho: 0.5 };
        let grid = tau_grid_for(&phi, kind, TauGridMode::default()).unwrap();
        assert_eq!(grid.values(), &[0.0]);
        let mask = selection_at_tau(&phi, 0.0, kind, Some(&seg)).unwrap();
        assert_eq!(mask.count(), 4);
        let s = score_superpixel(&x, &phi, &witness_00(), &grid, &seg, 0.5, &Baseline::Zero, true, None).unwrap();
        assert_eq!(s, Scored { value: 0.0, valid: true });
    }

    #[test]
    fn superpixel_witness_4x4() {
        // Two super-pixels: left half (cols 0-1) holds the witness region.
        // Witness fires when the mean of the left-half region exceeds 0.5.
        let mut labels = vec![0u32; 16];
        for r in 0..4 {
            for c in 2..4 {
                labels[r * 4 + c] = 1;
            }
        }
        let seg = SegmentationMap::new(4, 4, labels, 2).unwrap();
        let region: Vec<(usize, usize)> = (0..4).flat_map(|r| (0..2).map(move |c| (r, c))).collect();
        let h = SyntheticModel::region_witness(PixelMask::from_pixels(4, 4, &region).unwrap(), 0.5).unwrap();
        let mut x = vec![0.1f32; 16];
        for &(r, c) in &region {
            x[r * 4 + c] = 0.9;
        }
        let x = ImageTensor::new(1, 4, 4, x).unwrap();
        // Left half attributions 0.8..0.1 spread; right half mixed.
        #[rustfmt::skip]
        let phi = AttributionMap::new(4, 4, vec![
            0.8, 0.7, 0.95, 0.05,
            0.6, 0.5, 0.04, 0.03,
            0.4, 0.3, 0.02, 0.01,
            0.2, 0.1, 0.015, 0.025,
        ]).unwrap();
        let grid = make_tau_grid(&phi, TauGridMode::AllDistinct).unwrap();
        let s = score_superpixel(&x, &phi, &h, &grid, &seg, 0.5, &Baseline::Zero, false, None).unwrap();
        // Left segment (8 px) needs 4 pixels >= tau: its 4th largest value is 0.5.
        // Any tau <= 0.5 keeps the left half; larger tau drops it (and keeping
        // only the right half leaves the region at baseline).
        assert_eq!(s, Scored { value: f(0.5), valid: true });
    }

    #[test]
    fn jsonl_round_trip_with_sentinels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");
        let scores = vec![
            ConformityScore {
                instance_id: "a".into(),
                kind: ConformityKind::SuperPixels { rho: 0.5 },
                value: 0.25,
                valid: true,
            },
            ConformityScore {
                instance_id: "b".into(),
                kind: ConformityKind::SuperPixels { rho: 0.5 },
                value: f64::NEG_INFINITY,
                valid: false,
            },
        ];
        write_scores_jsonl(&scores, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"instance_id":"a","kind":"superpixel","rho":0.5,"value":0.25,"valid":true}"#));
        assert!(text.contains(r#""value":"-inf""#));
        assert_eq!(read_scores_jsonl(&path).unwrap(), scores);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(ConformityKind::parse("scaled", 0.3).unwrap(), ConformityKind::ScaledValues { rho: 0.3 });
        assert!(ConformityKind::parse("superpixel", 0.0).is_err());
        assert!(ConformityKind::parse("superpixel", 1.5).is_err());
        assert!(ConformityKind::parse("nope", 0.5).is_err());
    }
}

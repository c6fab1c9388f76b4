//! The black-box model boundary: batched prediction and baseline masking.

pub mod protocol;
mod subprocess;
mod synthetic;

use std::path::Path;

pub use subprocess::SubprocessClient;
pub use synthetic::{RegionSpec, SyntheticModel, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, PixelMask};

/// Class scores for one image plus the argmax class.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    class_scores: Vec<f64>,
    predicted_class: usize,
}

impl PredictionVector {
    /// The predicted class is the lowest index attaining the maximum score.
    pub fn from_scores(class_scores: Vec<f64>) -> Result<Self> {
        if class_scores.is_empty() {
            return Err(Error::invalid("prediction needs at least one class score"));
        }
        if let Some(i) = class_scores.iter().position(|s| s.is_nan()) {
            return Err(Error::invalid(format!("class score {i} is NaN")));
        }
        let mut best = 0;
        for (i, s) in class_scores.iter().enumerate().skip(1) {
            if *s > class_scores[best] {
                best = i;
            }
        }
        Ok(Self {
            class_scores,
            predicted_class: best,
        })
    }

    pub fn class_scores(&self) -> &[f64] {
        &self.class_scores
    }

    pub fn predicted_class(&self) -> usize {
        self.predicted_class
    }

    pub fn num_classes(&self) -> usize {
        self.class_scores.len()
    }
}

/// A model `h` mapping images to class scores.
///
/// Implementors only handle chunks of at most [`Predictor::batch_limit`]
/// images; [`Predictor::predict_batch`] does the splitting.
pub trait Predictor: Send + Sync {
    fn num_classes(&self) -> usize;

    fn batch_limit(&self) -> usize {
        1024
    }

    fn predict_chunk(&self, chunk: &[ImageTensor]) -> Result<Vec<PredictionVector>>;

    fn predict_batch(&self, batch: &[ImageTensor]) -> Result<Vec<PredictionVector>> {
        let Some(first) = batch.first() else {
            return Ok(Vec::new());
        };
        if let Some(bad) = batch.iter().find(|t| t.dims() != first.dims()) {
            return Err(Error::DimMismatch(format!(
                "batch mixes dims {:?} and {:?}",
                first.dims(),
                bad.dims()
            )));
        }
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(self.batch_limit().max(1)) {
            let preds = self.predict_chunk(chunk)?;
            if preds.len() != chunk.len() {
                return Err(Error::Transport(format!(
                    "predictor returned {} results for {} inputs",
                    preds.len(),
                    chunk.len()
                )));
            }
            out.extend(preds);
        }
        Ok(out)
    }

    fn predict(&self, image: &ImageTensor) -> Result<PredictionVector> {
        let mut v = self.predict_batch(std::slice::from_ref(image))?;
        Ok(v.pop().expect("one prediction per input"))
    }
}

/// Values substituted for dropped pixels.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Zero,
    Tensor(ImageTensor),
}

/// Keeps pixels where `keep` is true (all channels) and replaces the rest with
/// the baseline.
pub fn apply_baseline_mask(img: &ImageTensor, keep: &PixelMask, baseline: &Baseline) -> Result<ImageTensor> {
    if keep.height() != img.height() || keep.width() != img.width() {
        return Err(Error::DimMismatch(format!(
            "mask {}x{} does not match image {}x{}",
            keep.height(),
            keep.width(),
            img.height(),
            img.width()
        )));
    }
    if let Baseline::Tensor(b) = baseline {
        if b.dims() != img.dims() {
            return Err(Error::DimMismatch(format!(
                "baseline dims {:?} do not match image {:?}",
                b.dims(),
                img.dims()
            )));
        }
    }
    let n = img.num_pixels();
    let mut out = img.clone();
    let data = out.data_mut();
    for c in 0..img.channels() {
        for p in 0..n {
            if !keep.get(p) {
                data[c * n + p] = match baseline {
                    Baseline::Zero => 0.0,
                    Baseline::Tensor(b) => b.at(c, p),
                };
            }
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub enum PredictorKind {
    Synthetic(SyntheticModel),
    Subprocess(SubprocessClient),
}

/// A configured predictor, either built in or backed by a child process.
#[derive(Debug)]
pub struct PredictorHandle {
    kind: PredictorKind,
    num_classes: usize,
    batch_limit: usize,
}

impl PredictorHandle {
    pub fn synthetic(spec: SyntheticSpec) -> Result<Self> {
        let model = SyntheticModel::compile(spec)?;
        Ok(Self {
            num_classes: model.num_classes(),
            kind: PredictorKind::Synthetic(model),
            batch_limit: 1024,
        })
    }

    pub fn subprocess(program: &str, args: &[String], batch_limit: usize) -> Result<Self> {
        if batch_limit == 0 {
            return Err(Error::invalid("batch_limit must be at least 1"));
        }
        let client = SubprocessClient::spawn(program, args)?;
        Ok(Self {
            num_classes: client.num_classes(),
            kind: PredictorKind::Subprocess(client),
            batch_limit,
        })
    }

    /// Parses `synthetic:<spec.json>` or `subprocess:<command> [args...]`.
    pub fn from_spec_str(spec: &str) -> Result<Self> {
        if let Some(path) = spec.strip_prefix("synthetic:") {
            let path = Path::new(path);
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let spec: SyntheticSpec = serde_json::from_slice(&bytes)?;
            Self::synthetic(spec)
        } else if let Some(cmd) = spec.strip_prefix("subprocess:") {
            let mut parts = cmd.split_whitespace();
            let program = parts
                .next()
                .ok_or_else(|| Error::invalid("subprocess predictor needs a command"))?;
            let args: Vec<String> = parts.map(str::to_owned).collect();
            Self::subprocess(program, &args, 256)
        } else {
            Err(Error::invalid(format!(
                "predictor spec must start with synthetic: or subprocess:, got {spec:?}"
            )))
        }
    }

    pub fn with_batch_limit(mut self, batch_limit: usize) -> Self {
        self.batch_limit = batch_limit.max(1);
        self
    }

    pub fn kind(&self) -> &PredictorKind {
        &self.kind
    }
}

impl Predictor for PredictorHandle {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn batch_limit(&self) -> usize {
        self.batch_limit
    }

    fn predict_chunk(&self, chunk: &[ImageTensor]) -> Result<Vec<PredictionVector>> {
        match &self.kind {
            PredictorKind::Synthetic(m) => m.predict_chunk(chunk),
            PredictorKind::Subprocess(c) => c.predict_chunk(chunk),
        }
    }
}

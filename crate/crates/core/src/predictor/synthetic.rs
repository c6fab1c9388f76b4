//! Built-in predictors with analytically known behaviour.

use serde::{Deserialize, Serialize};

use super::{PredictionVector, Predictor};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, PixelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegionSpec {
    Pixels(Vec<[usize; 2]>),
    Rect {
        top: usize,
        left: usize,
        rows: usize,
        cols: usize,
    },
}

impl RegionSpec {
    pub fn to_mask(&self, height: usize, width: usize) -> Result<PixelMask> {
        let pixels: Vec<(usize, usize)> = match self {
            RegionSpec::Pixels(px) => px.iter().map(|[r, c]| (*r, *c)).collect(),
            RegionSpec::Rect {
                top,
                left,
                rows,
                cols,
            } => (*top..top + rows)
                .flat_map(|r| (*left..left + cols).map(move |c| (r, c)))
                .collect(),
        };
        PixelMask::from_pixels(height, width, &pixels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    /// Softmax over per-class linear logits `sum(W_c * x) + b_c`.
    Linear {
        channels: usize,
        height: usize,
        width: usize,
        weights: Vec<Vec<f32>>,
        #[serde(default)]
        bias: Vec<f32>,
    },
    /// Two classes: class 1 iff the mean of the region's raw values exceeds `theta`.
    RegionWitness {
        height: usize,
        width: usize,
        region: RegionSpec,
        theta: f64,
    },
    /// A region witness with a third "unrecognizable" class that wins when the
    /// region's contrast between 4-neighbours exceeds `roughness_limit`, as
    /// happens when the region is partly masked out.
    FragileWitness {
        height: usize,
        width: usize,
        region: RegionSpec,
        theta: f64,
        roughness_limit: f64,
    },
}

#[derive(Debug, Clone)]
pub enum SyntheticModel {
    Linear {
        dims: (usize, usize, usize),
        weights: Vec<Vec<f32>>,
        bias: Vec<f64>,
    },
    RegionWitness {
        region: PixelMask,
        theta: f64,
    },
    FragileWitness {
        region: PixelMask,
        theta: f64,
        roughness_limit: f64,
    },
}

impl SyntheticModel {
    pub fn compile(spec: SyntheticSpec) -> Result<Self> {
        match spec {
            SyntheticSpec::Linear {
                channels,
                height,
                width,
                weights,
                bias,
            } => {
                if weights.is_empty() {
                    return Err(Error::invalid("linear predictor needs at least one class"));
                }
                let len = channels * height * width;
                if let Some(w) = weights.iter().find(|w| w.len() != len) {
                    return Err(Error::DimMismatch(format!(
                        "linear weights have {} entries, image {channels}x{height}x{width} has {len}",
                        w.len()
                    )));
                }
                let bias = if bias.is_empty() {
                    vec![0.0; weights.len()]
                } else if bias.len() == weights.len() {
                    bias.iter().map(|b| *b as f64).collect()
                } else {
                    return Err(Error::DimMismatch("bias length must equal class count".into()));
                };
                Ok(SyntheticModel::Linear {
                    dims: (channels, height, width),
                    weights,
                    bias,
                })
            }
            SyntheticSpec::RegionWitness {
                height,
                width,
                region,
                theta,
            } => {
                let region = region.to_mask(height, width)?;
                if region.count() == 0 {
                    return Err(Error::invalid("witness region must be nonempty"));
                }
                Ok(SyntheticModel::RegionWitness { region, theta })
            }
            SyntheticSpec::FragileWitness {
                height,
                width,
                region,
                theta,
                roughness_limit,
            } => {
                let region = region.to_mask(height, width)?;
                if region.count() == 0 {
                    return Err(Error::invalid("witness region must be nonempty"));
                }
                Ok(SyntheticModel::FragileWitness {
                    region,
                    theta,
                    roughness_limit,
                })
            }
        }
    }

    pub fn region_witness(region: PixelMask, theta: f64) -> Result<Self> {
        if region.count() == 0 {
            return Err(Error::invalid("witness region must be nonempty"));
        }
        Ok(SyntheticModel::RegionWitness { region, theta })
    }

    /// Mean over the region's pixels and all channels.
    pub fn region_mean(region: &PixelMask, image: &ImageTensor) -> f64 {
        let mut sum = 0.0f64;
        for c in 0..image.channels() {
            for p in 0..image.num_pixels() {
                if region.get(p) {
                    sum += image.at(c, p) as f64;
                }
            }
        }
        sum / (region.count() * image.channels()) as f64
    }

    /// Contrast of the region: `sum |a - b| / sum (|a| + |b|)` over
    /// horizontally and vertically adjacent pixel pairs inside `region`, all
    /// channels. In [0, 1]; zero when the region is entirely zero.
    pub fn roughness(region: &PixelMask, image: &ImageTensor) -> f64 {
        let (c, h, w) = image.dims();
        let mut diff = 0.0f64;
        let mut total = 0.0f64;
        let mut add = |a: f32, b: f32| {
            let (a, b) = (a as f64, b as f64);
            diff += (a - b).abs();
            total += a.abs() + b.abs();
        };
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let p = r * w + col;
                    if !region.get(p) {
                        continue;
                    }
                    if col + 1 < w && region.get(p + 1) {
                        add(image.at(ch, p), image.at(ch, p + 1));
                    }
                    if r + 1 < h && region.get(p + w) {
                        add(image.at(ch, p), image.at(ch, p + w));
                    }
                }
            }
        }
        if total == 0.0 {
            0.0
        } else {
            diff / total
        }
    }

    fn check_region(region: &PixelMask, image: &ImageTensor) -> Result<()> {
        if region.height() != image.height() || region.width() != image.width() {
            return Err(Error::DimMismatch(format!(
                "witness region {}x{} does not match image {}x{}",
                region.height(),
                region.width(),
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn predict_one(&self, image: &ImageTensor) -> Result<PredictionVector> {
        match self {
            SyntheticModel::Linear { dims, weights, bias } => {
                if image.dims() != *dims {
                    return Err(Error::DimMismatch(format!(
                        "linear predictor expects {dims:?}, got {:?}",
                        image.dims()
                    )));
                }
                let logits: Vec<f64> = weights
                    .iter()
                    .zip(bias)
                    .map(|(w, b)| {
                        w.iter()
                            .zip(image.data())
                            .map(|(a, x)| *a as f64 * *x as f64)
                            .sum::<f64>()
                            + b
                    })
                    .collect();
                PredictionVector::from_scores(softmax(&logits))
            }
            SyntheticModel::RegionWitness { region, theta } => {
                Self::check_region(region, image)?;
                let m = Self::region_mean(region, image);
                PredictionVector::from_scores(vec![theta - m, m - theta])
            }
            SyntheticModel::FragileWitness {
                region,
                theta,
                roughness_limit,
            } => {
                Self::check_region(region, image)?;
                let m = Self::region_mean(region, image);
                let t = Self::roughness(region, image);
                // The third score beats both witness scores exactly when t > limit.
                let margin = (m - theta).abs();
                PredictionVector::from_scores(vec![theta - m, m - theta, margin + (t - roughness_limit)])
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Predictor for SyntheticModel {
    fn num_classes(&self) -> usize {
        match self {
            SyntheticModel::Linear { weights, .. } => weights.len(),
            SyntheticModel::RegionWitness { .. } => 2,
            SyntheticModel::FragileWitness { .. } => 3,
        }
    }

    fn predict_chunk(&self, chunk: &[ImageTensor]) -> Result<Vec<PredictionVector>> {
        chunk.iter().map(|x| self.predict_one(x)).collect()
    }
}

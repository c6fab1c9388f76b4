//! Brute-force reference implementations used as oracles by the integration
//! tests. Nothing here calls into the scoring or calibration code.

#![allow(dead_code)]

use confex::predictor::{RegionSpec, SyntheticModel, SyntheticSpec};
use confex::{AttributionMap, ImageTensor, Predictor};
use rand::seq::SliceRandom;
use rand::Rng;

/// Zeroes every channel of the pixels where `keep` is false.
pub fn zero_outside(x: &ImageTensor, keep: &[bool]) -> ImageTensor {
    let (c, h, w) = x.dims();
    let n = h * w;
    let mut data = x.data().to_vec();
    for ch in 0..c {
        for p in 0..n {
            if !keep[p] {
                data[ch * n + p] = 0.0;
            }
        }
    }
    ImageTensor::new(c, h, w, data).unwrap()
}

pub fn argmax(h: &dyn Predictor, x: &ImageTensor) -> usize {
    h.predict(x).unwrap().predicted_class()
}

fn distinct_sorted(phi: &[f32]) -> Vec<f64> {
    let mut v: Vec<f64> = phi.iter().map(|x| *x as f64).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v
}

/// Largest attribution value whose upper level set keeps the prediction.
pub fn exhaustive_pixelwise(h: &dyn Predictor, x: &ImageTensor, phi: &[f32]) -> f64 {
    let full = argmax(h, x);
    let mut best = f64::NEG_INFINITY;
    for tau in distinct_sorted(phi) {
        let keep: Vec<bool> = phi.iter().map(|v| *v as f64 >= tau).collect();
        if argmax(h, &zero_outside(x, &keep)) == full {
            best = best.max(tau);
        }
    }
    best
}

/// Smallest attribution mass over the prediction-keeping upper level sets.
pub fn exhaustive_summed(h: &dyn Predictor, x: &ImageTensor, phi: &[f32]) -> f64 {
    let full = argmax(h, x);
    let mut best = f64::INFINITY;
    for tau in distinct_sorted(phi) {
        let keep: Vec<bool> = phi.iter().map(|v| *v as f64 >= tau).collect();
        if argmax(h, &zero_outside(x, &keep)) == full {
            let mass: f64 = phi.iter().filter(|v| **v as f64 >= tau).map(|v| *v as f64).sum();
            best = best.min(mass);
        }
    }
    best
}

/// Pairwise-distinct attributions on a 1/16 lattice, so every partial sum is
/// exact in f64 regardless of summation order.
pub fn lattice_attribution<R: Rng>(rng: &mut R, height: usize, width: usize) -> AttributionMap {
    let mut ticks: Vec<i32> = (-256..=256).collect();
    ticks.shuffle(rng);
    let scores = ticks[..height * width].iter().map(|t| *t as f32 / 16.0).collect();
    AttributionMap::new(height, width, scores).unwrap()
}

pub fn random_image<R: Rng>(rng: &mut R, channels: usize, height: usize, width: usize) -> ImageTensor {
    let data = (0..channels * height * width).map(|_| rng.random::<f32>()).collect();
    ImageTensor::new(channels, height, width, data).unwrap()
}

/// A linear softmax model, a region witness or a fragile witness with random
/// parameters.
pub fn random_model<R: Rng>(rng: &mut R, channels: usize, height: usize, width: usize) -> SyntheticModel {
    let n = height * width;
    let mut region: Vec<[usize; 2]> = (0..n).map(|p| [p / width, p % width]).collect();
    region.shuffle(rng);
    region.truncate(rng.random_range(1..=n));
    let spec = match rng.random_range(0..3) {
        0 => {
            let classes = rng.random_range(2..=4);
            SyntheticSpec::Linear {
                channels,
                height,
                width,
                weights: (0..classes)
                    .map(|_| (0..channels * n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                    .collect(),
                bias: (0..classes).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
            }
        }
        1 => SyntheticSpec::RegionWitness {
            height,
            width,
            region: RegionSpec::Pixels(region),
            theta: rng.random_range(0.05..0.6),
        },
        _ => SyntheticSpec::FragileWitness {
            height,
            width,
            region: RegionSpec::Pixels(region),
            theta: rng.random_range(0.05..0.6),
            roughness_limit: rng.random_range(0.2..0.8),
        },
    };
    SyntheticModel::compile(spec).unwrap()
}

/// `(count + 1) / (k + 1) >= 1 - eps`, checked on every candidate.
pub fn meets(count: usize, k: usize, eps: f64) -> bool {
    (count + 1) as f64 / (k + 1) as f64 >= 1.0 - eps
}

/// Enumerates every element of `values` and keeps the largest one whose
/// at-least count meets the level.
pub fn enumerate_lower(values: &[f64], eps: f64) -> Option<f64> {
    let k = values.len();
    values
        .iter()
        .copied()
        .filter(|s| meets(values.iter().filter(|v| *v >= s).count(), k, eps))
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
}

/// Enumerates every element of `values` and keeps the smallest one whose
/// at-most count meets the level.
pub fn enumerate_upper(values: &[f64], eps: f64) -> Option<f64> {
    let k = values.len();
    values
        .iter()
        .copied()
        .filter(|s| meets(values.iter().filter(|v| *v <= s).count(), k, eps))
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.min(s))))
}

//! Simple Linear Iterative Clustering over (color, x, y).
//!
//! Distance between pixel `p` and centroid `k`:
//!
//! ```text
//! D^2 = d_color^2 + (m / S)^2 * d_xy^2,   S = sqrt(H * W / k)
//! ```
//!
//! Color is CIELAB for three-channel images and raw intensity for single
//! channel images. Pixel centers sit at `(col + 0.5, row + 0.5)` and seeds are
//! placed at the centers of an `nx x ny` grid of equal cells, so a constant
//! image keeps its seeds where they start.

use serde::{Deserialize, Serialize};

use super::connectivity::{enforce_connectivity, merge_down_to};
use super::lab::srgb_to_lab;
use super::SegmentationMap;
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub target_segments: usize,
    pub compactness: f64,
    pub max_iters: usize,
    /// Fragments smaller than this fraction of the mean cell area are merged.
    pub min_size_factor: f64,
    /// Move each seed to the lowest-gradient pixel of its 3x3 neighbourhood.
    pub perturb_seeds: bool,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            target_segments: 100,
            compactness: 10.0,
            max_iters: 10,
            min_size_factor: 0.25,
            perturb_seeds: true,
        }
    }
}

impl SlicParams {
    pub fn with_segments(target_segments: usize) -> Self {
        Self {
            target_segments,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_segments == 0 {
            return Err(Error::invalid("SLIC target_segments must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("SLIC max_iters must be at least 1"));
        }
        if !(self.compactness > 0.0 && self.compactness.is_finite()) {
            return Err(Error::invalid("SLIC compactness must be positive"));
        }
        if !(self.min_size_factor > 0.0 && self.min_size_factor < 1.0) {
            return Err(Error::invalid("SLIC min_size_factor must lie in (0,1)"));
        }
        Ok(())
    }
}

/// Intermediate state recorded for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct SlicTrace {
    /// Clustering energy (sum of squared combined distances) after each iteration.
    pub energies: Vec<f64>,
    /// Cluster assignment before connectivity enforcement.
    pub raw_labels: Vec<u32>,
    /// Seed positions `(x, y)` after optional perturbation.
    pub seeds: Vec<(f64, f64)>,
}

struct Features {
    color: Vec<f64>,
    dims: usize,
}

impl Features {
    fn of(&self, p: usize) -> &[f64] {
        &self.color[p * self.dims..(p + 1) * self.dims]
    }
}

fn pixel_features(img: &ImageTensor) -> Features {
    let n = img.num_pixels();
    let c = img.channels();
    if c == 3 {
        // Normalized tensors are rescaled to [0,1] before the Lab transform.
        let (lo, hi) = img
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v as f64), hi.max(v as f64))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut color = Vec::with_capacity(3 * n);
        for p in 0..n {
            let rgb = [0, 1, 2].map(|ch| (img.at(ch, p) as f64 - lo) / span);
            color.extend_from_slice(&srgb_to_lab(rgb));
        }
        Features { color, dims: 3 }
    } else {
        let mut color = Vec::with_capacity(c * n);
        for p in 0..n {
            for ch in 0..c {
                color.push(img.at(ch, p) as f64);
            }
        }
        Features { color, dims: c }
    }
}

fn grid_shape(k: usize, height: usize, width: usize) -> (usize, usize) {
    let ny = ((k as f64 * height as f64 / width as f64).sqrt().round() as usize).clamp(1, height);
    let nx = ((k as f64 / ny as f64).round() as usize).clamp(1, width);
    (nx, ny)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn gradient(feat: &Features, r: usize, c: usize, height: usize, width: usize) -> f64 {
    let at = |rr: usize, cc: usize| feat.of(rr * width + cc);
    let (c0, c1) = (c.saturating_sub(1), (c + 1).min(width - 1));
    let (r0, r1) = (r.saturating_sub(1), (r + 1).min(height - 1));
    sq_dist(at(r, c1), at(r, c0)) + sq_dist(at(r1, c), at(r0, c))
}

struct Clusters {
    color: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    dims: usize,
}

impl Clusters {
    fn len(&self) -> usize {
        self.x.len()
    }

    fn color(&self, k: usize) -> &[f64] {
        &self.color[k * self.dims..(k + 1) * self.dims]
    }
}

pub fn slic_segment(img: &ImageTensor, params: &SlicParams) -> Result<SegmentationMap> {
    slic_segment_traced(img, params).map(|(seg, _)| seg)
}

pub fn slic_segment_traced(img: &ImageTensor, params: &SlicParams) -> Result<(SegmentationMap, SlicTrace)> {
    params.validate()?;
    let (height, width) = (img.height(), img.width());
    let n = height * width;
    let feat = pixel_features(img);
    let (nx, ny) = grid_shape(params.target_segments, height, width);
    let step_x = width as f64 / nx as f64;
    let step_y = height as f64 / ny as f64;
    let s = (n as f64 / params.target_segments as f64).sqrt();
    let spatial_w = (params.compactness / s).powi(2);
    let half = step_x.max(step_y);

    let mut clusters = Clusters {
        color: Vec::with_capacity(nx * ny * feat.dims),
        x: Vec::with_capacity(nx * ny),
        y: Vec::with_capacity(nx * ny),
        dims: feat.dims,
    };
    for j in 0..ny {
        for i in 0..nx {
            let mut cx = (i as f64 + 0.5) * step_x;
            let mut cy = (j as f64 + 0.5) * step_y;
            let mut pr = (cy.floor() as usize).min(height - 1);
            let mut pc = (cx.floor() as usize).min(width - 1);
            if params.perturb_seeds {
                let mut best = gradient(&feat, pr, pc, height, width);
                let (sr, sc) = (pr, pc);
                for rr in sr.saturating_sub(1)..=(sr + 1).min(height - 1) {
                    for cc in sc.saturating_sub(1)..=(sc + 1).min(width - 1) {
                        let g = gradient(&feat, rr, cc, height, width);
                        if g < best {
                            best = g;
                            pr = rr;
                            pc = cc;
                        }
                    }
                }
                if (pr, pc) != (sr, sc) {
                    cx = pc as f64 + 0.5;
                    cy = pr as f64 + 0.5;
                }
            }
            clusters.color.extend_from_slice(feat.of(pr * width + pc));
            clusters.x.push(cx);
            clusters.y.push(cy);
        }
    }
    let seeds: Vec<(f64, f64)> = clusters.x.iter().copied().zip(clusters.y.iter().copied()).collect();

    let dist_to = |clusters: &Clusters, p: usize, k: usize| -> f64 {
        let px = (p % width) as f64 + 0.5;
        let py = (p / width) as f64 + 0.5;
        let dxy = (px - clusters.x[k]).powi(2) + (py - clusters.y[k]).powi(2);
        sq_dist(feat.of(p), clusters.color(k)) + spatial_w * dxy
    };

    const UNASSIGNED: u32 = u32::MAX;
    let mut labels = vec![UNASSIGNED; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut energies = Vec::with_capacity(params.max_iters);

    for iter in 0..params.max_iters {
        let previous = labels.clone();
        if iter > 0 {
            for p in 0..n {
                dist[p] = dist_to(&clusters, p, labels[p] as usize);
            }
        }
        for k in 0..clusters.len() {
            let (cx, cy) = (clusters.x[k], clusters.y[k]);
            let c_lo = (cx - half - 0.5).ceil().max(0.0) as usize;
            let c_hi = ((cx + half - 0.5).floor() as isize).min(width as isize - 1);
            let r_lo = (cy - half - 0.5).ceil().max(0.0) as usize;
            let r_hi = ((cy + half - 0.5).floor() as isize).min(height as isize - 1);
            if c_hi < 0 || r_hi < 0 {
                continue;
            }
            for r in r_lo..=r_hi as usize {
                for c in c_lo..=c_hi as usize {
                    let p = r * width + c;
                    let d = dist_to(&clusters, p, k);
                    if d < dist[p] || (d == dist[p] && (k as u32) < labels[p]) {
                        dist[p] = d;
                        labels[p] = k as u32;
                    }
                }
            }
        }
        for p in 0..n {
            if labels[p] == UNASSIGNED {
                let (k, d) = (0..clusters.len())
                    .map(|k| (k, dist_to(&clusters, p, k)))
                    .fold((0, f64::INFINITY), |best, cand| if cand.1 < best.1 { cand } else { best });
                labels[p] = k as u32;
                dist[p] = d;
            }
        }

        // Centroid update; empty clusters keep their position.
        let k_count = clusters.len();
        let mut sum_color = vec![0.0; k_count * feat.dims];
        let mut sum_x = vec![0.0; k_count];
        let mut sum_y = vec![0.0; k_count];
        let mut count = vec![0usize; k_count];
        for p in 0..n {
            let k = labels[p] as usize;
            count[k] += 1;
            sum_x[k] += (p % width) as f64 + 0.5;
            sum_y[k] += (p / width) as f64 + 0.5;
            for (acc, v) in sum_color[k * feat.dims..(k + 1) * feat.dims].iter_mut().zip(feat.of(p)) {
                *acc += v;
            }
        }
        for k in 0..k_count {
            if count[k] == 0 {
                continue;
            }
            let inv = 1.0 / count[k] as f64;
            clusters.x[k] = sum_x[k] * inv;
            clusters.y[k] = sum_y[k] * inv;
            for d in 0..feat.dims {
                clusters.color[k * feat.dims + d] = sum_color[k * feat.dims + d] * inv;
            }
        }
        let energy: f64 = (0..n).map(|p| dist_to(&clusters, p, labels[p] as usize)).sum();
        energies.push(energy);

        if iter > 0 && previous == labels {
            break;
        }
    }

    let min_size = ((params.min_size_factor * n as f64 / clusters.len() as f64).floor() as usize).max(1);
    let mut seg = enforce_connectivity(&labels, height, width, min_size);
    let cap = 2 * params.target_segments;
    if seg.num_segments() > cap {
        seg = merge_down_to(&seg, cap);
    }
    Ok((
        seg,
        SlicTrace {
            energies,
            raw_labels: labels,
            seeds,
        },
    ))
}

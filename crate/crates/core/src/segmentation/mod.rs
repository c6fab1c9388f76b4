//! Super-pixel segmentation (SLIC) and the label maps it produces.

mod connectivity;
mod lab;
mod slic;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use connectivity::{enforce_connectivity, merge_down_to, relabel_components};
pub use lab::srgb_to_lab;
pub use slic::{slic_segment, slic_segment_traced, SlicParams, SlicTrace};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, RawTensor, TensorFile};

/// Per-pixel super-pixel ids forming a partition of the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    num_segments: usize,
}

impl SegmentationMap {
    /// Checks the partition invariant: every id in `[0, num_segments)` occurs
    /// and no pixel carries an id outside that range.
    pub fn new(height: usize, width: usize, labels: Vec<u32>, num_segments: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "segmentation {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        let mut seen = vec![false; num_segments];
        for &l in &labels {
            let l = l as usize;
            if l >= num_segments {
                return Err(Error::invalid(format!(
                    "label {l} outside [0, {num_segments})"
                )));
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("segment id {missing} has no pixels")));
        }
        Ok(Self {
            height,
            width,
            labels,
            num_segments,
        })
    }

    /// Dense relabeling in order of first appearance.
    pub fn from_raw_labels(height: usize, width: usize, raw: &[u32]) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        let labels: Vec<u32> = raw
            .iter()
            .map(|l| {
                let next = map.len() as u32;
                *map.entry(*l).or_insert(next)
            })
            .collect();
        let n = map.len();
        Self::new(height, width, labels, n)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn check_matches(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::DimMismatch(format!(
                "segmentation {}x{} does not match image {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// True when every segment's pixels form one 4-connected region.
    pub fn is_four_connected(&self) -> bool {
        let comps = relabel_components(&self.labels, self.height, self.width);
        comps.iter().copied().max().map_or(0, |m| m as usize + 1) == self.num_segments
    }
}

impl TensorFile for SegmentationMap {
    fn to_raw(&self) -> RawTensor {
        RawTensor {
            dims: vec![self.height as u32, self.width as u32],
            data: self.labels.iter().map(|&l| l as f32).collect(),
        }
    }

    fn from_raw(raw: RawTensor) -> Result<Self> {
        let [h, w] = raw.dims[..] else {
            return Err(Error::DimMismatch(format!(
                "segmentation tensor needs dims HxW, got {:?}",
                raw.dims
            )));
        };
        let mut labels = Vec::with_capacity(raw.data.len());
        for (i, v) in raw.data.iter().enumerate() {
            if *v < 0.0 || v.fract() != 0.0 {
                return Err(Error::invalid(format!("label {v} at index {i} is not a segment id")));
            }
            labels.push(*v as u32);
        }
        let n = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        SegmentationMap::new(h as usize, w as usize, labels, n)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    num_segments: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the label tensor plus its `num_segments` JSON sidecar.
pub fn write_segmentation(seg: &SegmentationMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_tensor(seg, path)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string(&Sidecar {
        num_segments: seg.num_segments,
    })?;
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn read_segmentation(path: impl AsRef<Path>) -> Result<SegmentationMap> {
    let path = path.as_ref();
    let seg: SegmentationMap = read_tensor(path)?;
    let side = sidecar_path(path);
    if side.is_file() {
        let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar = serde_json::from_slice(&bytes)?;
        if meta.num_segments != seg.num_segments {
            return Err(Error::invalid(format!(
                "{}: sidecar says {} segments, labels have {}",
                path.display(),
                meta.num_segments,
                seg.num_segments
            )));
        }
    }
    Ok(seg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_invariant_enforced() {
        assert!(SegmentationMap::new(1, 3, vec![0, 2, 2], 3).is_err());
        assert!(SegmentationMap::new(1, 3, vec![0, 3, 1], 3).is_err());
        assert!(SegmentationMap::new(1, 3, vec![0, 1, 1], 2).is_ok());
    }

    #[test]
    fn round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let seg = SegmentationMap::new(2, 2, vec![0, 0, 1, 2], 3).unwrap();
        let path = dir.path().join("seg.cfxt");
        write_segmentation(&seg, &path).unwrap();
        assert!(dir.path().join("seg.json").is_file());
        assert_eq!(read_segmentation(&path).unwrap(), seg);
    }

    #[test]
    fn connectivity_check() {
        let split = SegmentationMap::new(1, 3, vec![0, 1, 0], 2).unwrap();
        assert!(!split.is_four_connected());
        let ok = SegmentationMap::new(1, 3, vec![0, 0, 1], 2).unwrap();
        assert!(ok.is_four_connected());
    }
}

//! Dataset manifests, loaded instances, and the seeded calibration/test split.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::predictor::Baseline;
use crate::segmentation::{read_segmentation, SegmentationMap};
use crate::tensor::{read_tensor, AttributionMap, ImageTensor};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePolicy {
    #[default]
    Zero,
    ExplicitTensor(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub instance_id: String,
    pub image_path: PathBuf,
    pub attribution_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation_path: Option<PathBuf>,
    /// Class predicted on the unmasked image, when the exporter already knows it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cached_prediction: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    #[serde(default)]
    pub baseline_policy: BaselinePolicy,
    pub items: Vec<ManifestItem>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
    /// SHA-256 of the manifest file bytes.
    #[serde(skip)]
    pub digest: String,
}

/// One calibration or test example with everything scoring needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub image: ImageTensor,
    pub attribution: AttributionMap,
    pub segmentation: Option<SegmentationMap>,
    pub reference_class: Option<usize>,
}

impl Instance {
    pub fn new(id: impl Into<String>, image: ImageTensor, attribution: AttributionMap) -> Result<Self> {
        attribution.check_matches(&image)?;
        Ok(Self {
            id: id.into(),
            image,
            attribution,
            segmentation: None,
            reference_class: None,
        })
    }

    pub fn with_segmentation(mut self, seg: SegmentationMap) -> Result<Self> {
        seg.check_matches(self.image.height(), self.image.width())?;
        self.segmentation = Some(seg);
        Ok(self)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    manifest.digest = sha256_hex(&bytes);
    manifest.validate()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Manifest("num_classes must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for item in &self.items {
            if item.instance_id.is_empty() {
                return Err(Error::Manifest("empty instance_id".into()));
            }
            if !seen.insert(item.instance_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate instance_id {:?}",
                    item.instance_id
                )));
            }
            if let Some(c) = item.cached_prediction {
                if c >= self.num_classes {
                    return Err(Error::Manifest(format!(
                        "{}: cached_prediction {c} out of range",
                        item.instance_id
                    )));
                }
            }
            let paths = [Some(&item.image_path), Some(&item.attribution_path), item.segmentation_path.as_ref()];
            for p in paths.into_iter().flatten() {
                let resolved = self.resolve(p);
                if !resolved.is_file() {
                    return Err(Error::Manifest(format!(
                        "{}: dangling path {}",
                        item.instance_id,
                        resolved.display()
                    )));
                }
            }
        }
        if let BaselinePolicy::ExplicitTensor(p) = &self.baseline_policy {
            let resolved = self.resolve(p);
            if !resolved.is_file() {
                return Err(Error::Manifest(format!(
                    "dangling baseline path {}",
                    resolved.display()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn load_baseline(&self) -> Result<Baseline> {
        match &self.baseline_policy {
            BaselinePolicy::Zero => Ok(Baseline::Zero),
            BaselinePolicy::ExplicitTensor(p) => Ok(Baseline::Tensor(read_tensor(self.resolve(p))?)),
        }
    }

    /// Loads the image and attribution of item `index`; the segmentation comes from
    /// the manifest when listed there, otherwise from `segmentation_override`.
    pub fn load_instance(&self, index: usize, segmentation_override: Option<&Path>) -> Result<Instance> {
        let item = &self.items[index];
        let image: ImageTensor = read_tensor(self.resolve(&item.image_path))?;
        let attribution: AttributionMap = read_tensor(self.resolve(&item.attribution_path))?;
        let mut instance = Instance::new(item.instance_id.clone(), image, attribution)
            .map_err(|e| Error::DimMismatch(format!("{}: {e}", item.instance_id)))?;
        instance.reference_class = item.cached_prediction;
        let seg_path = item
            .segmentation_path
            .as_ref()
            .map(|p| self.resolve(p))
            .or_else(|| segmentation_override.map(Path::to_path_buf));
        if let Some(p) = seg_path {
            instance = instance.with_segmentation(read_segmentation(&p)?)?;
        }
        Ok(instance)
    }
}

/// Seeded split into (calibration, test) index lists, each ascending.
pub fn split_indices(n: usize, calibration_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(calibration_fraction > 0.0 && calibration_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "calibration fraction must lie in (0,1), got {calibration_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut n_cal = (calibration_fraction * n as f64).round() as usize;
    if n >= 2 {
        n_cal = n_cal.clamp(1, n - 1);
    } else {
        n_cal = n;
    }
    let mut cal = order[..n_cal].to_vec();
    let mut test = order[n_cal..].to_vec();
    cal.sort_unstable();
    test.sort_unstable();
    Ok((cal, test))
}

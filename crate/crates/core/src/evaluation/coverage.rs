use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::conformal::{calibrate_threshold, explain_instance};
use crate::conformity::{score_instance, ConformityKind, TauGridMode};
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::predictor::{Baseline, Predictor, RegionSpec, SyntheticModel, SyntheticSpec};
use crate::segmentation::SegmentationMap;
use crate::tensor::{AttributionMap, ImageTensor};

/// `3 * sqrt(eps * (1 - eps) / n)`
pub fn binomial_slack(epsilon: f64, n_test: usize) -> f64 {
    3.0 * (epsilon * (1.0 - epsilon) / n_test as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioModel {
    /// Class 1 iff the centre block is bright; masking can only lower the evidence.
    Witness,
    /// Linear evidence: two blocks argue for class 1, two against.
    MixedEvidence,
    /// Witness with an extra class for inputs rougher than natural images,
    /// standing in for a network that misreads scattered-pixel masks.
    FragileWitness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionStyle {
    /// Evidence-carrying pixels score highest, plus noise.
    Honest,
    /// Honest scores randomly permuted across pixels.
    Shuffled,
}

/// A synthetic data source: block-structured single-channel images, a
/// synthetic model, per-pixel attributions and a block segmentation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub model: ScenarioModel,
    pub side: usize,
    pub block: usize,
    pub theta: f64,
    pub roughness_limit: f64,
    /// Block brightness is uniform on `[min_brightness, 1)`.
    pub min_brightness: f64,
    /// Pixels deviate from their block brightness by up to this much.
    pub jitter: f64,
    pub attribution_noise: f64,
    pub style: AttributionStyle,
}

impl Scenario {
    pub fn witness() -> Self {
        Self {
            model: ScenarioModel::Witness,
            side: 12,
            block: 4,
            theta: 0.5,
            roughness_limit: f64::INFINITY,
            min_brightness: 0.2,
            jitter: 0.1,
            attribution_noise: 0.5,
            style: AttributionStyle::Honest,
        }
    }

    pub fn fragile_witness() -> Self {
        Self {
            model: ScenarioModel::FragileWitness,
            roughness_limit: 0.5,
            ..Self::witness()
        }
    }

    pub fn mixed_evidence() -> Self {
        Self {
            model: ScenarioModel::MixedEvidence,
            side: 12,
            block: 4,
            theta: 0.1,
            roughness_limit: f64::INFINITY,
            min_brightness: 0.0,
            jitter: 0.25,
            attribution_noise: 1.0,
            style: AttributionStyle::Honest,
        }
    }

    pub fn with_style(mut self, style: AttributionStyle) -> Self {
        self.style = style;
        self
    }

    fn blocks_per_side(&self) -> usize {
        self.side / self.block
    }

    fn block_of(&self, p: usize) -> usize {
        let (r, c) = (p / self.side, p % self.side);
        (r / self.block) * self.blocks_per_side() + c / self.block
    }

    /// Weight of each block in the evidence for class 1.
    fn block_weights(&self) -> Vec<f64> {
        let nb = self.blocks_per_side();
        let mut w = vec![0.0; nb * nb];
        match self.model {
            ScenarioModel::Witness | ScenarioModel::FragileWitness => w[(nb / 2) * nb + nb / 2] = 1.0,
            ScenarioModel::MixedEvidence => {
                w[0] = 1.0;
                w[nb * nb - 1] = 1.0;
                w[nb - 1] = -1.0;
                w[nb * (nb - 1)] = -1.0;
            }
        }
        w
    }

    pub fn predictor_spec(&self) -> SyntheticSpec {
        let block_w = self.block_weights();
        let nb = self.blocks_per_side();
        let witness_region = || {
            let b = block_w.iter().position(|w| *w != 0.0).expect("one witness block");
            RegionSpec::Rect {
                top: (b / nb) * self.block,
                left: (b % nb) * self.block,
                rows: self.block,
                cols: self.block,
            }
        };
        match self.model {
            ScenarioModel::Witness => SyntheticSpec::RegionWitness {
                height: self.side,
                width: self.side,
                region: witness_region(),
                theta: self.theta,
            },
            ScenarioModel::FragileWitness => SyntheticSpec::FragileWitness {
                height: self.side,
                width: self.side,
                region: witness_region(),
                theta: self.theta,
                roughness_limit: self.roughness_limit,
            },
            ScenarioModel::MixedEvidence => {
                let n = self.side * self.side;
                let per_side = (2 * self.block * self.block) as f64;
                let w1: Vec<f32> = (0..n)
                    .map(|p| (block_w[self.block_of(p)] / per_side) as f32)
                    .collect();
                SyntheticSpec::Linear {
                    channels: 1,
                    height: self.side,
                    width: self.side,
                    weights: vec![vec![0.0; n], w1],
                    bias: vec![0.0, -self.theta as f32],
                }
            }
        }
    }

    pub fn predictor(&self) -> Result<SyntheticModel> {
        SyntheticModel::compile(self.predictor_spec())
    }

    /// Square blocks of `block x block` pixels.
    pub fn segmentation(&self) -> SegmentationMap {
        let nb = self.blocks_per_side();
        let labels = (0..self.side * self.side).map(|p| self.block_of(p) as u32).collect();
        SegmentationMap::new(self.side, self.side, labels, nb * nb).expect("block grid is a partition")
    }

    pub fn validate(&self) -> Result<()> {
        if self.block == 0 || !self.side.is_multiple_of(self.block) || self.side / self.block < 2 {
            return Err(Error::invalid("side must be a multiple of block with at least 2 blocks per side"));
        }
        Ok(())
    }

    /// Draws one instance; the full-input class is cached on the instance.
    pub fn sample<R: Rng>(&self, rng: &mut R, id: String, h: &SyntheticModel, seg: &SegmentationMap) -> Result<Instance> {
        let n = self.side * self.side;
        let nb = self.blocks_per_side();
        let brightness: Vec<f64> = (0..nb * nb)
            .map(|_| rng.random_range(self.min_brightness..1.0))
            .collect();
        let pixels: Vec<f32> = (0..n)
            .map(|p| {
                let jitter = self.jitter * rng.random_range(-1.0..1.0);
                (brightness[self.block_of(p)] + jitter).clamp(0.0, 1.0) as f32
            })
            .collect();
        let image = ImageTensor::new(1, self.side, self.side, pixels)?;
        let class = h.predict(&image)?.predicted_class();
        let block_w = self.block_weights();
        let mut phi: Vec<f32> = match self.model {
            ScenarioModel::Witness | ScenarioModel::FragileWitness => (0..n)
                .map(|p| {
                    let signal = block_w[self.block_of(p)] * image.at(0, p) as f64;
                    let noise: f64 = Exp1.sample(rng);
                    (signal + self.attribution_noise * noise) as f32
                })
                .collect(),
            ScenarioModel::MixedEvidence => {
                // Input times gradient of the logit toward the predicted class.
                let sign = if class == 1 { 1.0 } else { -1.0 };
                let noise = Normal::new(0.0, self.attribution_noise).expect("finite noise scale");
                (0..n)
                    .map(|p| {
                        let signal = sign * block_w[self.block_of(p)] * image.at(0, p) as f64;
                        (signal + noise.sample(rng)) as f32
                    })
                    .collect()
            }
        };
        if self.style == AttributionStyle::Shuffled {
            phi.shuffle(rng);
        }
        let attribution = AttributionMap::new(self.side, self.side, phi)?;
        let mut inst = Instance::new(id, image, attribution)?.with_segmentation(seg.clone())?;
        inst.reference_class = Some(class);
        Ok(inst)
    }

    pub fn sample_many(&self, seed: u64, count: usize) -> Result<Vec<Instance>> {
        self.validate()?;
        let h = self.predictor()?;
        let seg = self.segmentation();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| self.sample(&mut rng, format!("s{seed}-{i:05}"), &h, &seg))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CoverageTrialConfig {
    pub scenario: Scenario,
    pub k_calibration: usize,
    pub n_test: usize,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub kinds: Vec<ConformityKind>,
    pub tau_mode: TauGridMode,
    /// When set, the pooled instances are shuffled with this seed (mixed with
    /// the trial seed) before the calibration/test split.
    pub permute_pool: Option<u64>,
}

impl CoverageTrialConfig {
    pub fn new(scenario: Scenario, kinds: Vec<ConformityKind>) -> Self {
        Self {
            scenario,
            k_calibration: 500,
            n_test: 1000,
            epsilons: vec![0.01, 0.05, 0.10, 0.15],
            seeds: (0..20).collect(),
            kinds,
            tau_mode: TauGridMode::default(),
            permute_pool: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_calibration < 10 {
            return Err(Error::invalid("coverage trials need at least 10 calibration instances"));
        }
        if self.n_test < 100 {
            return Err(Error::invalid("coverage trials need at least 100 test instances"));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(Error::invalid(format!("epsilon {e} outside (0,1)")));
        }
        for kind in &self.kinds {
            kind.validate()?;
        }
        self.scenario.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub seed: u64,
    pub kind: String,
    pub rho: Option<f64>,
    pub epsilon: f64,
    pub k: usize,
    pub n_test: usize,
    pub infidelity: f64,
    pub slack: f64,
    pub within_bound: bool,
    pub mean_size: f64,
    pub threshold: f64,
    pub invalid_calibration: usize,
}

impl CoverageRow {
    pub fn fidelity(&self) -> f64 {
        1.0 - self.infidelity
    }
}

fn trial_for_seed(cfg: &CoverageTrialConfig, seed: u64) -> Result<Vec<CoverageRow>> {
    let mut pool = cfg.scenario.sample_many(seed, cfg.k_calibration + cfg.n_test)?;
    if let Some(p) = cfg.permute_pool {
        let mut rng = ChaCha8Rng::seed_from_u64(p ^ seed.rotate_left(32));
        pool.shuffle(&mut rng);
    }
    let (cal, test) = pool.split_at(cfg.k_calibration);
    let h = cfg.scenario.predictor()?;
    let baseline = Baseline::Zero;
    let mut rows = Vec::new();
    for &kind in &cfg.kinds {
        let scores = cal
            .par_iter()
            .map(|inst| score_instance(inst, kind, &h, cfg.tau_mode, &baseline))
            .collect::<Result<Vec<_>>>()?;
        let invalid = scores.iter().filter(|s| !s.valid).count();
        if invalid == scores.len() {
            return Err(Error::invalid(format!(
                "degenerate generator: every {kind} calibration score is invalid (seed {seed})"
            )));
        }
        for &epsilon in &cfg.epsilons {
            let art = calibrate_threshold(&scores, epsilon)?;
            let masks = test
                .par_iter()
                .map(|inst| explain_instance(inst, &art, &h, &baseline))
                .collect::<Result<Vec<_>>>()?;
            let misses = masks.iter().filter(|m| !m.matches_full).count();
            let infidelity = misses as f64 / masks.len() as f64;
            let slack = binomial_slack(epsilon, cfg.n_test);
            rows.push(CoverageRow {
                seed,
                kind: kind.name().to_owned(),
                rho: kind.rho(),
                epsilon,
                k: cfg.k_calibration,
                n_test: cfg.n_test,
                infidelity,
                slack,
                within_bound: infidelity <= epsilon + slack,
                mean_size: masks.iter().map(|m| m.size_fraction).sum::<f64>() / masks.len() as f64,
                threshold: art.threshold,
                invalid_calibration: invalid,
            });
        }
    }
    Ok(rows)
}

/// Calibrates on `k` fresh instances and explains `n_test` fresh ones for
/// every seed, kind and epsilon. Rows are ordered by seed, then kind, then
/// epsilon, independent of scheduling.
pub fn run_coverage_trial(cfg: &CoverageTrialConfig) -> Result<Vec<CoverageRow>> {
    cfg.validate()?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| trial_for_seed(cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

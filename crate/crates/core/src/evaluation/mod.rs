//! Size and fidelity metrics, coverage trials on synthetic data, and
//! confidence sweeps.

mod coverage;
mod sweep;

pub use coverage::{
    binomial_slack, run_coverage_trial, AttributionStyle, CoverageRow, CoverageTrialConfig, Scenario, ScenarioModel,
};
pub use sweep::{confidence_sweep, read_sweep_csv, write_sweep_csv, SweepRow, SWEEP_CSV_HEADER};

use serde::Serialize;

use crate::conformal::{CalibrationArtifact, ExplanationMask, MaskRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub kind: String,
    pub rho: Option<f64>,
    pub epsilon: f64,
    pub n_test: usize,
    pub mean_size_fraction: f64,
    pub std_size_fraction: f64,
    pub fidelity: f64,
    pub rows: Vec<MaskRecord>,
}

impl EvalReport {
    pub fn size_summary(&self) -> String {
        format_mean_std(self.mean_size_fraction, self.std_size_fraction)
    }
}

/// Table-style rendering, e.g. `0.367 ± 0.181`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn evaluate(masks: &[ExplanationMask], art: &CalibrationArtifact) -> Result<EvalReport> {
    let rows: Vec<MaskRecord> = masks.iter().map(ExplanationMask::record).collect();
    evaluate_records(rows, art)
}

/// Same as [`evaluate`] from mask metadata alone.
pub fn evaluate_records(rows: Vec<MaskRecord>, art: &CalibrationArtifact) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::invalid("no explanation masks to evaluate"));
    }
    let sizes: Vec<f64> = rows.iter().map(|r| r.size_fraction).collect();
    let (mean, std) = mean_std(&sizes);
    let matches = rows.iter().filter(|r| r.matches_full).count();
    Ok(EvalReport {
        kind: art.kind.name().to_owned(),
        rho: art.kind.rho(),
        epsilon: art.epsilon,
        n_test: rows.len(),
        mean_size_fraction: mean,
        std_size_fraction: std,
        fidelity: matches as f64 / rows.len() as f64,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformity::{ConformityKind, TauGridMode};

    fn art() -> CalibrationArtifact {
        CalibrationArtifact {
            kind: ConformityKind::Pixelwise,
            epsilon: 0.05,
            k: 10,
            threshold: 0.3,
            tau_mode: TauGridMode::default(),
            slic_digest: None,
            manifest_digest: None,
            sentinel: false,
        }
    }

    fn row(size: f64, ok: bool) -> MaskRecord {
        MaskRecord {
            instance_id: "x".into(),
            size_fraction: size,
            reproduced_class: 0,
            matches_full: ok,
        }
    }

    #[test]
    fn sizes_and_fidelity() {
        let r = evaluate_records(vec![row(0.2, true), row(0.4, true)], &art()).unwrap();
        assert_eq!(r.fidelity, 1.0);
        assert!((r.mean_size_fraction - 0.3).abs() < 1e-12);
        assert!((r.std_size_fraction - 0.1).abs() < 1e-12);
        let r = evaluate_records(vec![row(0.2, true), row(0.4, false), row(0.1, true), row(0.3, false)], &art()).unwrap();
        assert_eq!(r.fidelity, 0.5);
    }

    #[test]
    fn empty_is_error() {
        assert!(evaluate_records(vec![], &art()).is_err());
    }

    #[test]
    fn table_formatting() {
        assert_eq!(format_mean_std(0.3674, 0.1809), "0.367 ± 0.181");
    }
}

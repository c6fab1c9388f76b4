use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::evaluate;
use crate::conformal::{calibrate_threshold, explain_all};
use crate::conformity::{score_all, ConformityKind, TauGridMode};
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::predictor::{Baseline, Predictor};

pub const SWEEP_CSV_HEADER: &str = "kind,rho,epsilon,k,n_test,mean_size,std_size,fidelity,threshold";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub kind: String,
    pub rho: Option<f64>,
    pub epsilon: f64,
    pub k: usize,
    pub n_test: usize,
    pub mean_size: f64,
    pub std_size: f64,
    pub fidelity: f64,
    pub threshold: f64,
}

/// Size and fidelity per kind and epsilon. Calibration scores are computed
/// once per kind and reused for every epsilon.
pub fn confidence_sweep(
    calibration: &[Instance],
    test: &[Instance],
    h: &dyn Predictor,
    kinds: &[ConformityKind],
    epsilons: &[f64],
    tau_mode: TauGridMode,
    baseline: &Baseline,
) -> Result<Vec<SweepRow>> {
    if calibration.is_empty() || test.is_empty() {
        return Err(Error::invalid("sweep needs calibration and test instances"));
    }
    let mut rows = Vec::new();
    for &kind in kinds {
        let scores = score_all(calibration, kind, h, tau_mode, baseline)?;
        let per_eps = epsilons
            .par_iter()
            .map(|&eps| {
                let art = calibrate_threshold(&scores, eps)?;
                let masks = explain_all(test, &art, h, baseline)?;
                let report = evaluate(&masks, &art)?;
                Ok(SweepRow {
                    kind: kind.name().to_owned(),
                    rho: kind.rho(),
                    epsilon: eps,
                    k: art.k,
                    n_test: report.n_test,
                    mean_size: report.mean_size_fraction,
                    std_size: report.std_size_fraction,
                    fidelity: report.fidelity,
                    threshold: art.threshold,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(per_eps);
    }
    Ok(rows)
}

fn fmt_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let rho = r.rho.map(fmt_float).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.kind,
            rho,
            fmt_float(r.epsilon),
            r.k,
            r.n_test,
            fmt_float(r.mean_size),
            fmt_float(r.std_size),
            fmt_float(r.fidelity),
            fmt_float(r.threshold)
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_CSV_HEADER) {
        return Err(Error::invalid(format!("{}: unexpected sweep CSV header", path.display())));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::invalid(format!("{}: bad number {s:?}", path.display())))
    };
    let int = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::invalid(format!("{}: bad count {s:?}", path.display())))
    };
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::invalid(format!("{}: expected 9 fields in {line:?}", path.display())));
            }
            Ok(SweepRow {
                kind: f[0].to_owned(),
                rho: if f[1].is_empty() { None } else { Some(num(f[1])?) },
                epsilon: num(f[2])?,
                k: int(f[3])?,
                n_test: int(f[4])?,
                mean_size: num(f[5])?,
                std_size: num(f[6])?,
                fidelity: num(f[7])?,
                threshold: num(f[8])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let rows = vec![
            SweepRow {
                kind: "superpixel".into(),
                rho: Some(0.5),
                epsilon: 0.05,
                k: 100,
                n_test: 50,
                mean_size: 0.25,
                std_size: 0.125,
                fidelity: 0.96,
                threshold: 0.3,
            },
            SweepRow {
                kind: "pixelwise".into(),
                rho: None,
                epsilon: 0.1,
                k: 100,
                n_test: 50,
                mean_size: 1.0,
                std_size: 0.0,
                fidelity: 1.0,
                threshold: f64::NEG_INFINITY,
            },
        ];
        write_sweep_csv(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("kind,rho,epsilon,k,n_test,mean_size,std_size,fidelity,threshold\nsuperpixel,0.5,0.05,100,50,"));
        assert_eq!(read_sweep_csv(&path).unwrap(), rows);
    }
}

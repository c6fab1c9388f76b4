use std::path::{Path, PathBuf};

use clap::Args;
use confex::conformity::DEFAULT_QUANTILES;
use confex::segmentation::SlicParams;
use confex::{ConformityKind, TauGridMode};
use serde::Deserialize;

use crate::exit::{usage, CliResult};

/// Options shared by every subcommand. Each one overrides the matching field
/// of the `--config` file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (JSON).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// `synthetic:<spec.json>` or `subprocess:<command> [args...]`.
    #[arg(long, global = true)]
    pub predictor: Option<String>,
    /// pixelwise, superpixel, scaled or summed.
    #[arg(long, global = true)]
    pub kind: Option<String>,
    /// Fraction of a super-pixel that must pass the threshold.
    #[arg(long, global = true)]
    pub rho: Option<f64>,
    /// Significance level(s); repeat or separate with commas.
    #[arg(long, global = true, value_delimiter = ',')]
    pub epsilon: Vec<f64>,
    /// Number of threshold candidates per instance.
    #[arg(long, global = true)]
    pub tau_quantiles: Option<usize>,
    /// Space candidates evenly between min and max instead of at quantiles.
    #[arg(long, global = true)]
    pub tau_linspace: bool,
    /// Use every distinct attribution value as a candidate.
    #[arg(long, global = true, conflicts_with = "tau_linspace")]
    pub tau_distinct: bool,
    #[arg(long, global = true)]
    pub slic_k: Option<usize>,
    #[arg(long, global = true)]
    pub slic_compactness: Option<f64>,
    /// Seed for the calibration/test split and simulations.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub calibration_fraction: Option<f64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    manifest: Option<PathBuf>,
    predictor: Option<String>,
    kind: Option<String>,
    rho: Option<f64>,
    epsilons: Option<Vec<f64>>,
    tau_mode: Option<String>,
    tau_quantiles: Option<usize>,
    slic_k: Option<usize>,
    slic_compactness: Option<f64>,
    seed: Option<u64>,
    calibration_fraction: Option<f64>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub predictor: Option<String>,
    pub kind: ConformityKind,
    /// True when the kind came from a flag or the config file.
    pub kind_given: bool,
    pub epsilons: Vec<f64>,
    pub tau_mode: TauGridMode,
    pub slic: SlicParams,
    pub seed: u64,
    pub calibration_fraction: f64,
    pub jobs: Option<usize>,
    pub out: PathBuf,
}

pub const DEFAULT_EPSILONS: [f64; 4] = [0.01, 0.05, 0.10, 0.15];

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> CliResult<Self> {
        let file = match &args.config {
            Some(p) => read_file_config(p)?,
            None => FileConfig::default(),
        };
        let kind_name = args.kind.clone().or(file.kind);
        let rho = args.rho.or(file.rho).unwrap_or(confex::conformity::DEFAULT_RHO);
        let kind = ConformityKind::parse(kind_name.as_deref().unwrap_or("superpixel"), rho)
            .map_err(|e| usage(e.to_string()))?;
        kind.validate().map_err(|e| usage(e.to_string()))?;

        let epsilons = if !args.epsilon.is_empty() {
            args.epsilon.clone()
        } else {
            file.epsilons.unwrap_or_else(|| vec![0.05])
        };
        if epsilons.is_empty() {
            return Err(usage("at least one epsilon is required"));
        }
        if let Some(e) = epsilons.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(usage(format!("epsilon must lie in (0,1), got {e}")));
        }

        let q = args.tau_quantiles.or(file.tau_quantiles).unwrap_or(DEFAULT_QUANTILES);
        if q == 0 {
            return Err(usage("--tau-quantiles must be at least 1"));
        }
        let mode_name = if args.tau_distinct {
            "distinct".to_owned()
        } else if args.tau_linspace {
            "linspace".to_owned()
        } else {
            file.tau_mode.unwrap_or_else(|| "quantile".into())
        };
        let tau_mode = TauGridMode::from_parts(&mode_name, Some(q)).map_err(|e| usage(e.to_string()))?;

        let slic = SlicParams {
            target_segments: args.slic_k.or(file.slic_k).unwrap_or(SlicParams::default().target_segments),
            compactness: args
                .slic_compactness
                .or(file.slic_compactness)
                .unwrap_or(SlicParams::default().compactness),
            ..SlicParams::default()
        };
        slic.validate().map_err(|e| usage(e.to_string()))?;

        let calibration_fraction = args.calibration_fraction.or(file.calibration_fraction).unwrap_or(0.5);
        if !(calibration_fraction > 0.0 && calibration_fraction < 1.0) {
            return Err(usage(format!(
                "calibration fraction must lie in (0,1), got {calibration_fraction}"
            )));
        }
        let jobs = args.jobs.or(file.jobs);
        if jobs == Some(0) {
            return Err(usage("--jobs must be at least 1"));
        }

        Ok(Self {
            manifest: args.manifest.clone().or(file.manifest),
            predictor: args.predictor.clone().or(file.predictor),
            kind,
            kind_given: kind_name.is_some(),
            epsilons,
            tau_mode,
            slic,
            seed: args.seed.or(file.seed).unwrap_or(0),
            calibration_fraction,
            jobs,
            out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("confex-out")),
        })
    }

    pub fn manifest_path(&self) -> CliResult<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| usage("--manifest is required for this command"))
    }

    pub fn predictor_spec(&self) -> CliResult<&str> {
        self.predictor
            .as_deref()
            .ok_or_else(|| usage("--predictor is required for this command"))
    }

    pub fn single_epsilon(&self) -> CliResult<f64> {
        match self.epsilons[..] {
            [e] => Ok(e),
            _ => Err(usage("this command takes a single --epsilon; use `evaluate --sweep` for several")),
        }
    }
}

fn read_file_config(path: &Path) -> CliResult<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

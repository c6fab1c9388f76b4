use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use clap::{Args, ValueEnum};
use confex::evaluation::{run_coverage_trial, AttributionStyle, CoverageRow, CoverageTrialConfig, Scenario};
use confex::ConformityKind;

use crate::config::{RunConfig, DEFAULT_EPSILONS};
use crate::exit::{data, CliResult};

pub const COVERAGE_FILE: &str = "coverage.csv";
pub const COVERAGE_HEADER: &str =
    "seed,kind,rho,epsilon,k,n_test,infidelity,slack,within_bound,mean_size,threshold,invalid_calibration";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioName {
    Witness,
    Fragile,
    Mixed,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "witness")]
    pub scenario: ScenarioName,
    /// Permute attributions across pixels.
    #[arg(long)]
    pub shuffled: bool,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 500)]
    pub k_calibration: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_test: usize,
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v}")
    }
}

pub fn coverage_csv(rows: &[CoverageRow]) -> String {
    let mut out = String::from(COVERAGE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.kind,
            r.rho.map(fmt_f).unwrap_or_default(),
            fmt_f(r.epsilon),
            r.k,
            r.n_test,
            fmt_f(r.infidelity),
            fmt_f(r.slack),
            r.within_bound,
            fmt_f(r.mean_size),
            fmt_f(r.threshold),
            r.invalid_calibration
        );
    }
    out
}

pub struct SimulateSummary {
    pub lines: Vec<String>,
}

pub fn cmd_simulate(cfg: &RunConfig, args: &SimulateArgs, epsilons_given: bool) -> CliResult<SimulateSummary> {
    let mut scenario = match args.scenario {
        ScenarioName::Witness => Scenario::witness(),
        ScenarioName::Fragile => Scenario::fragile_witness(),
        ScenarioName::Mixed => Scenario::mixed_evidence(),
    };
    if args.shuffled {
        scenario = scenario.with_style(AttributionStyle::Shuffled);
    }
    let kinds = if cfg.kind_given {
        vec![cfg.kind]
    } else {
        let rho = cfg.kind.rho().unwrap_or(confex::conformity::DEFAULT_RHO);
        ConformityKind::NAMES
            .iter()
            .map(|n| ConformityKind::parse(n, rho))
            .collect::<confex::Result<_>>()?
    };
    let mut trial = CoverageTrialConfig::new(scenario, kinds);
    trial.k_calibration = args.k_calibration;
    trial.n_test = args.n_test;
    trial.seeds = (cfg.seed..cfg.seed + args.seeds).collect();
    trial.epsilons = if epsilons_given { cfg.epsilons.clone() } else { DEFAULT_EPSILONS.to_vec() };
    trial.tau_mode = cfg.tau_mode;

    let start = Instant::now();
    let rows = run_coverage_trial(&trial)?;
    let elapsed = start.elapsed();
    fs::create_dir_all(&cfg.out).map_err(|e| data(format!("{}: {e}", cfg.out.display())))?;
    let path = cfg.out.join(COVERAGE_FILE);
    fs::write(&path, coverage_csv(&rows)).map_err(|e| data(format!("{}: {e}", path.display())))?;

    let mut groups: BTreeMap<(String, u64), Vec<&CoverageRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.kind.clone(), r.epsilon.to_bits())).or_default().push(r);
    }
    let mut lines = Vec::new();
    for ((kind, eps_bits), g) in &groups {
        let eps = f64::from_bits(*eps_bits);
        let n = g.len() as f64;
        let infid = g.iter().map(|r| r.infidelity).sum::<f64>() / n;
        let size = g.iter().map(|r| r.mean_size).sum::<f64>() / n;
        let ok = g.iter().filter(|r| r.within_bound).count();
        lines.push(format!(
            "{kind:<10} eps={eps:<5} mean infidelity {infid:.4}  mean size {size:.3}  within bound {ok}/{}",
            g.len()
        ));
    }
    let within = rows.iter().filter(|r| r.within_bound).count();
    lines.push(format!(
        "{within}/{} cells within eps + 3*sqrt(eps(1-eps)/n) in {:.1}s; table in {}",
        rows.len(),
        elapsed.as_secs_f64(),
        path.display()
    ));
    Ok(SimulateSummary { lines })
}

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use levy_explore::exploration::ExplorationTrajectory;
use levy_explore::measure_core::AtomicMeasure;
use levy_explore::path_sim::simulate_path;
use levy_explore::verify::{self, CheckReport, SuiteConfig};
use levy_explore::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "levy-explore", version, about = "Simulate Levy tree explorations and check their identities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of Monte Carlo paths for every simulation-based check.
    #[arg(long, global = true)]
    n_paths: Option<usize>,
    /// Small-jump truncation level.
    #[arg(long, global = true)]
    eps: Option<f64>,
    /// Time horizon of simulated paths and resolvent runs.
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Discount rate of the resolvent and martingale checks.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Initial measure as `h:m,h:m,...` (`inf` allowed as a height).
    #[arg(long, global = true, value_parser = parse_measure)]
    mu: Option<AtomicMeasure>,
    /// Output directory for reports.
    #[arg(long, global = true, env = "LEVY_EXPLORE_OUT", default_value = "levy-explore-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one truncated path and write it as CSV.
    Simulate,
    /// Explore one path and write the event summary as CSV.
    Explore,
    /// Run all twelve checks.
    VerifyInvariants,
    Martingale,
    Resolvent,
    Duality,
    PoissonRep,
    TiltCheck,
    MetricCheck,
}

/// Settings of `simulate` and `explore`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct PathConfig {
    eps: f64,
    horizon: f64,
    mu: AtomicMeasure,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self { eps: 1e-3, horizon: 1.0, mu: AtomicMeasure::zero() }
    }
}

/// The experiment file: `[path]` for single-path commands, `[suite]` for checks.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
struct ExperimentConfig {
    path: PathConfig,
    suite: SuiteConfig,
}

fn parse_measure(s: &str) -> std::result::Result<AtomicMeasure, String> {
    let mut atoms = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (h, m) = part.split_once(':').ok_or_else(|| format!("expected `h:m`, got `{part}`"))?;
        let h: f64 = h.trim().parse().map_err(|e| format!("height `{h}`: {e}"))?;
        let m: f64 = m.trim().parse().map_err(|e| format!("mass `{m}`: {e}"))?;
        atoms.push((h, m));
    }
    AtomicMeasure::from_atoms(atoms).map_err(|e| e.to_string())
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => toml::from_str::<ExperimentConfig>(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    let s = &mut cfg.suite;
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    if let Some(n) = common.n_paths {
        s.set_n_paths(n);
    }
    if let Some(eps) = common.eps {
        s.set_eps(eps);
        cfg.path.eps = eps;
    }
    if let Some(h) = common.horizon {
        cfg.path.horizon = h;
        for c in &mut s.resolvent.cases {
            c.horizon = Some(h);
        }
    }
    if let Some(l) = common.lambda {
        s.martingale.lambda = l;
        for c in &mut s.resolvent.cases {
            c.lambda = l;
        }
    }
    if let Some(mu) = &common.mu {
        cfg.path.mu = mu.clone();
        s.martingale.mu = mu.clone();
        for c in &mut s.resolvent.cases {
            c.mu = mu.clone();
        }
    }
    if !(cfg.path.eps > 0.0) {
        return Err(Error::Config { field: "path.eps".into(), message: "must be positive".into() });
    }
    if !(cfg.path.horizon > 0.0 && cfg.path.horizon.is_finite()) {
        return Err(Error::Config { field: "path.horizon".into(), message: "must be positive".into() });
    }
    cfg.suite.validate()?;
    Ok(cfg)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(format!("{name}.json")), text)?;
    Ok(())
}

fn write_reports(dir: &Path, reports: &[CheckReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["check", "pass", "max_error", "max_abs_z"])?;
    for r in reports {
        write_json(dir, &r.check, r)?;
        let field = |k: &str| r.summary.get(k).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.check.clone(), r.pass.to_string(), field("max_error"), field("max_abs_z")])?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = resolve(&cli.common)?;
    let out = &cli.common.out;
    fs::create_dir_all(out)?;
    write_json(out, "config", &cfg)?;
    let suite = &cfg.suite;
    let reports = match cli.command {
        Command::Simulate | Command::Explore => {
            let tm = suite.mechanism.truncate(cfg.path.eps)?;
            let path = simulate_path(&tm, cfg.path.horizon, suite.seed)?;
            path.write_csv(BufWriter::new(fs::File::create(out.join("path.csv"))?))?;
            let mut summary = json!({
                "config": { "mechanism": suite.mechanism, "seed": suite.seed, "path": cfg.path },
                "truncation": tm.summary(),
                "n_jumps": path.n_jumps(),
                "final_value": path.value(cfg.path.horizon),
                "final_infimum": path.infimum(cfg.path.horizon),
            });
            if matches!(cli.command, Command::Explore) {
                let tr = ExplorationTrajectory::explore(path, cfg.path.mu.clone())?;
                tr.write_summary_csv(BufWriter::new(fs::File::create(out.join("trajectory.csv"))?))?;
                summary["excursions"] = json!(tr.excursion_decomposition().len());
                summary["sigma"] = json!(tr.sigma());
                summary["final_height"] = json!(tr.height_at(cfg.path.horizon)?);
            }
            write_json(out, "path", &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            return Ok(true);
        }
        Command::VerifyInvariants => verify::run_all(suite)?,
        Command::Martingale => verify::run_check("martingale", suite)?,
        Command::Resolvent => verify::run_check("resolvent", suite)?,
        Command::Duality => verify::run_check("duality", suite)?,
        Command::PoissonRep => {
            let mut r = verify::run_check("poisson-sampler", suite)?;
            r.push(verify::excursion_checks(suite)?.1);
            r
        }
        Command::TiltCheck => verify::run_check("tilt-algebra", suite)?,
        Command::MetricCheck => verify::run_check("metric", suite)?,
    };
    write_reports(out, &reports)?;
    for r in &reports {
        println!("{} {}", if r.pass { "PASS" } else { "FAIL" }, r.check);
    }
    Ok(reports.iter().all(|r| r.pass))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

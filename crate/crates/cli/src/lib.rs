//! Command-line harness: reads a config, runs suites, writes JSON summaries and
//! CSV tables. Nothing is written unless every computation succeeds.

pub mod config;
pub mod suites;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use config::{ConfigError, ExperimentConfig};
use suites::{Seeds, SuiteError};

#[derive(Debug, Parser)]
#[command(name = "msrg", version, about = "Multiscale block-spin checks and data tables")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Key-value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Residual tolerance for verify.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum Command {
    /// Run the identity suites; exit 1 if any residual exceeds the tolerance.
    Verify,
    /// Random-walk Green's function decay scan over two cube sizes.
    Decay,
    /// Cluster expansion with holes against the brute-force integral.
    Cluster,
    /// Single-step Gaussian flow comparisons and the coupling trajectory.
    Flow,
    /// Polymer sum thresholds, tree-length checks and a polymer table.
    Polymers,
    /// Everything above in one summary.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Decay => "decay",
            Command::Cluster => "cluster",
            Command::Flow => "flow",
            Command::Polymers => "polymers",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Suite(#[from] SuiteError),
    #[error("writing {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Suite(SuiteError::Infeasible(_)) => 2,
            _ => 3,
        }
    }
}

pub fn resolve(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.out = o.clone();
    }
    if let Some(t) = cli.tol {
        c.tol = t;
    }
    c.validate()?;
    Ok(c)
}

/// Files produced by one run, held in memory until all succeed.
struct Artifacts(Vec<(String, Vec<u8>)>);

impl Artifacts {
    fn json(&mut self, name: &str, v: &Value) {
        let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
        s.push('\n');
        self.0.push((name.to_string(), s.into_bytes()));
    }

    fn csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<(), RunError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        self.0.push((name.to_string(), w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?));
        Ok(())
    }

    fn raw(&mut self, name: &str, body: String) {
        self.0.push((name.to_string(), body.into_bytes()));
    }

    fn write(self, dir: &Path) -> Result<(), RunError> {
        let err = |path: PathBuf| move |source| RunError::Write { path, source };
        std::fs::create_dir_all(dir).map_err(err(dir.to_path_buf()))?;
        for (name, bytes) in self.0 {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(err(p.clone()))?;
        }
        Ok(())
    }
}

fn envelope(cmd: Command, c: &ExperimentConfig, body: Value) -> Value {
    let mut v = json!({
        "command": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": msrg::VERSION,
        "config": c,
        "config_hash": c.hash(),
    });
    if let (Value::Object(m), Value::Object(b)) = (&mut v, body) {
        m.extend(b);
    }
    v
}

#[derive(Serialize)]
struct ClusterRow {
    mask: u64,
    size: u32,
    h_sharp: f64,
}

#[derive(Serialize)]
struct DecayCsvRow<'a> {
    #[serde(rename = "M")]
    big_m: &'a str,
    j: &'a str,
    j_prime: &'a str,
    y: &'a str,
    y_prime: &'a str,
    d_omega: &'a str,
    value: &'a str,
    kind: &'a str,
}

fn add_decay(a: &mut Artifacts, s: &suites::DecaySummary) -> Result<(), RunError> {
    let rows: Vec<DecayCsvRow> = s
        .runs
        .iter()
        .flat_map(|r| &r.csv)
        .map(|f| DecayCsvRow {
            big_m: &f[0],
            j: &f[1],
            j_prime: &f[2],
            y: &f[3],
            y_prime: &f[4],
            d_omega: &f[5],
            value: &f[6],
            kind: &f[7],
        })
        .collect();
    a.csv("decay.csv", &rows)
}

fn add_cluster(a: &mut Artifacts, s: &suites::ClusterSummary) -> Result<(), RunError> {
    let rows: Vec<ClusterRow> =
        s.polymers.iter().map(|&y| ClusterRow { mask: y, size: y.count_ones(), h_sharp: s.h_sharp[y as usize] }).collect();
    a.csv("cluster.csv", &rows)
}

/// Runs one subcommand. Returns whether every check passed.
pub fn run(cmd: Command, c: &ExperimentConfig) -> Result<bool, RunError> {
    let seeds = Seeds::new(c.seed);
    let mut a = Artifacts(Vec::new());
    let mut ok = true;
    match cmd {
        Command::Verify => {
            let checks = suites::verify(c, &seeds)?;
            ok = checks.iter().all(|k| k.passed);
            a.json("verify.json", &envelope(cmd, c, json!({ "tol": c.tol, "checks": checks, "passed": ok })));
            a.csv("verify.csv", &checks)?;
        }
        Command::Decay => {
            let s = suites::decay(c)?;
            a.json("decay.json", &envelope(cmd, c, json!({ "decay": s })));
            add_decay(&mut a, &s)?;
        }
        Command::Cluster => {
            let s = suites::cluster(c, seeds.cluster)?;
            a.json("cluster.json", &envelope(cmd, c, json!({ "cluster": s })));
            add_cluster(&mut a, &s)?;
        }
        Command::Flow => {
            let s = suites::flow(c, &seeds)?;
            a.raw("flow.csv", msrg::renormflow::trajectory_csv(&s.trajectory));
            a.json("flow.json", &envelope(cmd, c, json!({ "flow": s })));
        }
        Command::Polymers => {
            let s = suites::polymers()?;
            a.json("polymers.json", &envelope(cmd, c, json!({ "polymers": s })));
            a.csv("polymers.csv", &s.rows)?;
        }
        Command::Report => {
            let checks = suites::verify(c, &seeds)?;
            ok = checks.iter().all(|k| k.passed);
            let body = json!({
                "tol": c.tol,
                "checks": checks,
                "passed": ok,
                "decay": suites::decay(c)?,
                "cluster": suites::cluster(c, seeds.cluster)?,
                "flow": suites::flow(c, &seeds)?,
                "polymers": suites::polymers()?,
            });
            a.json("report.json", &envelope(cmd, c, body));
        }
    }
    a.write(&c.out)?;
    Ok(ok)
}

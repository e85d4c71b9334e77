//! Scenario runner behind the `pmlab` binary.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use pmlab_core::suite::{randomized_suite, SuiteConfig, SuiteReport};
use pmlab_core::{run_experiment, ExperimentOutcome, ScenarioConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] pmlab_core::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seed_override: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub report: Value,
    pub outcomes: Vec<ExperimentOutcome>,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.outcomes.iter().all(|o| o.pass) {
            EXIT_PASS
        } else {
            EXIT_VIOLATION
        }
    }

    /// Plain-text table of experiment results.
    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:<22} {:<6} {:>12}\n", "experiment", "kind", "pass", "min_slack");
        for o in &self.outcomes {
            let slack = o.min_slack.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!("{:<28} {:<22} {:<6} {:>12}\n", o.name, o.kind.name(), o.pass, slack));
        }
        s
    }
}

/// `sha256:<hex>` of the raw config bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

fn write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("report serializes");
    s.push(b'\n');
    s
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Pool(e.to_string()))
}

/// Loads, runs and writes one scenario. Config and IO problems are errors;
/// failed inequalities are reported through [`RunSummary::exit_code`].
pub fn run_scenario(opts: &RunOptions) -> Result<RunSummary, CliError> {
    let bytes = fs::read(&opts.config).map_err(io_err(&opts.config))?;
    let text = String::from_utf8_lossy(&bytes);
    let mut cfg = ScenarioConfig::from_toml(&text)?;
    if let Some(s) = opts.seed_override {
        cfg.seed = s;
    }
    let base = opts.config.parent().unwrap_or(Path::new("."));
    let out_dir = match (&opts.out, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) => base.join(d),
        (None, None) => base.join("pmlab-out"),
    };

    let outcomes: Vec<ExperimentOutcome> = pool(opts.jobs)?.install(|| {
        (0..cfg.experiments.len())
            .into_par_iter()
            .map(|i| run_experiment(&cfg, i))
            .collect::<Result<_, _>>()
    })?;

    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let mut entries = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let mut files = Vec::new();
        for t in &o.tables {
            let name = format!("{}_{}.csv", o.name, t.suffix);
            write(&out_dir.join(&name), t.csv.as_bytes())?;
            files.push(name);
        }
        if let Some(v) = &o.violation {
            let name = format!("{}_violation.json", o.name);
            write(&out_dir.join(&name), &pretty(v))?;
            files.push(name);
        }
        entries.push(json!({
            "name": o.name,
            "kind": o.kind,
            "seed": o.seed,
            "pass": o.pass,
            "min_slack": o.min_slack,
            "files": files,
            "violation": o.violation,
            "report": o.report,
        }));
    }
    let report = json!({
        "tool": "pmlab",
        "version": VERSION,
        "config_hash": config_hash(&bytes),
        "seed": cfg.seed,
        "pass": outcomes.iter().all(|o| o.pass),
        "experiments": entries,
    });
    write(&out_dir.join("report.json"), &pretty(&report))?;
    Ok(RunSummary {
        out_dir,
        report,
        outcomes,
    })
}

/// Report wrapper for `pmlab random`.
#[derive(Debug, Clone, Serialize)]
pub struct RandomReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub suite: SuiteReport,
}

/// Failure of the randomized suite, with the replayable instance.
#[derive(Debug, Clone, Serialize)]
pub struct RandomViolation {
    pub check: String,
    pub slack: f64,
    pub instance: Value,
}

pub enum RandomOutcome {
    Pass(RandomReport),
    Violation(RandomViolation),
}

pub fn run_random(cfg: &SuiteConfig, jobs: Option<usize>, out: Option<&Path>) -> Result<RandomOutcome, CliError> {
    let result = pool(jobs)?.install(|| randomized_suite(cfg));
    let outcome = match result {
        Ok(suite) => RandomOutcome::Pass(RandomReport {
            tool: "pmlab",
            version: VERSION,
            suite,
        }),
        Err(pmlab_core::Error::InequalityViolated { check, slack, instance }) => RandomOutcome::Violation(RandomViolation {
            check,
            slack,
            instance: serde_json::from_str(&instance).unwrap_or(Value::String(instance)),
        }),
        Err(e) => return Err(e.into()),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        match &outcome {
            RandomOutcome::Pass(r) => write(&dir.join("report.json"), &pretty(r))?,
            RandomOutcome::Violation(v) => write(&dir.join("violation.json"), &pretty(v))?,
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_hex() {
        let h = config_hash(b"seed = 1\n");
        assert!(h.starts_with("sha256:") && h.len() == 7 + 64);
        assert_eq!(h, config_hash(b"seed = 1\n"));
        assert_ne!(h, config_hash(b"seed = 2\n"));
    }
}

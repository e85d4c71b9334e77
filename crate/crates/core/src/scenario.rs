//! Runs one configured experiment and packages its report and tables.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Experiment, ExperimentKind, ScenarioConfig};
use crate::drift::counterexample::counterexample_ledger;
use crate::drift::imh::check_imh_drift;
use crate::drift::rwm::check_rwm_drift;
use crate::drift::unifdrift::{verify_unifdrift_condition, UnifDriftConfig};
use crate::drift::uniform::check_uniform_marginal_drift;
use crate::drift::{DriftError, DriftReport};
use crate::engine::{tv_distance_scan, variance_convergence_experiment};
use crate::spectral::{gap_collapse_scan, verify_acceptance_order, verify_gap_sandwich, verify_variance_order, InequalityCheck};
use crate::target::ModelSpec;
use crate::weights::{WeightFamily, WeightGrid};
use crate::Error;

/// A CSV table written next to the report as `<experiment>_<suffix>.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub suffix: String,
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub check: String,
    pub slack: f64,
    pub detail: String,
    /// Everything needed to replay the failing computation.
    pub instance: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub name: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub pass: bool,
    pub min_slack: Option<f64>,
    pub report: Value,
    pub violation: Option<Violation>,
    #[serde(skip)]
    pub tables: Vec<Table>,
}

fn csv_string<F>(fill: F) -> Result<String, Error>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        fill(&mut w)?;
        w.flush()?;
    }
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn checks_table(checks: &[InequalityCheck]) -> Result<String, Error> {
    csv_string(|w| {
        w.write_record(["check", "lhs", "rhs", "slack"])?;
        for c in checks {
            w.serialize((&c.name, c.lhs, c.rhs, c.slack))?;
        }
        Ok(())
    })
}

fn points_table(r: &DriftReport) -> Result<String, Error> {
    let mut buf = Vec::new();
    r.write_points_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn worst_check<'a>(checks: impl IntoIterator<Item = &'a InequalityCheck>) -> Option<&'a InequalityCheck> {
    checks.into_iter().min_by(|a, b| a.slack.total_cmp(&b.slack))
}

struct Ctx<'a> {
    model: Option<&'a ModelSpec>,
    family: Option<&'a WeightFamily>,
    instance: Value,
}

impl Ctx<'_> {
    fn model(&self) -> Result<&ModelSpec, Error> {
        self.model.ok_or_else(|| Error::Config {
            key: "model".into(),
            message: "missing key".into(),
        })
    }

    fn family(&self) -> Result<&WeightFamily, Error> {
        self.family.ok_or_else(|| Error::Config {
            key: "family".into(),
            message: "missing key".into(),
        })
    }

    fn violation(&self, c: &InequalityCheck) -> Violation {
        Violation {
            check: c.name.clone(),
            slack: c.slack,
            detail: format!("{} ≤ {} fails", c.lhs, c.rhs),
            instance: self.instance.clone(),
        }
    }
}

struct Partial {
    pass: bool,
    min_slack: Option<f64>,
    report: Value,
    violation: Option<Violation>,
    tables: Vec<Table>,
}

fn table(suffix: &str, csv: String) -> Table {
    Table {
        suffix: suffix.into(),
        csv,
    }
}

/// Turns the checks of a batch into a pass flag and the worst offender.
fn judge(ctx: &Ctx, checks: &[InequalityCheck], tol: f64) -> (bool, Option<f64>, Option<Violation>) {
    let worst = worst_check(checks);
    let min = worst.map(|c| c.slack);
    match worst {
        Some(c) if c.slack < -tol => (false, min, Some(ctx.violation(c))),
        _ => (true, min, None),
    }
}

/// Drift outcomes: a failed check is an inequality violation, anything else
/// is returned as an error.
fn drift_partial(ctx: &Ctx, result: Result<DriftReport, DriftError>) -> Result<Partial, Error> {
    match result {
        Ok(r) => {
            let tables = vec![table("points", points_table(&r)?)];
            let violation = if r.pass {
                None
            } else {
                let (check, slack, detail) = match r.ensure() {
                    Err(DriftError::DriftFail { regime, x, w, slack }) => (regime, slack, format!("x = {x}, w = {w}")),
                    Err(e) => ("minorization".to_string(), f64::NAN, e.to_string()),
                    Ok(()) => ("unknown".to_string(), f64::NAN, String::new()),
                };
                Some(Violation {
                    check,
                    slack,
                    detail,
                    instance: ctx.instance.clone(),
                })
            };
            Ok(Partial {
                pass: r.pass,
                min_slack: Some(r.min_slack),
                report: serde_json::to_value(&r).expect("report serializes"),
                violation,
                tables,
            })
        }
        Err(e) => {
            let (check, slack) = match &e {
                DriftError::DriftFail { regime, slack, .. } => (regime.clone(), *slack),
                DriftError::MinorizationFail(_) => ("minorization".to_string(), f64::NAN),
                DriftError::HypothesisFail(_) => ("hypothesis".to_string(), f64::NAN),
                _ => return Err(e.into()),
            };
            Ok(Partial {
                pass: false,
                min_slack: None,
                report: json!({ "error": e.to_string() }),
                violation: Some(Violation {
                    check,
                    slack,
                    detail: e.to_string(),
                    instance: ctx.instance.clone(),
                }),
                tables: Vec::new(),
            })
        }
    }
}

fn default_g(model: &ModelSpec, g: &Option<Vec<f64>>) -> Result<Vec<f64>, Error> {
    match g {
        Some(g) if g.len() == model.len() => Ok(g.clone()),
        Some(g) => Err(Error::Config {
            key: "params.g".into(),
            message: format!("has {} entries, model has {} states", g.len(), model.len()),
        }),
        None => Ok((0..model.len()).map(|x| x as f64).collect()),
    }
}

/// Runs experiment `index` of `cfg`.
pub fn run_experiment(cfg: &ScenarioConfig, index: usize) -> Result<ExperimentOutcome, Error> {
    let entry = &cfg.experiments[index];
    let seed = cfg.experiment_seed(index);
    let kind = entry.experiment.kind();
    let base_instance = if kind.needs_model() {
        json!({ "model": cfg.model_config, "family": cfg.family, "experiment": entry.experiment })
    } else {
        json!({ "experiment": entry.experiment, "seed": seed })
    };
    let ctx = Ctx {
        model: cfg.model.as_ref(),
        family: cfg.family.as_ref(),
        instance: base_instance,
    };

    let part = match &entry.experiment {
        Experiment::SpectralSandwich(p) => {
            let model = ctx.model()?;
            let grid = WeightGrid::from_family(ctx.family()?, model.len(), &p.grid)?;
            let gaps = verify_gap_sandwich(model, &grid)?;
            let acc = verify_acceptance_order(model, &grid);
            let checks: Vec<InequalityCheck> = gaps.checks.iter().chain(&acc.checks).cloned().collect();
            let (pass, min_slack, violation) = judge(&ctx, &checks, p.tolerance);
            Partial {
                pass,
                min_slack,
                report: json!({ "gaps": gaps, "acceptance": acc }),
                violation,
                tables: vec![table("checks", checks_table(&checks)?)],
            }
        }
        Experiment::VarianceOrder(p) => {
            let model = ctx.model()?;
            let grid = WeightGrid::from_family(ctx.family()?, model.len(), &p.grid)?;
            let g = default_g(model, &p.g)?;
            let r = verify_variance_order(model, &grid, &g, p.lambda)?;
            let (pass, min_slack, violation) = judge(&ctx, &r.checks, p.tolerance);
            Partial {
                pass,
                min_slack,
                tables: vec![table("checks", checks_table(&r.checks)?)],
                report: serde_json::to_value(&r).expect("report serializes"),
                violation,
            }
        }
        Experiment::VarianceConvergence(p) => {
            let model = ctx.model()?;
            let family = ctx.family()?;
            let g = default_g(model, &p.g)?;
            let t = variance_convergence_experiment(model, family, &p.ns, &g, &p.grid)?;
            let mut checks = t.checks.clone();
            let mut tables = vec![table("convergence", {
                let mut buf = Vec::new();
                t.write_csv(&mut buf)?;
                String::from_utf8(buf).expect("csv output is utf-8")
            })];
            let tv = match p.tv_epsilon {
                Some(eps) => {
                    let rows = tv_distance_scan(model, family, &p.ns, eps, &p.grid)?;
                    for r in &rows {
                        checks.push(InequalityCheck::le(&format!("tv_bound_N{}", r.n), r.max_bound_violation, 0.0));
                    }
                    tables.push(table(
                        "tv",
                        csv_string(|w| {
                            w.write_record(["N", "core_sup", "core_mass", "max_bound_violation"])?;
                            for r in &rows {
                                w.serialize((r.n, r.core_sup, r.core_mass, r.max_bound_violation))?;
                            }
                            Ok(())
                        })?,
                    ));
                    Some(rows)
                }
                None => None,
            };
            let (pass, min_slack, violation) = judge(&ctx, &checks, p.tolerance);
            let n_range = (p.ns.iter().min().copied(), p.ns.iter().max().copied());
            Partial {
                pass,
                min_slack,
                report: json!({ "table": t, "tv": tv, "n_range_covered": n_range }),
                violation,
                tables,
            }
        }
        Experiment::GapCollapse(p) => {
            let model = ctx.model()?;
            let points = gap_collapse_scan(model, ctx.family()?, &p.grid, &p.upper_quantiles)?;
            let mut checks: Vec<InequalityCheck> = points
                .iter()
                .map(|c| InequalityCheck::le(&format!("tail_bound_q{}", c.upper_quantile), c.gap, c.tail_bound))
                .collect();
            if let (Some(first), Some(last)) = (points.first(), points.last()) {
                if points.len() > 1 {
                    checks.push(InequalityCheck::le("gap_shrinks", last.gap, first.gap));
                }
            }
            let (pass, min_slack, violation) = judge(&ctx, &checks, p.tolerance);
            Partial {
                pass,
                min_slack,
                report: json!({ "points": points, "checks": checks }),
                violation,
                tables: vec![table(
                    "gaps",
                    csv_string(|w| {
                        w.write_record(["upper_quantile", "gap", "max_weight", "tail_mass", "tail_bound"])?;
                        for c in &points {
                            w.serialize((c.upper_quantile, c.gap, c.max_weight, c.tail_mass, c.tail_bound))?;
                        }
                        Ok(())
                    })?,
                )],
            }
        }
        Experiment::DriftImh(p) => drift_partial(&ctx, check_imh_drift(ctx.model()?, ctx.family()?, &p.grid, p.flavor))?,
        Experiment::DriftUniform(p) => {
            drift_partial(&ctx, check_uniform_marginal_drift(ctx.model()?, ctx.family()?, &p.grid, p.beta))?
        }
        Experiment::DriftRwm(p) => {
            let mut scan = p.scan.clone();
            scan.seed = seed;
            drift_partial(&ctx, check_rwm_drift(&p.model, p.exponents, &p.mode, &scan))?
        }
        Experiment::Counterexample(c) => {
            let r = counterexample_ledger(c)?;
            let checks: Vec<InequalityCheck> = r
                .blocks
                .iter()
                .map(|b| InequalityCheck::le(&format!("quotient_k{}", b.k), b.quotient, b.bound))
                .chain(std::iter::once(InequalityCheck::le("drift_ratio_error", r.drift_error, 1e-12)))
                .collect();
            let (_, min_slack, violation) = judge(&ctx, &checks, 0.0);
            let tables = vec![table(
                "blocks",
                csv_string(|w| {
                    w.write_record(["k", "epsilon", "quotient", "bound", "quotient_matrix", "left_gap_upper", "left_gap_exact"])?;
                    for b in &r.blocks {
                        w.serialize((b.k, b.epsilon, b.quotient, b.bound, b.quotient_matrix, b.left_gap_upper, b.left_gap_exact))?;
                    }
                    Ok(())
                })?,
            )];
            let violation = violation.or_else(|| {
                (!r.pass).then(|| Violation {
                    check: "left_gap_trend".into(),
                    slack: f64::NAN,
                    detail: "left-gap bounds do not decrease with k".into(),
                    instance: ctx.instance.clone(),
                })
            });
            Partial {
                pass: r.pass && violation.is_none(),
                min_slack,
                report: serde_json::to_value(&r).expect("report serializes"),
                violation,
                tables,
            }
        }
        Experiment::Unifdrift(p) => {
            let ucfg = UnifDriftConfig {
                ns: p.ns.clone(),
                v_levels: p.v_levels.clone(),
                premise: p.premise.clone(),
                grid: p.grid,
            };
            match verify_unifdrift_condition(ctx.model()?, ctx.family()?, &p.drift, &ucfg) {
                Ok(r) => {
                    let min_slack = r.per_n.iter().map(|x| x.report.min_slack).fold(f64::INFINITY, f64::min);
                    let tables = vec![table(
                        "per_n",
                        csv_string(|w| {
                            w.write_record(["N", "min_slack", "pass", "epsilon_first_level", "stationary_premise"])?;
                            for x in &r.per_n {
                                let eps = x.levels.first().map(|m| m.epsilon);
                                w.serialize((x.n, x.report.min_slack, x.report.pass, eps, x.stationary_premise))?;
                            }
                            Ok(())
                        })?,
                    )];
                    let violation = (!r.pass).then(|| {
                        let bad = r.per_n.iter().find(|x| !x.report.pass);
                        Violation {
                            check: "unifdrift".into(),
                            slack: bad.map(|x| x.report.min_slack).unwrap_or(f64::NAN),
                            detail: match bad {
                                Some(x) => format!("fails at N = {}", x.n),
                                None => "a sublevel minorization or premise failed".into(),
                            },
                            instance: ctx.instance.clone(),
                        }
                    });
                    Partial {
                        pass: r.pass,
                        min_slack: min_slack.is_finite().then_some(min_slack),
                        report: serde_json::to_value(&r).expect("report serializes"),
                        violation,
                        tables,
                    }
                }
                Err(e) => drift_partial(&ctx, Err(e))?,
            }
        }
    };
    Ok(ExperimentOutcome {
        name: entry.name.clone(),
        kind,
        seed,
        pass: part.pass,
        min_slack: part.min_slack,
        report: part.report,
        violation: part.violation,
        tables: part.tables,
    })
}

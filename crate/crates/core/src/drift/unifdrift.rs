//! Drift and sublevel minorization holding uniformly over a list of
//! averaging sizes `N`, plus the tail-condition premises.

use serde::{Deserialize, Serialize};

use crate::kernels::{JointLayout, JointState, KernelKind};
use crate::target::ModelSpec;
use crate::weights::{GridSpec, WeightFamily, WeightGrid};

use super::{
    dense_kernel_rows, evaluate_grid, minorization_summary, row_minorization, DriftError, DriftForm, DriftReport,
    DriftSpec, EvaluatedPoint, Minorization, Scope, EXACT_TOL,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailPremise {
    pub kappa: f64,
    pub lambda: f64,
    /// `g(x)`; the identity when absent.
    #[serde(default)]
    pub g: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifDriftConfig {
    pub ns: Vec<usize>,
    /// Sublevels `{V ≤ v}` to minorize.
    pub v_levels: Vec<f64>,
    #[serde(default)]
    pub premise: Option<TailPremise>,
    #[serde(default)]
    pub grid: GridSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerN {
    #[serde(rename = "N")]
    pub n: usize,
    pub report: DriftReport,
    pub levels: Vec<Minorization>,
    /// `π̃_N((|g|+1) V^{1−λα})`.
    pub stationary_premise: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub v: f64,
    /// `min_N ε_v(N)`.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifDriftReport {
    pub epsilon_v: f64,
    pub b_v: f64,
    pub alpha: f64,
    pub per_n: Vec<PerN>,
    pub levels: Vec<LevelSummary>,
    /// `sup |g| / V^{κα(1−λ)}` over all grids.
    pub g_norm: Option<f64>,
    pub sup_stationary_premise: Option<f64>,
    pub pass: bool,
}

struct Evaluated {
    n: usize,
    grid: WeightGrid,
    points: Vec<(JointState, f64, f64, bool)>,
}

fn drift_exponent(form: &DriftForm) -> Option<f64> {
    match form {
        DriftForm::Geometric { .. } => Some(1.0),
        DriftForm::Polynomial { alpha, .. } => Some(*alpha),
        DriftForm::SubgeomKappa { .. } => None,
    }
}

pub fn verify_unifdrift_condition(
    model: &ModelSpec,
    base: &WeightFamily,
    spec: &DriftSpec,
    cfg: &UnifDriftConfig,
) -> Result<UnifDriftReport, DriftError> {
    spec.form.validate()?;
    if cfg.ns.is_empty() || cfg.ns.contains(&0) {
        return Err(DriftError::Invalid("N list must be non-empty and positive".into()));
    }
    let v = spec.v.build();
    let kind = KernelKind::Pseudo;
    let mut evaluated = Vec::with_capacity(cfg.ns.len());
    for &n in &cfg.ns {
        let family = if n == 1 { base.clone() } else { base.clone().averaged(n) };
        let grid = WeightGrid::from_family(&family, model.len(), &cfg.grid)?;
        let vf = v.clone();
        let points = evaluate_grid(model, &grid, &kind, &move |s| vf(s))
            .into_iter()
            .map(|(gp, pv)| {
                let s = JointState { x: gp.x, w: gp.w };
                (s, v(s), pv, spec.region.contains(s))
            })
            .collect();
        evaluated.push(Evaluated { n, grid, points });
    }
    if let Some(bad) = evaluated.iter().flat_map(|e| e.points.iter()).find(|p| p.1 < 1.0 - 1e-12) {
        return Err(DriftError::Invalid(format!("V = {} < 1 at x = {}", bad.1, bad.0.x)));
    }

    let all = || evaluated.iter().flat_map(|e| e.points.iter());
    let eps_v = match spec.form.given_c() {
        Some(c) => c,
        None => all()
            .filter(|p| !p.3)
            .map(|p| (p.1 - p.2) / spec.form.rate(p.1))
            .fold(f64::INFINITY, f64::min),
    };
    if !(eps_v > 0.0 && eps_v.is_finite()) {
        let worst = all()
            .filter(|p| !p.3)
            .min_by(|a, b| (a.1 - a.2).total_cmp(&(b.1 - b.2)));
        return Err(match worst {
            Some(p) => DriftError::DriftFail {
                regime: "outside_C".into(),
                x: p.0.x as f64,
                w: p.0.w,
                slack: p.1 - p.2,
            },
            None => DriftError::Invalid("no points outside C".into()),
        });
    }
    let b_v = spec.bound_b.unwrap_or_else(|| {
        all()
            .filter(|p| p.3)
            .map(|p| p.2 - p.1 + eps_v * spec.form.rate(p.1))
            .fold(0.0, f64::max)
    });

    let alpha = drift_exponent(&spec.form);
    let premise_alpha = match (&cfg.premise, alpha) {
        (Some(_), None) => return Err(DriftError::Invalid("tail premises need a polynomial or geometric form".into())),
        (Some(p), Some(a)) => {
            if !(0.0..1.0).contains(&p.kappa) || !(0.0..1.0).contains(&p.lambda) {
                return Err(DriftError::Invalid("kappa and lambda must lie in [0,1)".into()));
            }
            Some((p, a))
        }
        (None, _) => None,
    };
    let g_at = |x: usize| -> f64 {
        match premise_alpha.and_then(|(p, _)| p.g.as_ref()) {
            Some(g) => g.get(x).copied().unwrap_or(f64::NAN),
            None => x as f64,
        }
    };

    let mut per_n = Vec::with_capacity(evaluated.len());
    let mut g_norm: f64 = 0.0;
    let mut sup_premise: f64 = 0.0;
    let mut pass = true;
    for e in &evaluated {
        let points: Vec<EvaluatedPoint> = e
            .points
            .iter()
            .map(|&(s, vv, pv, in_c)| {
                let required = vv - eps_v * spec.form.rate(vv) + if in_c { b_v } else { 0.0 };
                EvaluatedPoint {
                    x: s.x as f64,
                    w: s.w,
                    v: vv,
                    pv,
                    required,
                    slack: required - pv,
                    regime: if in_c { "C" } else { "outside_C" }.into(),
                    error: 0.0,
                }
            })
            .collect();
        let mut report = DriftReport::new(points, Scope::AllGridPoints, EXACT_TOL);
        report.set("epsilon_V", eps_v);
        report.set("b_V", b_v);

        let layout = JointLayout::new(model, &e.grid, false);
        let mut levels = Vec::with_capacity(cfg.v_levels.len());
        for &level in &cfg.v_levels {
            let rows: Vec<usize> = (0..layout.len()).filter(|&i| e.points[i].1 <= level).collect();
            let dense = dense_kernel_rows(model, &e.grid, &layout, &kind, &rows);
            let (eps, nu) = row_minorization(&dense, &rows);
            let m = minorization_summary(&dense, &rows, eps, &nu, 1);
            report.fail_unless(m.verified(1e-12));
            levels.push(m);
        }
        report.minorization = levels.first().cloned();

        let stationary_premise = premise_alpha.map(|(p, a)| {
            let mut total = 0.0;
            for x in 0..model.len() {
                let px = model.target().prob(x);
                if px == 0.0 {
                    continue;
                }
                for (node, t) in e.grid.tilted(x) {
                    let s = JointState { x, w: e.grid.nodes()[node] };
                    let vv = v(s);
                    total += px * t * (g_at(x).abs() + 1.0) * vv.powf(1.0 - p.lambda * a);
                    g_norm = g_norm.max(g_at(x).abs() / vv.powf(p.kappa * a * (1.0 - p.lambda)));
                }
            }
            sup_premise = sup_premise.max(total);
            total
        });
        pass &= report.pass;
        per_n.push(PerN {
            n: e.n,
            report,
            levels,
            stationary_premise,
        });
    }
    let levels: Vec<LevelSummary> = cfg
        .v_levels
        .iter()
        .enumerate()
        .map(|(i, &lv)| LevelSummary {
            v: lv,
            epsilon: per_n.iter().map(|p| p.levels[i].epsilon).fold(f64::INFINITY, f64::min),
        })
        .collect();
    pass &= levels.iter().all(|l| l.epsilon > 0.0);
    let (g_norm, sup_premise) = match premise_alpha {
        Some(_) => {
            pass &= g_norm.is_finite() && sup_premise.is_finite();
            (Some(g_norm), Some(sup_premise))
        }
        None => (None, None),
    };
    Ok(UnifDriftReport {
        epsilon_v: eps_v,
        b_v,
        alpha: alpha.unwrap_or(f64::NAN),
        per_n,
        levels,
        g_norm,
        sup_stationary_premise: sup_premise,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{Region, VSpec};
    use crate::target::{ProposalKernel, TargetDistribution};

    fn chain(n: usize) -> ModelSpec {
        ModelSpec::new(TargetDistribution::geometric(n, 0.5).unwrap(), ProposalKernel::nearest_neighbour()).unwrap()
    }

    fn spec() -> DriftSpec {
        DriftSpec {
            v: VSpec::GeometricX { base: 1.15 },
            form: DriftForm::Polynomial { alpha: 1.0, c: None },
            region: Region::states(0),
            bound_b: None,
        }
    }

    #[test]
    fn constant_one_reduces_to_marginal() {
        let cfg = UnifDriftConfig {
            ns: vec![1, 2, 4],
            v_levels: vec![1.0],
            premise: None,
            grid: GridSpec::default(),
        };
        let r = verify_unifdrift_condition(&chain(12), &WeightFamily::ConstantOne, &spec(), &cfg).unwrap();
        assert!(r.pass);
        let e0 = r.per_n[0].report.min_slack;
        assert!(r.per_n.iter().all(|p| (p.report.min_slack - e0).abs() < 1e-12));
    }

    #[test]
    fn averaged_two_point_single_constants() {
        let cfg = UnifDriftConfig {
            ns: vec![1, 2, 4],
            v_levels: vec![1.0],
            premise: Some(TailPremise {
                kappa: 0.5,
                lambda: 0.5,
                g: None,
            }),
            grid: GridSpec::default(),
        };
        let r = verify_unifdrift_condition(&chain(12), &WeightFamily::two_point(0.5, 0.8), &spec(), &cfg).unwrap();
        assert!(r.pass, "{:?}", r.per_n.iter().map(|p| p.report.worst()).collect::<Vec<_>>());
        assert!(r.epsilon_v > 0.0 && r.levels[0].epsilon > 0.0);
        assert!(r.g_norm.unwrap().is_finite());
        assert!(r.sup_stationary_premise.unwrap().is_finite());
    }
}

//! Sub-geometric drift of the pseudo-marginal independence sampler in terms
//! of the importance ratio `μ(x,w) = w π(x)/q(x)`.

use serde::{Deserialize, Serialize};

use crate::kernels::{JointLayout, JointState, KernelKind};
use crate::target::ModelSpec;
use crate::weights::{GridSpec, WeightFamily, WeightGrid};

use super::{
    dense_kernel_rows, evaluate_grid, minorization_summary, smallest_true, DriftError, DriftReport, EvaluatedPoint, HypothesisFlag,
    Scope, EXACT_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImhFlavor {
    /// `V = μ^β + 1`, drift `c V^{1−1/β}`.
    Poly { beta: f64 },
    /// `V = exp(μ^γ)`, drift `c V (log V)^{−1/γ}`.
    Exp { gamma: f64 },
}

impl ImhFlavor {
    fn v(&self, mu: f64) -> f64 {
        match *self {
            ImhFlavor::Poly { beta } => mu.powf(beta) + 1.0,
            ImhFlavor::Exp { gamma } => mu.powf(gamma).exp(),
        }
    }

    fn rate(&self, v: f64) -> f64 {
        match *self {
            ImhFlavor::Poly { beta } => v.powf(1.0 - 1.0 / beta),
            ImhFlavor::Exp { gamma } => {
                let l = v.ln();
                if l <= 0.0 {
                    0.0
                } else {
                    v * l.powf(-1.0 / gamma)
                }
            }
        }
    }
}

/// `∫ π̃ (wπ/q)^β` or `∫ π̃ exp((wπ/q)^γ)`.
pub fn moment_premise(model: &ModelSpec, family: &WeightFamily, flavor: ImhFlavor) -> Result<f64, DriftError> {
    let probs = model.target().probs();
    let mut total = 0.0;
    for (x, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let ratio = p / model.q(0, x);
        total += p * match flavor {
            ImhFlavor::Poly { beta } => ratio.powf(beta) * family.moment(x, beta + 1.0)?,
            ImhFlavor::Exp { gamma } => family.expect(x, &|w| w * (w * ratio).powf(gamma).exp())?,
        };
    }
    Ok(if total.is_nan() { f64::INFINITY } else { total })
}

pub fn check_imh_drift(
    model: &ModelSpec,
    family: &WeightFamily,
    spec: &GridSpec,
    flavor: ImhFlavor,
) -> Result<DriftReport, DriftError> {
    if !model.is_independent() {
        return Err(DriftError::HypothesisFail("proposal is not independent".into()));
    }
    if let ImhFlavor::Poly { beta } = flavor {
        if beta < 1.0 {
            return Err(DriftError::HypothesisFail(format!("beta = {beta} < 1")));
        }
    }
    let premise = moment_premise(model, family, flavor)?;
    if !(premise.is_finite()) {
        return Err(DriftError::HypothesisFail(format!("stationary moment of the ratio diverges ({premise})")));
    }

    let grid = WeightGrid::from_family(family, model.len(), spec)?;
    let q: Vec<f64> = (0..model.len()).map(|y| model.q(0, y)).collect();
    let ratio: Vec<f64> = (0..model.len()).map(|x| model.target().prob(x) / q[x]).collect();
    let mu = |s: JointState| s.w * ratio[s.x];
    let v = |s: JointState| flavor.v(mu(s));
    let evals = evaluate_grid(model, &grid, &KernelKind::Pseudo, &v);
    let rows: Vec<(f64, f64, f64, f64)> = evals
        .iter()
        .map(|(gp, pv)| {
            let s = JointState { x: gp.x, w: gp.w };
            (mu(s), v(s), *pv, flavor.rate(v(s)))
        })
        .collect();
    if rows.iter().any(|r| !(r.1.is_finite() && r.2.is_finite())) {
        return Err(DriftError::DivergentIntegral(f64::NAN, f64::INFINITY));
    }
    let mu_max = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let mu_min = rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);

    let drift_ok = |m: f64| {
        let mut any = false;
        for r in rows.iter().filter(|r| r.0 > m) {
            any = true;
            if r.1 - r.2 <= 0.0 || r.3 <= 0.0 {
                return false;
            }
        }
        any
    };
    // a threshold at or above μ_max leaves nothing to check
    let m = smallest_true(mu_min.max(1e-300), 1e-300, mu_max * (1.0 - 1e-12), drift_ok)
        .ok_or_else(|| DriftError::DriftFail {
            regime: "ratio_large".into(),
            x: f64::NAN,
            w: f64::NAN,
            slack: 0.0,
        })?;
    let c = rows
        .iter()
        .filter(|r| r.0 > m)
        .map(|r| (r.1 - r.2) / r.3)
        .fold(f64::INFINITY, f64::min);
    let b = rows.iter().filter(|r| r.0 <= m).map(|r| r.2).fold(0.0, f64::max);

    let mut points = Vec::with_capacity(rows.len());
    for ((gp, _), r) in evals.iter().zip(&rows) {
        let (required, regime) = if r.0 > m {
            (r.1 - c * r.3, "drift")
        } else {
            (b, "small_set")
        };
        points.push(EvaluatedPoint {
            x: gp.x as f64,
            w: gp.w,
            v: r.1,
            pv: r.2,
            required,
            slack: required - r.2,
            regime: regime.into(),
            error: 0.0,
        });
    }
    let mut report = DriftReport::new(points, Scope::AllGridPoints, EXACT_TOL);

    // minorization below M: ν̃(y,u) = q(y) Q_y(u) min{1, μ(y,u)/M}
    let layout = JointLayout::new(model, &grid, false);
    let n = layout.len();
    let base: Vec<f64> = (0..n)
        .map(|i| {
            let p = layout.points[i];
            q[p.x] * grid.q_row(p.x)[i - layout.block(p.x).start].1
        })
        .collect();
    let point_mu: Vec<f64> = layout.points.iter().map(|p| mu(JointState { x: p.x, w: p.w })).collect();
    let nu_raw: Vec<f64> = (0..n).map(|i| base[i] * (point_mu[i] / m).min(1.0)).collect();
    let eps: f64 = nu_raw.iter().sum();
    let nu: Vec<f64> = nu_raw.iter().map(|v| v / eps).collect();
    let small: Vec<usize> = (0..n).filter(|&i| point_mu[i] <= m).collect();
    let dense = dense_kernel_rows(model, &grid, &layout, &KernelKind::Pseudo, &small);
    let mino = minorization_summary(&dense, &small, eps, &nu, 1);
    report.fail_unless(mino.verified(1e-12) || small.is_empty());
    report.minorization = Some(mino);

    report.set("M", m);
    report.set("c", c);
    report.set("b", b);
    report.set("mu_max", mu_max);
    report.set("moment_premise", premise);
    // whole-space minorization at M = sup μ (uniform ergodicity on the grid)
    let eps_whole: f64 = (0..n).map(|i| base[i] * (point_mu[i] / mu_max).min(1.0)).sum();
    report.set("epsilon_whole_space", eps_whole);
    report.hypotheses.push(HypothesisFlag {
        name: "stationary_ratio_moment".into(),
        value: premise,
        satisfied: true,
        flagged_only: false,
    });
    report.fail_unless(c > 0.0);
    Ok(report)
}

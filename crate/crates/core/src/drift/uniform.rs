//! Weight drift `V(w) = w^β + 1` when the marginal acceptance is bounded
//! away from zero, and the small set `X × (0, w̄]`.

use crate::kernels::{JointLayout, KernelKind};
use crate::target::ModelSpec;
use crate::weights::{GridSpec, WeightFamily, WeightGrid};

use super::{
    dense_kernel_rows, evaluate_grid, minorization_summary, smallest_true, DriftError, DriftReport, EvaluatedPoint,
    HypothesisFlag, Scope, EXACT_TOL,
};

/// `P_acc(x,y) = q(x,y) min{1, r(x,y)}` including self-proposals, and its
/// one-step minorization `P_acc(x,·) ≥ ε ν`.
pub fn accepted_minorization(model: &ModelSpec) -> (f64, Vec<f64>) {
    let n = model.len();
    let alive: Vec<usize> = (0..n).filter(|&x| model.target().prob(x) > 0.0).collect();
    let mut mins = vec![f64::INFINITY; n];
    for &x in &alive {
        let mut row = vec![0.0; n];
        for &(y, qxy) in model.proposal_row(x) {
            row[y] += qxy * model.accept_prob(x, y, qxy);
        }
        for y in 0..n {
            mins[y] = mins[y].min(row[y]);
        }
    }
    let mins: Vec<f64> = mins.into_iter().map(|m| if m.is_finite() { m } else { 0.0 }).collect();
    let eps: f64 = mins.iter().sum();
    let nu = if eps > 0.0 { mins.iter().map(|m| m / eps).collect() } else { mins };
    (eps, nu)
}

pub fn check_uniform_marginal_drift(
    model: &ModelSpec,
    family: &WeightFamily,
    spec: &GridSpec,
    beta: f64,
) -> Result<DriftReport, DriftError> {
    if beta <= 1.0 {
        return Err(DriftError::HypothesisFail(format!("phi exponent {beta} must exceed 1")));
    }
    let profile = model.acceptance_profile();
    let alpha0 = (0..model.len())
        .filter(|&x| model.target().prob(x) > 0.0)
        .map(|x| profile[x])
        .fold(f64::INFINITY, f64::min);
    if !(alpha0 > 0.0) {
        return Err(DriftError::HypothesisFail(format!("marginal acceptance infimum {alpha0} is not positive")));
    }
    let grid = WeightGrid::from_family(family, model.len(), spec)?;
    let phi = move |w: f64| w.powf(beta) + 1.0;
    let m_w = (0..model.len()).map(|x| grid.expect(x, phi)).fold(0.0, f64::max);
    if !m_w.is_finite() {
        return Err(DriftError::HypothesisFail("sup_x E phi(W_x) is infinite".into()));
    }
    let evals = evaluate_grid(model, &grid, &KernelKind::Pseudo, &|s| phi(s.w));
    let w_max = grid.max_weight();
    let trivial = w_max <= 1.0 + 1e-12;

    let (w_bar, delta) = if trivial {
        (2.0, 1.0)
    } else {
        let pred = |t: f64| {
            let mut any = false;
            for (gp, pv) in evals.iter().filter(|(gp, _)| gp.w >= t) {
                any = true;
                if phi(gp.w) - pv <= 0.0 {
                    return false;
                }
            }
            any
        };
        let w_bar = smallest_true(w_max.min(2.0), 1.0 + 1e-9, w_max, pred).ok_or_else(|| {
            let (gp, pv) = evals.iter().max_by(|a, b| a.0.w.total_cmp(&b.0.w)).unwrap();
            DriftError::DriftFail {
                regime: "w_large".into(),
                x: gp.x as f64,
                w: gp.w,
                slack: phi(gp.w) - pv,
            }
        })?;
        let delta = evals
            .iter()
            .filter(|(gp, _)| gp.w >= w_bar)
            .map(|(gp, pv)| (phi(gp.w) - pv) * gp.w / phi(gp.w))
            .fold(f64::INFINITY, f64::min);
        (w_bar, delta)
    };

    let points: Vec<EvaluatedPoint> = evals
        .iter()
        .map(|(gp, pv)| {
            let v = phi(gp.w);
            let (required, regime) = if !trivial && gp.w >= w_bar {
                (v - delta * v / gp.w, "w_large")
            } else {
                (v + m_w, "w_bounded")
            };
            EvaluatedPoint {
                x: gp.x as f64,
                w: gp.w,
                v,
                pv: *pv,
                required,
                slack: required - pv,
                regime: regime.into(),
                error: 0.0,
            }
        })
        .collect();
    let mut report = DriftReport::new(points, Scope::AllGridPoints, EXACT_TOL);

    // PV ≤ V − δ V^{(β−1)/β} + b_V 1{w ≤ w̄}
    let b_v = m_w + delta * phi(w_bar).powf((beta - 1.0) / beta);
    let poly_slack = evals
        .iter()
        .map(|(gp, pv)| {
            let v = phi(gp.w);
            let bound = v - delta * v.powf((beta - 1.0) / beta) + if gp.w <= w_bar { b_v } else { 0.0 };
            bound - pv
        })
        .fold(f64::INFINITY, f64::min);
    report.fail_unless(poly_slack >= -EXACT_TOL);

    // small set X × (0, w̄]: P̃ ≥ (ε̃/w̄) ν̃ with ν̃ ∝ ν(y) Q_y(du) min{w̄, u}
    let (eps_acc, nu_acc) = accepted_minorization(model);
    let layout = JointLayout::new(model, &grid, false);
    let n = layout.len();
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let p = layout.points[i];
            nu_acc[p.x] * grid.q_row(p.x)[i - layout.block(p.x).start].1 * p.w.min(w_bar)
        })
        .collect();
    let mass: f64 = raw.iter().sum();
    let eps_tilde = eps_acc * mass;
    let nu: Vec<f64> = raw.iter().map(|r| if mass > 0.0 { r / mass } else { 0.0 }).collect();
    let rows: Vec<usize> = (0..n).filter(|&i| layout.points[i].w <= w_bar).collect();
    let dense = dense_kernel_rows(model, &grid, &layout, &KernelKind::Pseudo, &rows);
    let mino = minorization_summary(&dense, &rows, eps_tilde / w_bar, &nu, 1);
    let (exact_eps, _) = super::row_minorization(&dense, &rows);
    report.fail_unless(mino.verified(1e-12) && exact_eps + 1e-12 >= mino.epsilon);
    report.minorization = Some(mino);

    report.set("alpha0", alpha0);
    report.set("M_W", m_w);
    report.set("w_bar", w_bar);
    report.set("delta", delta);
    report.set("b_V", b_v);
    report.set("poly_min_slack", poly_slack);
    report.set("epsilon_acc", eps_acc);
    report.set("epsilon_tilde", eps_tilde);
    report.set("epsilon_exact_row_min", exact_eps);
    report.hypotheses.push(HypothesisFlag {
        name: "trivial_weight_axis".into(),
        value: w_max,
        satisfied: trivial,
        flagged_only: true,
    });
    report.fail_unless(delta > 0.0);
    Ok(report)
}

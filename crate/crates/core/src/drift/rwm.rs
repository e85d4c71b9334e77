//! Random-walk pseudo-marginal drift on the real line, evaluated by
//! quadrature at a designed point set with a Monte Carlo cross-check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal as NormalSampler, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::numerics::{bisect_increasing, composite_gauss_legendre, geomspace};

use super::{DriftError, DriftReport, EvaluatedPoint, HypothesisFlag, Scope, EXACT_TOL};

const Z_NODES: usize = 256;
const U_NODES: usize = 512;
const Z_SDS: f64 = 8.0;
const U_RANGE: f64 = 12.0;
const PANEL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineTarget {
    /// `π ∝ exp(−x²/2)`.
    Normal,
    /// `π ∝ exp(−x⁴)`.
    Quartic,
}

impl LineTarget {
    /// `log(sup π / π(x))`.
    pub fn neg_log(&self, x: f64) -> f64 {
        match self {
            LineTarget::Normal => 0.5 * x * x,
            LineTarget::Quartic => x.powi(4),
        }
    }

    pub fn grad_log(&self, x: f64) -> f64 {
        match self {
            LineTarget::Normal => -x,
            LineTarget::Quartic => -4.0 * x.powi(3),
        }
    }

    fn tail_end(&self) -> f64 {
        match self {
            LineTarget::Normal => 40.0,
            LineTarget::Quartic => 6.0,
        }
    }

    fn mass(&self, a: f64, b: f64) -> f64 {
        composite_gauss_legendre(64, PANEL, a, b)
            .into_iter()
            .map(|(t, h)| h * (-self.neg_log(t)).exp())
            .sum()
    }

    /// Stationary quantile `F⁻¹(p)` for `p ≥ 1/2`.
    pub fn quantile(&self, p: f64) -> f64 {
        if p <= 0.5 {
            return 0.0;
        }
        let half = self.mass(0.0, self.tail_end());
        let target = (p - 0.5) * 2.0 * half;
        bisect_increasing(|x| self.mass(0.0, x) - target, 0.0, self.tail_end(), 1e-12).unwrap_or(self.tail_end())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LineWeights {
    ConstantOne,
    /// Mean-one lognormal with `σ²(x) = σ0² + growth·log(1 ∨ |x|)`.
    LogNormal { sigma0: f64, growth: f64 },
}

impl LineWeights {
    /// Growth giving `E W^{β'} ∝ (1 ∨ |x|)^{ρ'}`.
    pub fn lognormal_with_growth(sigma0: f64, rho_prime: f64, beta_prime: f64) -> Self {
        LineWeights::LogNormal {
            sigma0,
            growth: 2.0 * rho_prime / (beta_prime * (beta_prime - 1.0)),
        }
    }

    pub fn sigma(&self, x: f64) -> f64 {
        match *self {
            LineWeights::ConstantOne => 0.0,
            LineWeights::LogNormal { sigma0, growth } => (sigma0 * sigma0 + growth * x.abs().max(1.0).ln()).sqrt(),
        }
    }

    /// `E[W^{−a} ∨ W^{b}]` at `x`.
    pub fn moment_envelope(&self, x: f64, a: f64, b: f64) -> f64 {
        let s = self.sigma(x);
        if s == 0.0 {
            return 1.0;
        }
        let m = -0.5 * s * s;
        let phi = Normal::new(0.0, 1.0).unwrap();
        let low = (-a * m + 0.5 * a * a * s * s).exp() * phi.cdf(-(m - a * s * s) / s);
        let high = (b * m + 0.5 * b * b * s * s).exp() * phi.cdf((m + b * s * s) / s);
        low + high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RwmModel {
    pub target: LineTarget,
    /// Standard deviation of the Gaussian increment.
    pub proposal_sd: f64,
    pub weights: LineWeights,
    /// Density vanishes outside `[−L, L]`, so such moves are rejected.
    #[serde(default)]
    pub truncation: Option<f64>,
}

impl RwmModel {
    fn inside(&self, y: f64) -> bool {
        self.truncation.is_none_or(|l| y.abs() <= l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponents {
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonuniformParams {
    pub alpha_prime: f64,
    pub beta_prime: f64,
    pub rho: f64,
    pub rho_prime: f64,
    pub xi_w: f64,
    pub xi_pi: f64,
    pub xi_c: f64,
    /// `ŵ(x) = (1 ∨ |x|)^{w_hat_power}`.
    pub w_hat_power: f64,
    /// `c(x) = exp(c_rate |x|)`.
    pub c_rate: f64,
}

impl NonuniformParams {
    pub fn w_hat(&self, x: f64) -> f64 {
        x.abs().max(1.0).powf(self.w_hat_power)
    }

    fn log_c(&self, x: f64) -> f64 {
        self.c_rate * x.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RwmMode {
    Uniform { alpha_prime: f64, beta_prime: f64 },
    Nonuniform(NonuniformParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanSpec {
    pub quantiles: Vec<f64>,
    /// Multiples of the largest quantile.
    pub beyond: Vec<f64>,
    pub w_min: f64,
    pub w_max: f64,
    pub w_points: usize,
    /// Every `mc_stride`-th point is cross-checked by Monte Carlo.
    pub mc_stride: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for ScanSpec {
    fn default() -> Self {
        ScanSpec {
            quantiles: vec![0.5, 0.9, 0.99, 0.999],
            beyond: vec![1.5, 2.0, 3.0],
            w_min: 1e-3,
            w_max: 1e3,
            w_points: 25,
            mc_stride: 20,
            mc_samples: 100_000,
            seed: 7,
        }
    }
}

struct Setup {
    model: RwmModel,
    exps: Exponents,
}

impl Setup {
    fn log_v(&self, x: f64, w: f64) -> f64 {
        let lw = w.ln();
        self.exps.eta * self.model.target.neg_log(x) + (-self.exps.alpha * lw).max(self.exps.beta * lw)
    }

    fn log_ratio(&self, x: f64, y: f64) -> f64 {
        self.model.target.neg_log(x) - self.model.target.neg_log(y)
    }

    /// `E_u[a (V(y,u) − V(x,w))]` for a fixed proposal `y`.
    fn inner(&self, x: f64, w: f64, y: f64, v_here: f64) -> f64 {
        let lr = self.log_ratio(x, y);
        let lw = w.ln();
        let s = self.model.weights.sigma(y);
        if s == 0.0 {
            let la = (lr - lw).min(0.0);
            return (la + self.log_v(y, 1.0)).exp() - la.exp() * v_here;
        }
        let mut cuts = vec![-U_RANGE, U_RANGE];
        for t in [(lw - lr + 0.5 * s * s) / s, 0.5 * s] {
            if t > -U_RANGE && t < U_RANGE {
                cuts.push(t);
            }
        }
        cuts.sort_by(f64::total_cmp);
        let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = 0.0;
        for seg in cuts.windows(2) {
            let panels = ((U_NODES / PANEL) as f64 * (seg[1] - seg[0]) / (2.0 * U_RANGE)).ceil().max(1.0) as usize;
            for (t, h) in composite_gauss_legendre(panels, PANEL, seg[0], seg[1]) {
                let lu = s * t - 0.5 * s * s;
                let la = (lr + lu - lw).min(0.0);
                let dens = h * c * (-0.5 * t * t).exp();
                acc += dens * ((la + self.log_v(y, lu.exp())).exp() - la.exp() * v_here);
            }
        }
        acc
    }

    /// `P̃V(x,w)` by tensor Gauss–Legendre quadrature.
    fn pv(&self, x: f64, w: f64) -> f64 {
        let sd = self.model.proposal_sd;
        let v_here = self.log_v(x, w).exp();
        let (a, b) = (-Z_SDS * sd, Z_SDS * sd);
        let mut cuts = vec![a, b];
        let edges = self.model.truncation.map_or(vec![], |l| vec![l - x, -l - x]);
        for z in [0.0, -2.0 * x].into_iter().chain(edges) {
            if z > a && z < b {
                cuts.push(z);
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let c = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let mut inc = 0.0;
        for seg in cuts.windows(2) {
            if !self.model.inside(x + 0.5 * (seg[0] + seg[1])) {
                continue;
            }
            let panels = ((Z_NODES / PANEL) as f64 * (seg[1] - seg[0]) / (b - a)).ceil().max(1.0) as usize;
            for (z, h) in composite_gauss_legendre(panels, PANEL, seg[0], seg[1]) {
                inc += h * c * (-0.5 * (z / sd).powi(2)).exp() * self.inner(x, w, x + z, v_here);
            }
        }
        v_here + inc
    }

    /// Monte Carlo estimate of `P̃V(x,w)` and its standard error.
    fn pv_mc(&self, x: f64, w: f64, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zs = NormalSampler::new(0.0, self.model.proposal_sd).unwrap();
        let v_here = self.log_v(x, w).exp();
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let y = x + zs.sample(&mut rng);
            if !self.model.inside(y) {
                continue;
            }
            let s = self.model.weights.sigma(y);
            let lu = if s == 0.0 {
                0.0
            } else {
                let t: f64 = StandardNormal.sample(&mut rng);
                s * t - 0.5 * s * s
            };
            let la = (self.log_ratio(x, y) + lu - w.ln()).min(0.0);
            let d = (la + self.log_v(y, lu.exp())).exp() - la.exp() * v_here;
            s1 += d;
            s2 += d * d;
        }
        let mean = s1 / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        (v_here + mean, (var / n as f64).sqrt())
    }
}

fn flag(report: &mut DriftReport, name: &str, value: f64, satisfied: bool, flagged_only: bool) {
    report.hypotheses.push(HypothesisFlag {
        name: name.into(),
        value,
        satisfied,
        flagged_only,
    });
}

fn open(v: f64, lo: f64, hi: f64) -> bool {
    v > lo && v < hi
}

/// Mechanical exponent constraints; `Err` names the first violated one.
pub fn check_exponents(exps: &Exponents, mode: &RwmMode) -> Result<(), DriftError> {
    let Exponents { eta, alpha, beta } = *exps;
    let fail = |what: &str| Err(DriftError::HypothesisFail(what.to_string()));
    if !(beta > 1.0) {
        return fail("beta must exceed 1 for the V^{(beta-1)/beta} drift");
    }
    match *mode {
        RwmMode::Uniform { alpha_prime, beta_prime } => {
            if !(alpha_prime > 0.0 && beta_prime > 1.0) {
                return fail("moment exponents need alpha' > 0, beta' > 1");
            }
            if !open(eta, 0.0, alpha_prime.min(1.0)) {
                return fail("eta not in (0, alpha' ^ 1)");
            }
            if !(alpha > eta && alpha <= alpha_prime) {
                return fail("alpha not in (eta, alpha']");
            }
            if !open(beta, 1.0, beta_prime - eta) {
                return fail("beta not in (1, beta' - eta)");
            }
        }
        RwmMode::Nonuniform(p) => {
            let (ap, bp) = (p.alpha_prime, p.beta_prime);
            if !(ap > 0.0 && bp > 1.0) {
                return fail("moment exponents need alpha' > 0, beta' > 1");
            }
            if !(p.rho > 1.0 && p.rho_prime >= 0.0 && p.rho_prime < p.rho - 1.0) {
                return fail("need rho > 1 and rho' in [0, rho - 1)");
            }
            if !open(p.xi_w, 0.0, bp - 1.0) || !open(p.xi_pi, 0.0, bp - 1.0 - p.xi_w) {
                return fail("xi_w or xi_pi out of range");
            }
            if !open(eta, 0.0, ap.min(bp - 1.0 - p.xi_w).min(1.0 - p.xi_pi)) {
                return fail("eta out of range");
            }
            if !(alpha > eta && alpha <= ap) {
                return fail("alpha not in (eta, alpha']");
            }
            if !open(beta, (1.0 + p.xi_w - eta).max(1.0), bp - eta) {
                return fail("beta out of range");
            }
            if eta > (bp - beta).min(1.0) - p.xi_pi {
                return fail("eta exceeds (beta' - beta) ^ 1 - xi_pi");
            }
            if !open(p.xi_c, 0.0, (bp - beta).min(alpha).min(1.0) - eta - p.xi_pi) {
                return fail("xi_c out of range");
            }
            if !(p.c_rate > 0.0 && p.c_rate <= 1.0) {
                return fail("c(x) must satisfy limsup c(x) e^{-|x|} < infinity");
            }
        }
    }
    Ok(())
}

/// `q(D_x)`: increment mass where `1/c ≤ π(x+z)/π(x) ≤ c`.
fn q_of_d(model: &RwmModel, x: f64, log_c: f64) -> f64 {
    let sd = model.proposal_sd;
    let c = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    composite_gauss_legendre(1024, PANEL, -Z_SDS * sd, Z_SDS * sd)
        .into_iter()
        .filter(|(z, _)| (model.target.neg_log(x) - model.target.neg_log(x + z)).abs() <= log_c)
        .map(|(z, h)| h * c * (-0.5 * (z / sd).powi(2)).exp())
        .sum()
}

pub fn check_rwm_drift(
    model: &RwmModel,
    exps: Exponents,
    mode: &RwmMode,
    scan: &ScanSpec,
) -> Result<DriftReport, DriftError> {
    check_exponents(&exps, mode)?;
    if !(model.proposal_sd > 0.0) {
        return Err(DriftError::Invalid("proposal sd must be positive".into()));
    }
    if model.truncation.is_some_and(|l| !(l > 0.0)) {
        return Err(DriftError::Invalid("truncation must be positive".into()));
    }
    let (ap, bp) = match *mode {
        RwmMode::Uniform { alpha_prime, beta_prime } => (alpha_prime, beta_prime),
        RwmMode::Nonuniform(p) => (p.alpha_prime, p.beta_prime),
    };
    if let (RwmMode::Uniform { .. }, LineWeights::LogNormal { growth, .. }) = (mode, model.weights) {
        if growth > 0.0 {
            return Err(DriftError::HypothesisFail("moments grow with |x|: M_W is infinite".into()));
        }
    }

    let q_top = scan.quantiles.iter().map(|&p| model.target.quantile(p)).fold(0.0, f64::max);
    let mut xs: Vec<f64> = scan
        .quantiles
        .iter()
        .map(|&p| model.target.quantile(p))
        .chain(scan.beyond.iter().map(|m| m * q_top))
        .flat_map(|x| [x, -x])
        .filter(|x| model.inside(*x))
        .collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let constant = matches!(model.weights, LineWeights::ConstantOne);
    let ws = if constant { vec![1.0] } else { geomspace(scan.w_min, scan.w_max, scan.w_points) };
    let grid: Vec<(f64, f64)> = xs.iter().flat_map(|&x| ws.iter().map(move |&w| (x, w))).collect();

    let setup = Setup { model: *model, exps };
    let values: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&(x, w)| (setup.log_v(x, w).exp(), setup.pv(x, w)))
        .collect();
    let rate = |v: f64| v.powf((exps.beta - 1.0) / exps.beta);
    let x_top = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    // box C: bounding box of points without strict decrease, always holding (0, 1)
    let (mut m_box, mut w_lo, mut w_hi) = (0.0f64, 1.0f64, 1.0f64);
    let mut edge: Option<usize> = None;
    for (i, (&(x, w), &(v, pv))) in grid.iter().zip(&values).enumerate() {
        if v - pv <= 0.0 {
            m_box = m_box.max(x.abs());
            w_lo = w_lo.min(w);
            w_hi = w_hi.max(w);
            let at_edge = x.abs() >= x_top - 1e-12 || (!constant && (w <= scan.w_min * (1.0 + 1e-12) || w >= scan.w_max * (1.0 - 1e-12)));
            if at_edge && edge.is_none() {
                edge = Some(i);
            }
        }
    }
    let regime_of = |x: f64, w: f64| -> &'static str {
        if x.abs() <= m_box && w >= w_lo && w <= w_hi {
            "core"
        } else if w > w_hi {
            "w_large"
        } else if w < w_lo {
            "w_small"
        } else {
            "x_large"
        }
    };
    if let Some(i) = edge {
        let (x, w) = grid[i];
        return Err(DriftError::DriftFail {
            regime: regime_of(x, w).replace("core", "scan_edge"),
            x,
            w,
            slack: values[i].0 - values[i].1,
        });
    }
    let in_c = |x: f64, w: f64| x.abs() <= m_box && w >= w_lo && w <= w_hi;
    let delta = grid
        .iter()
        .zip(&values)
        .filter(|((x, w), _)| !in_c(*x, *w))
        .map(|(_, &(v, pv))| (v - pv) / rate(v))
        .fold(f64::INFINITY, f64::min)
        * (1.0 - 1e-9);
    let b = grid
        .iter()
        .zip(&values)
        .filter(|((x, w), _)| in_c(*x, *w))
        .map(|(_, &(_, pv))| pv)
        .fold(0.0, f64::max);

    let mut points: Vec<EvaluatedPoint> = grid
        .iter()
        .zip(&values)
        .map(|(&(x, w), &(v, pv))| {
            let required = if in_c(x, w) { b } else { v - delta * rate(v) };
            EvaluatedPoint {
                x,
                w,
                v,
                pv,
                required,
                slack: required - pv,
                regime: regime_of(x, w).into(),
                error: 0.0,
            }
        })
        .collect();

    // Monte Carlo cross-check on a deterministic subset
    let stride = scan.mc_stride.max(1);
    let checks: Vec<(usize, f64, f64)> = (0..grid.len())
        .step_by(stride)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&i| {
            let (x, w) = grid[i];
            let (mc, se) = setup.pv_mc(x, w, scan.mc_samples, scan.seed.wrapping_add(i as u64));
            (i, mc, se)
        })
        .collect();
    let mut worst_z: f64 = 0.0;
    let mut mc_ok = true;
    for &(i, mc, se) in &checks {
        let diff = (mc - values[i].1).abs();
        let allowance = 3.0 * se + 1e-6 * values[i].0;
        worst_z = worst_z.max(diff / se.max(1e-300));
        mc_ok &= diff <= allowance;
        points[i].error = 3.0 * se;
    }
    let mut report = DriftReport::new(points, Scope::ScannedPoints, EXACT_TOL);
    report.fail_unless(delta > 0.0 && delta.is_finite() && mc_ok);
    report.set("delta_V", delta);
    report.set("b", b);
    report.set("M", m_box);
    report.set("w_low", w_lo);
    report.set("w_high", w_hi);
    report.set("mc_checked", checks.len() as f64);
    report.set("mc_max_z", worst_z);
    let ratio_top = grid
        .iter()
        .zip(&values)
        .filter(|((x, _), _)| x.abs() >= x_top - 1e-12)
        .map(|(_, &(v, pv))| pv / v)
        .fold(0.0, f64::max);
    report.set("geometric_ratio_at_x_max", ratio_top);

    match *mode {
        RwmMode::Uniform { .. } => {
            let m_w = xs.iter().map(|&x| model.weights.moment_envelope(x, ap, bp)).fold(0.0, f64::max);
            report.set("M_W", m_w);
            flag(&mut report, "uniform_moment_bound", m_w, m_w.is_finite(), false);
        }
        RwmMode::Nonuniform(p) => {
            let (far, half) = (x_top, 0.5 * x_top);
            // ρ-super-exponential decay: x/|x|^ρ · ∇log π should keep falling
            let s = |x: f64| x * model.target.grad_log(x) / x.abs().powf(p.rho);
            let (s_far, s_half) = (s(far), s(half));
            flag(&mut report, "rho_super_exponential", s_far, s_far < s_half && s_far < 0.0, true);
            let c_mom = xs
                .iter()
                .map(|&x| model.weights.moment_envelope(x, ap, bp) / x.abs().max(1.0).powf(p.rho_prime))
                .fold(0.0, f64::max);
            report.set("moment_growth_c", c_mom);
            flag(&mut report, "moment_growth_bound", c_mom, c_mom.is_finite(), false);
            let cw_ratio = |x: f64| p.w_hat(x).powf(p.xi_pi) / (p.xi_c * p.log_c(x)).exp();
            flag(&mut report, "c_bigger_w", cw_ratio(far), cw_ratio(far) < cw_ratio(half) && cw_ratio(far) < 1.0, true);
            let vanish = |x: f64| {
                let mw = model.weights.moment_envelope(x, ap, bp);
                let lc = p.log_c(x);
                mw * q_of_d(model, x, lc).max((-exps.eta * lc).exp()).max((p.w_hat(x).ln() - lc).exp().powf(ap))
            };
            flag(&mut report, "M_vanish", vanish(far), vanish(far) < vanish(half), true);

            // w̄(x) = c_w ŵ(x): points above it must drift
            let above = |c: f64| {
                let mut any = false;
                for ((x, w), (v, pv)) in grid.iter().zip(&values) {
                    if *w >= c * p.w_hat(*x) {
                        any = true;
                        if v - pv <= 0.0 {
                            return false;
                        }
                    }
                }
                any
            };
            let top = grid.iter().map(|(x, w)| w / p.w_hat(*x)).fold(0.0, f64::max);
            match super::smallest_true(1.0f64.min(top), 1e-12, top, above) {
                Some(c_w) => {
                    report.set("c_w", c_w);
                    let w_bar = xs.iter().filter(|x| x.abs() <= m_box).map(|&x| c_w * p.w_hat(x)).fold(0.0, f64::max);
                    report.set("w_bar", w_bar);
                }
                None => report.fail_unless(false),
            }
        }
    }
    Ok(report)
}

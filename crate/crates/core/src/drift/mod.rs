//! Drift and minorization checks evaluated at explicit points.

pub mod counterexample;
pub mod imh;
pub mod rwm;
pub mod unifdrift;
pub mod uniform;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{lazy_factor, sparse_row, GridPoint, JointLayout, JointState, KernelError, KernelKind};
use crate::spectral::SpectralError;
use crate::target::{ModelError, ModelSpec};
use crate::weights::{GridSpec, WeightError, WeightFamily, WeightGrid};

pub const EXACT_TOL: f64 = 1e-9;
pub const MIN_MC_SAMPLES: usize = 10_000;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("drift fails in regime {regime} at x = {x}, w = {w} (slack {slack})")]
    DriftFail { regime: String, x: f64, w: f64, slack: f64 },
    #[error("minorization fails: {0}")]
    MinorizationFail(String),
    #[error("hypothesis not satisfied: {0}")]
    HypothesisFail(String),
    #[error("integral of V diverges (truncated values {0} and {1})")]
    DivergentIntegral(f64, f64),
    #[error("truncation {truncation} cannot hold block k = {k}")]
    TruncationTooSmall { truncation: usize, k: u32 },
    #[error("invalid drift setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

pub type VFn = Arc<dyn Fn(JointState) -> f64 + Send + Sync>;

/// Declarative test functions for finite models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VSpec {
    Constant,
    /// `base^x`.
    GeometricX { base: f64 },
    /// `w^β + 1`.
    WeightPower { beta: f64 },
    /// `base^x · (w^β + 1)`.
    Product { base: f64, beta: f64 },
}

impl VSpec {
    pub fn build(&self) -> VFn {
        match *self {
            VSpec::Constant => Arc::new(|_| 1.0),
            VSpec::GeometricX { base } => Arc::new(move |s: JointState| base.powi(s.x as i32)),
            VSpec::WeightPower { beta } => Arc::new(move |s: JointState| s.w.powf(beta) + 1.0),
            VSpec::Product { base, beta } => {
                Arc::new(move |s: JointState| base.powi(s.x as i32) * (s.w.powf(beta) + 1.0))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KappaSpec {
    /// `κ(t) = t (log t)^{−1/γ}`.
    LogPower { gamma: f64 },
    /// `κ(t) = t^a`.
    Power { a: f64 },
}

impl KappaSpec {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            KappaSpec::LogPower { gamma } => {
                let l = t.ln();
                if l <= 0.0 {
                    0.0
                } else {
                    t * l.powf(-1.0 / gamma)
                }
            }
            KappaSpec::Power { a } => t.powf(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftForm {
    /// `PV ≤ λV + b 1_C`.
    Geometric { lambda: f64 },
    /// `PV ≤ V − c V^α + b 1_C`; `c` is fitted when absent.
    Polynomial { alpha: f64, c: Option<f64> },
    /// `PV ≤ V − c κ(V) + b 1_C`.
    SubgeomKappa { kappa: KappaSpec, c: Option<f64> },
}

impl DriftForm {
    pub fn validate(&self) -> Result<(), DriftError> {
        match self {
            DriftForm::Geometric { lambda } if !(0.0..1.0).contains(lambda) => {
                Err(DriftError::Invalid(format!("geometric lambda {lambda} not in [0,1)")))
            }
            DriftForm::Polynomial { alpha, .. } if !(*alpha > 0.0 && *alpha <= 1.0) => {
                Err(DriftError::Invalid(format!("polynomial exponent {alpha} not in (0,1]")))
            }
            _ => Ok(()),
        }
    }

    /// Decrease `V − required` demanded outside `C`, per unit `c`.
    fn rate(&self, v: f64) -> f64 {
        match self {
            DriftForm::Geometric { .. } => v,
            DriftForm::Polynomial { alpha, .. } => v.powf(*alpha),
            DriftForm::SubgeomKappa { kappa, .. } => kappa.eval(v),
        }
    }

    fn given_c(&self) -> Option<f64> {
        match self {
            DriftForm::Geometric { lambda } => Some(1.0 - lambda),
            DriftForm::Polynomial { c, .. } | DriftForm::SubgeomKappa { c, .. } => *c,
        }
    }
}

/// `C = {x ≤ x_max (if set), w ∈ [w_low, w_high]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_max: Option<usize>,
    pub w_low: f64,
    pub w_high: f64,
}

impl Region {
    pub fn states(x_max: usize) -> Self {
        Region {
            x_max: Some(x_max),
            w_low: 0.0,
            w_high: f64::MAX,
        }
    }

    pub fn contains(&self, s: JointState) -> bool {
        self.x_max.is_none_or(|m| s.x <= m) && s.w >= self.w_low && s.w <= self.w_high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub v: VSpec,
    pub form: DriftForm,
    pub region: Region,
    /// Bound on `PV` over `C`; fitted when absent.
    pub bound_b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedPoint {
    pub x: f64,
    pub w: f64,
    pub v: f64,
    pub pv: f64,
    pub required: f64,
    pub slack: f64,
    pub regime: String,
    /// Monte Carlo error bar when the value was simulated.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minorization {
    pub epsilon: f64,
    pub n_steps: usize,
    /// Sum of the normalized minorizing measure.
    pub nu_mass: f64,
    /// Number of atoms of the minorizing measure.
    pub nu_support: usize,
    /// `min (P(s,t) − ε ν(t))` over the rows of the set.
    pub min_entry_slack: f64,
    pub rows: usize,
}

impl Minorization {
    pub fn verified(&self, tol: f64) -> bool {
        self.epsilon > 0.0 && self.min_entry_slack >= -tol && (self.nu_mass - 1.0).abs() <= 1e-10
    }
}

/// Whether a result holds everywhere or only at the scanned points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    AllGridPoints,
    ScannedPoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisFlag {
    pub name: String,
    pub value: f64,
    pub satisfied: bool,
    /// Limits are only evaluated at the largest scan points.
    pub flagged_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub evaluated_points: Vec<EvaluatedPoint>,
    pub min_slack: f64,
    pub minorization: Option<Minorization>,
    pub constants: BTreeMap<String, f64>,
    pub hypotheses: Vec<HypothesisFlag>,
    pub scope: Scope,
    pub tolerance: f64,
    pub pass: bool,
}

impl DriftReport {
    pub(crate) fn new(points: Vec<EvaluatedPoint>, scope: Scope, tolerance: f64) -> Self {
        let min_slack = points.iter().map(|p| p.slack).fold(f64::INFINITY, f64::min);
        DriftReport {
            pass: points.iter().all(|p| p.slack >= -tolerance.max(p.error)),
            evaluated_points: points,
            min_slack: if min_slack.is_finite() { min_slack } else { 0.0 },
            minorization: None,
            constants: BTreeMap::new(),
            hypotheses: Vec::new(),
            scope,
            tolerance,
        }
    }

    pub fn constant(&self, name: &str) -> Option<f64> {
        self.constants.get(name).copied()
    }

    pub fn worst(&self) -> Option<&EvaluatedPoint> {
        self.evaluated_points.iter().min_by(|a, b| a.slack.total_cmp(&b.slack))
    }

    pub(crate) fn set(&mut self, name: &str, value: f64) {
        self.constants.insert(name.to_string(), value);
    }

    pub(crate) fn fail_unless(&mut self, ok: bool) {
        self.pass &= ok;
    }

    /// `Err(DriftFail)` with the worst point unless the report passes.
    pub fn ensure(&self) -> Result<(), DriftError> {
        if self.pass {
            return Ok(());
        }
        match self.worst() {
            Some(p) if p.slack < -self.tolerance.max(p.error) => Err(DriftError::DriftFail {
                regime: p.regime.clone(),
                x: p.x,
                w: p.w,
                slack: p.slack,
            }),
            _ => Err(DriftError::MinorizationFail("minorization or constant search failed".into())),
        }
    }

    /// CSV appendix `x,w,v,pv,required,slack,regime,error`.
    pub fn write_points_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "w", "v", "pv", "required", "slack", "regime", "error"])?;
        for p in &self.evaluated_points {
            w.serialize((p.x, p.w, p.v, p.pv, p.required, p.slack, &p.regime, p.error))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalMethod {
    ExactGrid,
    Quadrature,
    MonteCarlo { n: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelValue {
    pub value: f64,
    /// 3-sigma bar for Monte Carlo, 0 otherwise.
    pub error: f64,
}

/// `KV(s)` on the given grid: row of the joint kernel applied to `V`.
pub fn grid_row_value(model: &ModelSpec, grid: &WeightGrid, kind: &KernelKind, v: &dyn Fn(JointState) -> f64, p: JointState) -> f64 {
    let layout = JointLayout::new(model, grid, matches!(kind, KernelKind::Marginal));
    row_value(model, grid, &layout, kind, v, p)
}

fn row_value(
    model: &ModelSpec,
    grid: &WeightGrid,
    layout: &JointLayout,
    kind: &KernelKind,
    v: &dyn Fn(JointState) -> f64,
    p: JointState,
) -> f64 {
    let gp = GridPoint { x: p.x, node: usize::MAX, w: p.w };
    let here = v(p);
    let mut moved = 0.0;
    let mut acc = 0.0;
    for (j, prob) in sparse_row(model, grid, layout, kind, &gp) {
        let t = layout.points[j];
        acc += prob * v(JointState { x: t.x, w: t.w });
        moved += prob;
    }
    let base = acc + (1.0 - moved) * here;
    let eps = lazy_factor(kind);
    eps * here + (1.0 - eps) * base
}

/// `KV` at every joint grid point, in layout order.
pub fn evaluate_grid(
    model: &ModelSpec,
    grid: &WeightGrid,
    kind: &KernelKind,
    v: &(dyn Fn(JointState) -> f64 + Sync),
) -> Vec<(GridPoint, f64)> {
    let layout = JointLayout::new(model, grid, matches!(kind, KernelKind::Marginal));
    layout
        .points
        .par_iter()
        .map(|gp| {
            let s = JointState { x: gp.x, w: gp.w };
            (*gp, row_value(model, grid, &layout, kind, v, s))
        })
        .collect()
}

/// `KV(x,w)` by an exact row product, by refined grid quadrature with a
/// truncation-doubling divergence check, or by Monte Carlo.
pub fn apply_kernel_to_v(
    model: &ModelSpec,
    family: &WeightFamily,
    grid: &WeightGrid,
    kind: &KernelKind,
    v: &dyn Fn(JointState) -> f64,
    point: JointState,
    method: EvalMethod,
) -> Result<KernelValue, DriftError> {
    match method {
        EvalMethod::ExactGrid => Ok(KernelValue {
            value: grid_row_value(model, grid, kind, v, point),
            error: 0.0,
        }),
        EvalMethod::Quadrature => {
            let value_at = |tail: f64| -> Result<f64, DriftError> {
                let spec = GridSpec::fine().with_quantiles(tail, 1.0 - tail);
                let g = WeightGrid::from_family(family, model.len(), &spec)?;
                Ok(grid_row_value(model, &g, kind, v, point))
            };
            let a = value_at(1e-6)?;
            let b = value_at(1e-12)?;
            if !(a.is_finite() && b.is_finite()) || (a - b).abs() > 1e-2 * a.abs().max(b.abs()).max(1.0) {
                return Err(DriftError::DivergentIntegral(a, b));
            }
            Ok(KernelValue { value: b, error: 0.0 })
        }
        EvalMethod::MonteCarlo { n, seed } => {
            if n < MIN_MC_SAMPLES {
                return Err(DriftError::Invalid(format!("monte carlo needs n >= {MIN_MC_SAMPLES}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let here = v(point);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let d = mc_increment(model, family, kind, v, point, here, &mut rng);
                s1 += d;
                s2 += d * d;
            }
            let mean = s1 / n as f64;
            let var = (s2 / n as f64 - mean * mean).max(0.0);
            let eps = lazy_factor(kind);
            Ok(KernelValue {
                value: here + (1.0 - eps) * mean,
                error: 3.0 * (1.0 - eps) * (var / n as f64).sqrt(),
            })
        }
    }
}

fn mc_increment<R: Rng + ?Sized>(
    model: &ModelSpec,
    family: &WeightFamily,
    kind: &KernelKind,
    v: &dyn Fn(JointState) -> f64,
    p: JointState,
    here: f64,
    rng: &mut R,
) -> f64 {
    let row = model.proposal_row(p.x);
    let mut t = rng.random::<f64>();
    let mut y = row[row.len() - 1].0;
    let mut qxy = row[row.len() - 1].1;
    for &(s, q) in row {
        if t < q {
            y = s;
            qxy = q;
            break;
        }
        t -= q;
    }
    if model.target().log_prob(y) == f64::NEG_INFINITY {
        return 0.0;
    }
    let r = model.ratio_unchecked(p.x, y, qxy);
    let (u, a) = match kind.root() {
        KernelKind::Marginal => (1.0, r.min(1.0)),
        KernelKind::Pseudo => {
            let u = family.sample(y, rng);
            (u, (r * u / p.w).min(1.0))
        }
        KernelKind::Check => {
            let u = family.sample(y, rng);
            (u, r.min(1.0) * (u / p.w).min(1.0))
        }
        KernelKind::Auxiliary => (family.sample_tilted(y, rng), r.min(1.0)),
        KernelKind::Lazy { .. } => unreachable!(),
    };
    a * (v(JointState { x: y, w: u }) - here)
}

/// Smallest `t` with `pred(t)` for a predicate monotone in `t`: a sweep by
/// factors of 2 from `start` brackets the switch, bisection refines it.
pub fn smallest_true(start: f64, lower: f64, upper: f64, pred: impl Fn(f64) -> bool) -> Option<f64> {
    let (mut lo, mut hi);
    if pred(start) {
        hi = start;
        lo = start;
        loop {
            let next = (lo / 2.0).max(lower);
            if next >= lo {
                return Some(lo);
            }
            if !pred(next) {
                lo = next;
                break;
            }
            hi = next;
            lo = next;
        }
    } else {
        lo = start;
        hi = start;
        loop {
            let next = (hi * 2.0).min(upper);
            if next <= hi {
                return None;
            }
            if pred(next) {
                hi = next;
                break;
            }
            lo = next;
            hi = next;
        }
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Best one-step minorization `P(s,·) ≥ ε ν` over rows `rows` of `m`:
/// `ε = Σ_t min_s P(s,t)`.
pub fn row_minorization(m: &DMatrix<f64>, rows: &[usize]) -> (f64, Vec<f64>) {
    if rows.is_empty() {
        return (0.0, vec![0.0; m.ncols()]);
    }
    let mins: Vec<f64> = (0..m.ncols())
        .map(|t| rows.iter().map(|&s| m[(s, t)]).fold(f64::INFINITY, f64::min).max(0.0))
        .collect();
    let eps: f64 = mins.iter().sum();
    let nu = if eps > 0.0 { mins.iter().map(|v| v / eps).collect() } else { mins };
    (eps, nu)
}

/// Entrywise `min (P(s,t) − ε ν(t))` over `rows`.
pub fn minorization_slack(m: &DMatrix<f64>, rows: &[usize], eps: f64, nu: &[f64]) -> f64 {
    rows.iter()
        .flat_map(|&s| (0..m.ncols()).map(move |t| m[(s, t)] - eps * nu[t]))
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn minorization_summary(m: &DMatrix<f64>, rows: &[usize], eps: f64, nu: &[f64], n_steps: usize) -> Minorization {
    Minorization {
        epsilon: eps,
        n_steps,
        nu_mass: nu.iter().sum(),
        nu_support: nu.iter().filter(|v| **v > 0.0).count(),
        min_entry_slack: if rows.is_empty() { 0.0 } else { minorization_slack(m, rows, eps, nu) },
        rows: rows.len(),
    }
}

/// Dense rows `rows` of the (non-lazy) joint kernel, holding mass on the diagonal.
pub(crate) fn dense_kernel_rows(
    model: &ModelSpec,
    grid: &WeightGrid,
    layout: &JointLayout,
    kind: &KernelKind,
    rows: &[usize],
) -> DMatrix<f64> {
    let n = layout.len();
    let mut dense = DMatrix::zeros(n, n);
    for &i in rows {
        let mut moved = 0.0;
        for (j, prob) in sparse_row(model, grid, layout, kind, &layout.points[i]) {
            dense[(i, j)] += prob;
            moved += prob;
        }
        dense[(i, i)] += 1.0 - moved;
    }
    dense
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::{ProposalKernel, StateSpace, TargetDistribution};

    fn chain5() -> ModelSpec {
        let t = TargetDistribution::from_masses(StateSpace::finite(5).unwrap(), &[1.0, 2.0, 3.0, 2.0, 1.5]).unwrap();
        ModelSpec::new(t, ProposalKernel::nearest_neighbour()).unwrap()
    }

    #[test]
    fn constant_v_is_fixed() {
        let m = chain5();
        let f = WeightFamily::two_point(0.5, 0.8);
        let g = WeightGrid::from_family(&f, 5, &GridSpec::default()).unwrap();
        let one = VSpec::Constant.build();
        for kind in [KernelKind::Pseudo, KernelKind::Auxiliary, KernelKind::Check, KernelKind::lazy(KernelKind::Pseudo, 0.3)] {
            for (_, pv) in evaluate_grid(&m, &g, &kind, &*one) {
                assert!((pv - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_matches_monte_carlo() {
        let m = chain5();
        let f = WeightFamily::two_point(0.5, 0.8);
        let g = WeightGrid::from_family(&f, 5, &GridSpec::default()).unwrap();
        let v = VSpec::Product { base: 1.7, beta: 2.0 }.build();
        let p = JointState { x: 2, w: 0.5 };
        let exact = apply_kernel_to_v(&m, &f, &g, &KernelKind::Pseudo, &*v, p, EvalMethod::ExactGrid).unwrap();
        let mc = apply_kernel_to_v(&m, &f, &g, &KernelKind::Pseudo, &*v, p, EvalMethod::MonteCarlo { n: 1_000_000, seed: 3 }).unwrap();
        assert!((exact.value - mc.value).abs() <= mc.error, "{exact:?} {mc:?}");
        let quad = apply_kernel_to_v(&m, &f, &g, &KernelKind::Pseudo, &*v, p, EvalMethod::Quadrature).unwrap();
        assert!((quad.value - exact.value).abs() < 1e-12);
        let short = apply_kernel_to_v(&m, &f, &g, &KernelKind::Pseudo, &*v, p, EvalMethod::MonteCarlo { n: 10, seed: 3 });
        assert!(short.is_err());
    }

    #[test]
    fn divergent_integral_detected() {
        let m = chain5();
        let f = WeightFamily::pareto(1.5);
        let g = WeightGrid::from_family(&f, 5, &GridSpec::default()).unwrap();
        let v = VSpec::WeightPower { beta: 2.0 }.build();
        let p = JointState { x: 2, w: 1.0 };
        let r = apply_kernel_to_v(&m, &f, &g, &KernelKind::Pseudo, &*v, p, EvalMethod::Quadrature);
        assert!(matches!(r, Err(DriftError::DivergentIntegral(..))), "{r:?}");
        let tame = WeightFamily::lognormal(0.5);
        let g = WeightGrid::from_family(&tame, 5, &GridSpec::default()).unwrap();
        assert!(apply_kernel_to_v(&m, &tame, &g, &KernelKind::Pseudo, &*v, p, EvalMethod::Quadrature).is_ok());
    }

    #[test]
    fn threshold_search() {
        let t = smallest_true(1.0, 1e-9, 1e9, |x| x >= 37.25).unwrap();
        assert!((t - 37.25).abs() < 1e-9);
        let t = smallest_true(1.0, 1e-9, 1e9, |x| x >= 0.01).unwrap();
        assert!((t - 0.01).abs() < 1e-12);
        assert!(smallest_true(1.0, 1e-9, 100.0, |x| x > 1e3).is_none());
    }
}

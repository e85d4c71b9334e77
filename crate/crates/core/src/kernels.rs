//! Exact joint transition matrices of the marginal, pseudo-marginal,
//! auxiliary and check kernels, their samplers, and exact acceptance-rate
//! functionals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::target::{ModelSpec, State};
use crate::weights::{WeightFamily, WeightGrid};

pub const DEFAULT_ENTRY_BUDGET: usize = 40_000_000;
pub const IDENTITY_TOL: f64 = 1e-10;
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("joint grid of {states} states needs {entries} entries (budget {budget})")]
    GridTooLarge {
        states: usize,
        entries: usize,
        budget: usize,
    },
    #[error("weight grid covers {grid} states, model has {model}")]
    StateMismatch { grid: usize, model: usize },
    #[error("test function g must be symmetric and nonnegative")]
    AsymmetricG,
    #[error("laziness must lie in [0, 1), got {0}")]
    InvalidLaziness(f64),
    #[error("built matrix is not a valid kernel: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    Marginal,
    Pseudo,
    Auxiliary,
    Check,
    Lazy { base: Box<KernelKind>, epsilon: f64 },
}

impl KernelKind {
    pub fn lazy(base: KernelKind, epsilon: f64) -> Self {
        KernelKind::Lazy {
            base: Box::new(base),
            epsilon,
        }
    }

    pub(crate) fn root(&self) -> &KernelKind {
        match self {
            KernelKind::Lazy { base, .. } => base.root(),
            k => k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub x: State,
    pub w: f64,
}

/// One joint grid point: state, weight-node index and weight value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: State,
    pub node: usize,
    pub w: f64,
}

/// Enumerates joint states in x-major order and maps `(y, k-th atom of Q_y)`
/// to joint indices.
#[derive(Debug, Clone)]
pub struct JointLayout {
    pub points: Vec<GridPoint>,
    start: Vec<usize>,
    present: Vec<bool>,
}

impl JointLayout {
    pub fn new(model: &ModelSpec, grid: &WeightGrid, collapse_w: bool) -> Self {
        let mut points = Vec::new();
        let mut start = Vec::with_capacity(model.len());
        let mut present = Vec::with_capacity(model.len());
        for x in 0..model.len() {
            start.push(points.len());
            let alive = model.target().log_prob(x) > f64::NEG_INFINITY;
            present.push(alive);
            if !alive {
                continue;
            }
            if collapse_w {
                points.push(GridPoint { x, node: 0, w: 1.0 });
            } else {
                for &(i, _) in grid.q_row(x) {
                    points.push(GridPoint {
                        x,
                        node: i,
                        w: grid.nodes()[i],
                    });
                }
            }
        }
        JointLayout {
            points,
            start,
            present,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Joint index of the `k`-th positive atom of `Q_y`.
    pub fn index(&self, y: State, k: usize) -> Option<usize> {
        self.present[y].then(|| self.start[y] + k)
    }

    /// Joint indices belonging to state `x`.
    pub fn block(&self, x: State) -> std::ops::Range<usize> {
        let end = self.start.get(x + 1).copied().unwrap_or(self.points.len());
        self.start[x]..end
    }
}

/// Off-diagonal (and self-proposal) moves out of joint point `p`, as
/// `(target index, probability)`; the holding mass is returned separately.
pub(crate) fn sparse_row(
    model: &ModelSpec,
    grid: &WeightGrid,
    layout: &JointLayout,
    kind: &KernelKind,
    p: &GridPoint,
) -> Vec<(usize, f64)> {
    let x = p.x;
    let mut out = Vec::new();
    for &(y, qxy) in model.proposal_row(x) {
        if !layout.present[y] {
            continue;
        }
        let r = model.ratio_unchecked(x, y, qxy);
        match kind.root() {
            KernelKind::Marginal => {
                out.push((layout.start[y], qxy * r.min(1.0)));
            }
            KernelKind::Pseudo => {
                for (k, &(j, qu)) in grid.q_row(y).iter().enumerate() {
                    let u = grid.nodes()[j];
                    out.push((layout.start[y] + k, qxy * qu * (r * u / p.w).min(1.0)));
                }
            }
            KernelKind::Check => {
                for (k, &(j, qu)) in grid.q_row(y).iter().enumerate() {
                    let u = grid.nodes()[j];
                    out.push((layout.start[y] + k, qxy * qu * r.min(1.0) * (u / p.w).min(1.0)));
                }
            }
            KernelKind::Auxiliary => {
                let a = qxy * r.min(1.0);
                for (k, (_, pu)) in grid.tilted(y).into_iter().enumerate() {
                    out.push((layout.start[y] + k, a * pu));
                }
            }
            KernelKind::Lazy { .. } => unreachable!(),
        }
    }
    out
}

/// Dense row-stochastic matrix over the joint grid with its stationary law.
#[derive(Debug, Clone)]
pub struct JointKernelMatrix {
    pub kind: KernelKind,
    pub layout: JointLayout,
    pub matrix: DMatrix<f64>,
    pub stationary: DVector<f64>,
}

impl JointKernelMatrix {
    pub fn build(model: &ModelSpec, grid: &WeightGrid, kind: KernelKind) -> Result<Self, KernelError> {
        Self::build_with_budget(model, grid, kind, DEFAULT_ENTRY_BUDGET)
    }

    pub fn build_with_budget(
        model: &ModelSpec,
        grid: &WeightGrid,
        kind: KernelKind,
        budget: usize,
    ) -> Result<Self, KernelError> {
        if grid.n_states() != model.len() {
            return Err(KernelError::StateMismatch {
                grid: grid.n_states(),
                model: model.len(),
            });
        }
        if let KernelKind::Lazy { epsilon, .. } = &kind {
            if !(0.0..1.0).contains(epsilon) {
                return Err(KernelError::InvalidLaziness(*epsilon));
            }
        }
        let marginal = matches!(kind.root(), KernelKind::Marginal);
        let layout = JointLayout::new(model, grid, marginal);
        let n = layout.len();
        let entries = n.saturating_mul(n);
        if entries > budget {
            return Err(KernelError::GridTooLarge {
                states: n,
                entries,
                budget,
            });
        }
        let rows: Vec<Vec<(usize, f64)>> = layout
            .points
            .par_iter()
            .map(|p| sparse_row(model, grid, &layout, &kind, p))
            .collect();
        let mut matrix = DMatrix::<f64>::zeros(n, n);
        for (i, row) in rows.iter().enumerate() {
            let mut off = 0.0;
            for &(j, v) in row {
                if j != i {
                    matrix[(i, j)] += v;
                    off += v;
                }
            }
            let hold = 1.0 - off;
            if hold < -1e-12 {
                return Err(KernelError::Invalid(format!("row {i} has mass {off} off the diagonal")));
            }
            matrix[(i, i)] = hold.max(0.0);
        }
        let stationary = stationary_closed_form(model, grid, &layout, kind.root());
        if let KernelKind::Lazy { .. } = &kind {
            let eps = lazy_factor(&kind);
            matrix *= 1.0 - eps;
            for i in 0..n {
                matrix[(i, i)] += eps;
            }
        }
        let built = JointKernelMatrix {
            kind,
            layout,
            matrix,
            stationary,
        };
        let res = built.stationarity_residual();
        if res > 1e-8 {
            return Err(KernelError::Invalid(format!("stationary residual {res}")));
        }
        Ok(built)
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn points(&self) -> &[GridPoint] {
        &self.layout.points
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.matrix
            .row_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `max |μ(s)K(s,t) − μ(t)K(t,s)|`.
    pub fn detailed_balance_residual(&self) -> f64 {
        let n = self.len();
        let mu = &self.stationary;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = mu[i] * self.matrix[(i, j)] - mu[j] * self.matrix[(j, i)];
                worst = worst.max(d.abs());
            }
        }
        worst
    }

    /// `‖μK − μ‖₁`.
    pub fn stationarity_residual(&self) -> f64 {
        let left = self.matrix.tr_mul(&self.stationary);
        (left - &self.stationary).abs().sum()
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v
    }

    /// `Σ μ(s)(1 − K(s,s))`, the stationary probability of leaving the current state.
    pub fn move_rate(&self) -> f64 {
        (0..self.len())
            .map(|i| self.stationary[i] * (1.0 - self.matrix[(i, i)]))
            .sum()
    }

    /// Collapses a joint kernel onto `X`: `K_X(x,y) = Σ_w π_x(w) Σ_u K((x,w),(y,u))`.
    pub fn collapse_x(&self, n_states: usize) -> DMatrix<f64> {
        let mut out = DMatrix::<f64>::zeros(n_states, n_states);
        let mut mass = vec![0.0; n_states];
        for (i, p) in self.layout.points.iter().enumerate() {
            mass[p.x] += self.stationary[i];
        }
        for (i, p) in self.layout.points.iter().enumerate() {
            let c = self.stationary[i] / mass[p.x];
            for (j, q) in self.layout.points.iter().enumerate() {
                out[(p.x, q.x)] += c * self.matrix[(i, j)];
            }
        }
        out
    }

    /// Coordinate-list export with header `row,col,value` (nonzeros only).
    pub fn write_coo_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "col", "value"])?;
        for i in 0..self.len() {
            for j in 0..self.len() {
                let v = self.matrix[(i, j)];
                if v != 0.0 {
                    w.serialize((i, j, v))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn lazy_factor(kind: &KernelKind) -> f64 {
    match kind {
        KernelKind::Lazy { base, epsilon } => 1.0 - (1.0 - epsilon) * (1.0 - lazy_factor(base)),
        _ => 0.0,
    }
}

fn stationary_closed_form(
    model: &ModelSpec,
    grid: &WeightGrid,
    layout: &JointLayout,
    kind: &KernelKind,
) -> DVector<f64> {
    let top = model.target().log_probs().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = layout
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let px = (model.target().log_prob(p.x) - top).exp();
            match kind {
                KernelKind::Marginal => px,
                KernelKind::Auxiliary => {
                    let k = i - layout.start[p.x];
                    px * grid.tilted(p.x)[k].1
                }
                _ => {
                    let k = i - layout.start[p.x];
                    px * p.w * grid.q_row(p.x)[k].1
                }
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    DVector::from_iterator(raw.len(), raw.into_iter().map(|r| r / total))
}

/// Probability of accepting a move out of `(x, w)`, self-proposals included.
pub fn acceptance_prob(model: &ModelSpec, grid: &WeightGrid, kind: &KernelKind, x: State, w: f64) -> f64 {
    let mut acc = 0.0;
    for &(y, qxy) in model.proposal_row(x) {
        if model.target().log_prob(y) == f64::NEG_INFINITY {
            continue;
        }
        let r = model.ratio_unchecked(x, y, qxy);
        acc += qxy
            * match kind.root() {
                KernelKind::Marginal | KernelKind::Auxiliary => r.min(1.0),
                KernelKind::Pseudo => grid.q_atoms(y).map(|(u, qu)| qu * (r * u / w).min(1.0)).sum(),
                KernelKind::Check => {
                    r.min(1.0) * grid.q_atoms(y).map(|(u, qu)| qu * (u / w).min(1.0)).sum::<f64>()
                }
                KernelKind::Lazy { .. } => unreachable!(),
            };
    }
    acc
}

/// Exact stationary mean acceptance rate `α_K`.
pub fn mean_acceptance(model: &ModelSpec, grid: &WeightGrid, kind: &KernelKind) -> f64 {
    let probs = model.target().probs();
    let one = matches!(kind.root(), KernelKind::Marginal | KernelKind::Auxiliary);
    let mut alpha = 0.0;
    for x in 0..model.len() {
        if probs[x] == 0.0 {
            continue;
        }
        if one {
            alpha += probs[x] * acceptance_prob(model, grid, kind, x, 1.0);
        } else {
            for (k, (_, pw)) in grid.tilted(x).into_iter().enumerate() {
                let w = grid.nodes()[grid.q_row(x)[k].0];
                alpha += probs[x] * pw * acceptance_prob(model, grid, kind, x, w);
            }
        }
    }
    let eps = lazy_factor(kind);
    (1.0 - eps) * alpha
}

/// `∫|w−1| π(dx) Q_x(dw)`.
pub fn weight_l1_deviation(model: &ModelSpec, grid: &WeightGrid) -> f64 {
    (0..model.len())
        .map(|x| model.target().prob(x) * grid.mean_abs_deviation(x))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaFunctionals {
    pub auxiliary: f64,
    pub pseudo: f64,
    /// `Σ π(x) Σ_w Q_x(w)|w−1| Σ_y q(x,y) min{1,r} g(x,y)`.
    pub bound: f64,
}

/// Exact `Δ_P̄(g)`, `Δ_P̃(g)` and the upper bound on their difference.
pub fn delta_functional(model: &ModelSpec, grid: &WeightGrid, g: &DMatrix<f64>) -> Result<DeltaFunctionals, KernelError> {
    let n = model.len();
    if g.nrows() != n || g.ncols() != n {
        return Err(KernelError::AsymmetricG);
    }
    for i in 0..n {
        for j in 0..n {
            if g[(i, j)] < 0.0 || (g[(i, j)] - g[(j, i)]).abs() > 1e-14 * g[(i, j)].abs().max(1.0) {
                return Err(KernelError::AsymmetricG);
            }
        }
    }
    let probs = model.target().probs();
    let mut out = DeltaFunctionals {
        auxiliary: 0.0,
        pseudo: 0.0,
        bound: 0.0,
    };
    for x in 0..n {
        if probs[x] == 0.0 {
            continue;
        }
        let mut marg = 0.0;
        let tilted = grid.tilted(x);
        let mut pseudo = 0.0;
        for &(y, qxy) in model.proposal_row(x) {
            if probs[y] == 0.0 && model.target().log_prob(y) == f64::NEG_INFINITY {
                continue;
            }
            let r = model.ratio_unchecked(x, y, qxy);
            let gxy = g[(x, y)];
            marg += qxy * r.min(1.0) * gxy;
            for (k, (_, pw)) in tilted.iter().enumerate() {
                let w = grid.nodes()[grid.q_row(x)[k].0];
                let inner: f64 = grid.q_atoms(y).map(|(u, qu)| qu * (r * u / w).min(1.0)).sum();
                pseudo += pw * qxy * inner * gxy;
            }
        }
        out.auxiliary += probs[x] * marg;
        out.pseudo += probs[x] * pseudo;
        out.bound += probs[x] * grid.mean_abs_deviation(x) * marg;
    }
    Ok(out)
}

fn draw_row<R: Rng + ?Sized>(row: &[(State, f64)], rng: &mut R) -> State {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(y, p) in row {
        acc += p;
        if u < acc {
            return y;
        }
    }
    row.last().map(|e| e.0).unwrap()
}

/// One marginal Metropolis–Hastings step.
pub fn marginal_step<R: Rng + ?Sized>(model: &ModelSpec, x: State, rng: &mut R) -> (State, bool) {
    let y = draw_row(model.proposal_row(x), rng);
    let a = model.accept_prob(x, y, model.q(x, y));
    let u: f64 = rng.random();
    if u < a {
        (y, true)
    } else {
        (x, false)
    }
}

/// One pseudo-marginal step: `y ~ q(x,·)`, `u ~ Q_y`, accept w.p. `min{1, r u/w}`.
pub fn pseudo_step<R: Rng + ?Sized>(
    model: &ModelSpec,
    family: &WeightFamily,
    current: JointState,
    rng: &mut R,
) -> (JointState, bool) {
    let x = current.x;
    let y = draw_row(model.proposal_row(x), rng);
    let u = family.sample(y, rng);
    let a = (model.ratio_unchecked(x, y, model.q(x, y)) * u / current.w).min(1.0);
    let v: f64 = rng.random();
    if v < a {
        (JointState { x: y, w: u }, true)
    } else {
        (current, false)
    }
}

/// One auxiliary step: accept with the marginal probability, then refresh
/// the weight from the tilted law at the new state.
pub fn auxiliary_step<R: Rng + ?Sized>(
    model: &ModelSpec,
    family: &WeightFamily,
    current: JointState,
    rng: &mut R,
) -> (JointState, bool) {
    let x = current.x;
    let y = draw_row(model.proposal_row(x), rng);
    let a = model.accept_prob(x, y, model.q(x, y));
    let v: f64 = rng.random();
    if v < a {
        (
            JointState {
                x: y,
                w: family.sample_tilted(y, rng),
            },
            true,
        )
    } else {
        (current, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::{build_marginal_matrix, ProposalKernel, StateSpace, TargetDistribution};
    use crate::weights::GridSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn imh3() -> ModelSpec {
        let t = TargetDistribution::from_masses(StateSpace::finite(3).unwrap(), &[0.5, 0.3, 0.2]).unwrap();
        ModelSpec::new(t, ProposalKernel::uniform_independent(3)).unwrap()
    }

    fn swap2() -> ModelSpec {
        let t = TargetDistribution::uniform(StateSpace::finite(2).unwrap()).unwrap();
        ModelSpec::new(
            t,
            ProposalKernel::Explicit {
                matrix: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            },
        )
        .unwrap()
    }

    fn tp_grid(n: usize) -> WeightGrid {
        WeightGrid::from_family(&WeightFamily::two_point(0.5, 0.8), n, &GridSpec::default()).unwrap()
    }

    #[test]
    fn marginal_matrix_examples() {
        let p = build_marginal_matrix(&swap2()).unwrap();
        assert_eq!(p.matrix, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let p = build_marginal_matrix(&imh3()).unwrap();
        assert!((p.matrix[(0, 1)] - 0.2).abs() < 1e-15);
        assert!((p.matrix[(0, 2)] - 0.4 / 3.0).abs() < 1e-15);
        assert!((p.matrix[(0, 0)] - (1.0 - 0.2 - 0.4 / 3.0)).abs() < 1e-15);
        let t = TargetDistribution::geometric(31, 0.5).unwrap();
        let m = ModelSpec::new(t, ProposalKernel::nearest_neighbour()).unwrap();
        let p = build_marginal_matrix(&m).unwrap();
        for x in 1..30 {
            assert!((p.matrix[(x, x - 1)] - 0.5).abs() < 1e-15);
            assert!((p.matrix[(x, x)] - 0.25).abs() < 1e-15);
            assert!((p.matrix[(x, x + 1)] - 0.25).abs() < 1e-15);
        }
        assert!(p.detailed_balance_residual() <= 1e-10);
        assert!(p.stationarity_residual() <= 1e-10);
        for x in 0..31 {
            let off: f64 = (0..31).filter(|&y| y != x).map(|y| p.matrix[(x, y)]).sum();
            let rho = m.rejection_probability(x).unwrap();
            assert!((rho - (1.0 - off - m.q(x, x))).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_one_pseudo_equals_marginal() {
        let m = imh3();
        let one = WeightGrid::constant_one(3);
        let p = build_marginal_matrix(&m).unwrap();
        for kind in [KernelKind::Pseudo, KernelKind::Auxiliary, KernelKind::Check] {
            let k = JointKernelMatrix::build(&m, &one, kind).unwrap();
            assert!((&k.matrix - &p.matrix).abs().max() < 1e-15);
        }
    }

    #[test]
    fn swap_two_point_enumeration() {
        let m = swap2();
        let grid = tp_grid(2);
        let k = JointKernelMatrix::build(&m, &grid, KernelKind::Pseudo).unwrap();
        let ws = [0.5, 3.0];
        let qs = [0.8, 0.2];
        for (i, p) in k.points().iter().enumerate() {
            for (j, q) in k.points().iter().enumerate() {
                if p.x == q.x {
                    continue;
                }
                let uj = ws.iter().position(|w| (w - q.w).abs() < 1e-14).unwrap();
                let expect = qs[uj] * (q.w / p.w).min(1.0);
                assert!((k.matrix[(i, j)] - expect).abs() < 1e-15);
            }
            let out: f64 = ws.iter().zip(qs).map(|(u, pu)| pu * (u / p.w).min(1.0)).sum();
            assert!((k.matrix[(i, i)] - (1.0 - out)).abs() < 1e-15);
        }
    }

    #[test]
    fn joint_invariants() {
        let m = imh3();
        let grid = tp_grid(3);
        let p = build_marginal_matrix(&m).unwrap();
        for kind in [KernelKind::Pseudo, KernelKind::Auxiliary, KernelKind::Check] {
            let k = JointKernelMatrix::build(&m, &grid, kind.clone()).unwrap();
            assert!(k.max_row_sum_error() < IDENTITY_TOL);
            assert!(k.detailed_balance_residual() < BALANCE_TOL, "{kind:?}");
            assert!(k.stationarity_residual() < IDENTITY_TOL);
            for (i, pt) in k.points().iter().enumerate() {
                let tilt = grid.tilted(pt.x).into_iter().find(|e| e.0 == pt.node).unwrap().1;
                assert!((k.stationary[i] - m.target().prob(pt.x) * tilt).abs() < 1e-14);
            }
        }
        let aux = JointKernelMatrix::build(&m, &grid, KernelKind::Auxiliary).unwrap();
        assert!((aux.collapse_x(3) - &p.matrix).abs().max() < IDENTITY_TOL);
    }

    #[test]
    fn lazy_diagonal() {
        let m = imh3();
        let grid = tp_grid(3);
        let k = JointKernelMatrix::build(&m, &grid, KernelKind::Pseudo).unwrap();
        let l = JointKernelMatrix::build(&m, &grid, KernelKind::lazy(KernelKind::Pseudo, 0.5)).unwrap();
        for i in 0..k.len() {
            assert!((l.matrix[(i, i)] - (0.5 + 0.5 * k.matrix[(i, i)])).abs() < 1e-15);
        }
        assert!(JointKernelMatrix::build(&m, &grid, KernelKind::lazy(KernelKind::Pseudo, 1.0)).is_err());
    }

    #[test]
    fn entry_budget() {
        let m = imh3();
        let grid = tp_grid(3);
        assert!(matches!(
            JointKernelMatrix::build_with_budget(&m, &grid, KernelKind::Pseudo, 10),
            Err(KernelError::GridTooLarge { states: 6, .. })
        ));
    }

    #[test]
    fn acceptance_functionals() {
        let flat = ModelSpec::new(
            TargetDistribution::uniform(StateSpace::finite(4).unwrap()).unwrap(),
            ProposalKernel::nearest_neighbour(),
        )
        .unwrap();
        let one = WeightGrid::constant_one(4);
        assert!((mean_acceptance(&flat, &one, &KernelKind::Marginal) - 1.0).abs() < 1e-15);
        let m = imh3();
        let grid = tp_grid(3);
        let ap = mean_acceptance(&m, &grid, &KernelKind::Marginal);
        let apt = mean_acceptance(&m, &grid, &KernelKind::Pseudo);
        let bound = weight_l1_deviation(&m, &grid);
        assert!(ap - apt >= 0.0 && ap - apt <= bound);
        let ones = DMatrix::from_element(3, 3, 1.0);
        let d = delta_functional(&m, &grid, &ones).unwrap();
        assert!((d.auxiliary - ap).abs() < 1e-14 && (d.pseudo - apt).abs() < 1e-14);
        let zero = DMatrix::zeros(3, 3);
        let d = delta_functional(&m, &grid, &zero).unwrap();
        assert_eq!((d.auxiliary, d.pseudo), (0.0, 0.0));
        let mut asym = DMatrix::from_element(3, 3, 1.0);
        asym[(0, 1)] = 2.0;
        assert_eq!(delta_functional(&m, &grid, &asym), Err(KernelError::AsymmetricG));
        // matrix diagonal agrees with the exact functional
        let k = JointKernelMatrix::build(&m, &grid, KernelKind::Pseudo).unwrap();
        let via_matrix: f64 = (0..k.len())
            .map(|i| {
                let p = k.points()[i];
                k.stationary[i] * acceptance_prob(&m, &grid, &KernelKind::Pseudo, p.x, p.w)
            })
            .sum();
        assert!((via_matrix - apt).abs() < 1e-14);
    }

    #[test]
    fn random_delta_order_on_three_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = imh3();
        let grid = tp_grid(3);
        for _ in 0..50 {
            let mut g = DMatrix::zeros(3, 3);
            for i in 0..3 {
                for j in i..3 {
                    let v: f64 = rng.random::<f64>() * 3.0;
                    g[(i, j)] = v;
                    g[(j, i)] = v;
                }
            }
            let d = delta_functional(&m, &grid, &g).unwrap();
            assert!(d.auxiliary - d.pseudo >= -1e-15);
            assert!(d.auxiliary - d.pseudo <= d.bound + 1e-15);
        }
    }

    #[test]
    fn steppers_coincide_under_constant_one() {
        let m = imh3();
        let f = WeightFamily::ConstantOne;
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let mut r3 = ChaCha8Rng::seed_from_u64(9);
        let (mut x, mut a, mut b) = (0, JointState { x: 0, w: 1.0 }, JointState { x: 0, w: 1.0 });
        for _ in 0..10_000 {
            x = marginal_step(&m, x, &mut r1).0;
            a = pseudo_step(&m, &f, a, &mut r2).0;
            b = auxiliary_step(&m, &f, b, &mut r3).0;
            assert!(x == a.x && x == b.x);
        }
    }

    #[test]
    fn large_weight_is_sticky() {
        let m = imh3();
        let f = WeightFamily::two_point(0.01, 0.99);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let high = (1.0 - 0.99 * 0.01) / 0.01;
        let start = JointState { x: 1, w: high };
        let n = 200_000;
        let acc = (0..n).filter(|_| pseudo_step(&m, &f, start, &mut rng).1).count() as f64 / n as f64;
        let grid = WeightGrid::from_family(&f, 3, &GridSpec::default()).unwrap();
        let exact = acceptance_prob(&m, &grid, &KernelKind::Pseudo, 1, high);
        assert!(exact < 0.02);
        assert!((acc - exact).abs() < 4.0 * (exact * (1.0 - exact) / n as f64).sqrt());
    }

    #[test]
    fn auxiliary_acceptance_matches_marginal() {
        let m = imh3();
        let f = WeightFamily::two_point(0.5, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 1_000_000;
        let start = JointState { x: 0, w: 0.5 };
        let acc = (0..n).filter(|_| auxiliary_step(&m, &f, start, &mut rng).1).count() as f64 / n as f64;
        let exact = 1.0 - m.rejection_probability(0).unwrap();
        assert!((acc - exact).abs() < 4.0 * (exact * (1.0 - exact) / n as f64).sqrt());
    }

    #[test]
    fn coo_export() {
        let p = build_marginal_matrix(&swap2()).unwrap();
        let mut buf = Vec::new();
        p.write_coo_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "row,col,value\n0,1,1.0\n1,0,1.0\n");
    }
}

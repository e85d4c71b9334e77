//! Target distributions, proposal kernels and the marginal Metropolis–Hastings
//! algorithm on finite state spaces and discretized 1-D/2-D grids.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{JointKernelMatrix, KernelError, KernelKind};
use crate::weights::WeightGrid;

/// Index of a state in a finite (or discretized) state space.
pub type State = usize;

/// Tolerance on proposal row sums and normalized target mass.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Largest state count a grid may enumerate.
pub const MAX_STATES: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid state space: {0}")]
    InvalidSpace(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("invalid proposal: {0}")]
    InvalidProposal(String),
    #[error("acceptance ratio undefined at ({x}, {y})")]
    UndefinedRatio { x: State, y: State },
    #[error("state {0} has zero target mass")]
    ZeroMassState(State),
    #[error("state space cannot be enumerated: {0}")]
    NonFiniteSpace(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateSpace {
    Finite {
        labels: Vec<u32>,
    },
    Grid {
        lower: f64,
        upper: f64,
        points: usize,
        dimension: usize,
    },
}

impl StateSpace {
    /// `n` states labelled `0..n`.
    pub fn finite(n: usize) -> Result<Self, ModelError> {
        let space = StateSpace::Finite {
            labels: (0..n as u32).collect(),
        };
        space.validate()?;
        Ok(space)
    }

    pub fn grid(lower: f64, upper: f64, points: usize, dimension: usize) -> Result<Self, ModelError> {
        let space = StateSpace::Grid {
            lower,
            upper,
            points,
            dimension,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            StateSpace::Finite { labels } => {
                if labels.len() < 2 {
                    return Err(ModelError::InvalidSpace("need at least 2 states".into()));
                }
                let mut sorted = labels.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != labels.len() {
                    return Err(ModelError::InvalidSpace("state ids must be unique".into()));
                }
            }
            StateSpace::Grid {
                lower,
                upper,
                points,
                dimension,
            } => {
                if *points < 2 {
                    return Err(ModelError::InvalidSpace("grid needs at least 2 points".into()));
                }
                if !(upper > lower) || !lower.is_finite() || !upper.is_finite() {
                    return Err(ModelError::InvalidSpace("grid needs upper > lower".into()));
                }
                if !(1..=2).contains(dimension) {
                    return Err(ModelError::InvalidSpace("grid dimension must be 1 or 2".into()));
                }
                let n = (*points as f64).powi(*dimension as i32);
                if n > MAX_STATES as f64 {
                    return Err(ModelError::NonFiniteSpace(format!("{n} grid cells")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match self {
            StateSpace::Finite { labels } => labels.len(),
            StateSpace::Grid {
                points, dimension, ..
            } => points.pow(*dimension as u32),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dimension(&self) -> usize {
        match self {
            StateSpace::Finite { .. } => 1,
            StateSpace::Grid { dimension, .. } => *dimension,
        }
    }

    fn extent(&self) -> usize {
        match self {
            StateSpace::Finite { labels } => labels.len(),
            StateSpace::Grid { points, .. } => *points,
        }
    }

    /// Multi-index of a state (row-major, first axis slowest).
    pub fn coords(&self, s: State) -> Vec<usize> {
        let d = self.dimension();
        let m = self.extent();
        let mut out = vec![0; d];
        let mut rest = s;
        for axis in (0..d).rev() {
            out[axis] = rest % m;
            rest /= m;
        }
        out
    }

    pub fn index(&self, coords: &[i64]) -> Option<State> {
        let m = self.extent() as i64;
        let mut s: i64 = 0;
        for &c in coords {
            if c < 0 || c >= m {
                return None;
            }
            s = s * m + c;
        }
        Some(s as State)
    }

    /// Cell midpoint of a grid state; finite states map to their index.
    pub fn midpoint(&self, s: State) -> Vec<f64> {
        match self {
            StateSpace::Finite { .. } => vec![s as f64],
            StateSpace::Grid {
                lower,
                upper,
                points,
                ..
            } => {
                let h = (upper - lower) / *points as f64;
                self.coords(s)
                    .into_iter()
                    .map(|c| lower + (c as f64 + 0.5) * h)
                    .collect()
            }
        }
    }

    /// Grid spacing; 1 for finite spaces.
    pub fn spacing(&self) -> f64 {
        match self {
            StateSpace::Finite { .. } => 1.0,
            StateSpace::Grid {
                lower,
                upper,
                points,
                ..
            } => (upper - lower) / *points as f64,
        }
    }
}

/// Normalized target distribution, kept in log space so that masses far below
/// the smallest positive double remain usable in ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    space: StateSpace,
    log_probs: Vec<f64>,
    log_normalizer: f64,
}

impl TargetDistribution {
    pub fn from_masses(space: StateSpace, masses: &[f64]) -> Result<Self, ModelError> {
        if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(ModelError::InvalidTarget("masses must be finite and nonnegative".into()));
        }
        Self::from_log_masses(space, masses.iter().map(|m| m.ln()).collect())
    }

    /// Unnormalized log masses; `-inf` marks a zero-mass state.
    pub fn from_log_masses(space: StateSpace, log_masses: Vec<f64>) -> Result<Self, ModelError> {
        space.validate()?;
        if log_masses.len() != space.len() {
            return Err(ModelError::InvalidTarget(format!(
                "{} masses for {} states",
                log_masses.len(),
                space.len()
            )));
        }
        if log_masses.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(ModelError::InvalidTarget("log masses must not be NaN or +inf".into()));
        }
        let top = log_masses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if top == f64::NEG_INFINITY {
            return Err(ModelError::InvalidTarget("at least one mass must be positive".into()));
        }
        let sum: f64 = log_masses.iter().map(|l| (l - top).exp()).sum();
        let log_normalizer = top + sum.ln();
        let log_probs = log_masses.iter().map(|l| l - log_normalizer).collect();
        Ok(TargetDistribution {
            space,
            log_probs,
            log_normalizer,
        })
    }

    /// Discretizes a log density on a grid by midpoint evaluation.
    pub fn from_log_density<F>(space: StateSpace, log_density: F) -> Result<Self, ModelError>
    where
        F: Fn(&[f64]) -> f64,
    {
        space.validate()?;
        let logs = (0..space.len())
            .map(|s| log_density(&space.midpoint(s)))
            .collect();
        Self::from_log_masses(space, logs)
    }

    /// `π(x) ∝ ratio^x` on `{0, …, n−1}`.
    pub fn geometric(n: usize, ratio: f64) -> Result<Self, ModelError> {
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(ModelError::InvalidTarget("geometric ratio must be positive".into()));
        }
        let space = StateSpace::finite(n)?;
        let lr = ratio.ln();
        Self::from_log_masses(space, (0..n).map(|x| x as f64 * lr).collect())
    }

    pub fn uniform(space: StateSpace) -> Result<Self, ModelError> {
        let n = space.len();
        Self::from_log_masses(space, vec![0.0; n])
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn prob(&self, x: State) -> f64 {
        self.log_probs[x].exp()
    }

    pub fn log_prob(&self, x: State) -> f64 {
        self.log_probs[x]
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// Log of the normalizing constant of the supplied masses.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn mean(&self, f: &[f64]) -> f64 {
        self.log_probs.iter().zip(f).map(|(l, v)| l.exp() * v).sum()
    }

    pub fn variance(&self, f: &[f64]) -> f64 {
        let m = self.mean(f);
        self.log_probs
            .iter()
            .zip(f)
            .map(|(l, v)| l.exp() * (v - m).powi(2))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Increment {
    pub offset: Vec<i64>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposalKernel {
    /// `q(x, y) = probs[y]` for every `x`.
    Independent { probs: Vec<f64> },
    /// Symmetric increment on the index lattice; proposals leaving the space
    /// are folded into the self-loop.
    RandomWalk { increments: Vec<Increment> },
    Explicit { matrix: Vec<Vec<f64>> },
}

impl ProposalKernel {
    pub fn uniform_independent(n: usize) -> Self {
        ProposalKernel::Independent {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Nearest-neighbour walk `q(x, x±1) = 1/2` on a 1-D space.
    pub fn nearest_neighbour() -> Self {
        ProposalKernel::RandomWalk {
            increments: vec![
                Increment {
                    offset: vec![-1],
                    prob: 0.5,
                },
                Increment {
                    offset: vec![1],
                    prob: 0.5,
                },
            ],
        }
    }

    /// 1-D increment given as the two-fold convolution of a discretized
    /// centred Gaussian `q0` with standard deviation `half_sd` cells on
    /// offsets `-half_width..=half_width`. The result is divisible by
    /// construction.
    pub fn convolved_gaussian(half_sd: f64, half_width: i64) -> Self {
        let base: Vec<f64> = (-half_width..=half_width)
            .map(|z| (-(z as f64).powi(2) / (2.0 * half_sd * half_sd)).exp())
            .collect();
        let total: f64 = base.iter().sum();
        let base: Vec<f64> = base.iter().map(|b| b / total).collect();
        let width = 2 * half_width;
        let mut conv = vec![0.0; (2 * width + 1) as usize];
        for (i, a) in base.iter().enumerate() {
            for (j, b) in base.iter().enumerate() {
                conv[i + j] += a * b;
            }
        }
        ProposalKernel::RandomWalk {
            increments: conv
                .into_iter()
                .enumerate()
                .filter(|(_, p)| *p > 0.0)
                .map(|(k, prob)| Increment {
                    offset: vec![k as i64 - width],
                    prob,
                })
                .collect(),
        }
    }

    fn rows(&self, space: &StateSpace) -> Result<Vec<Vec<(State, f64)>>, ModelError> {
        let n = space.len();
        let rows = match self {
            ProposalKernel::Independent { probs } => {
                if probs.len() != n {
                    return Err(ModelError::InvalidProposal(format!(
                        "{} independent probabilities for {n} states",
                        probs.len()
                    )));
                }
                let row: Vec<(State, f64)> = probs
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p != 0.0)
                    .map(|(y, p)| (y, *p))
                    .collect();
                vec![row; n]
            }
            ProposalKernel::RandomWalk { increments } => {
                let d = space.dimension();
                for inc in increments {
                    if inc.offset.len() != d {
                        return Err(ModelError::InvalidProposal(format!(
                            "offset {:?} has wrong dimension (expected {d})",
                            inc.offset
                        )));
                    }
                }
                for inc in increments {
                    let mirror: Vec<i64> = inc.offset.iter().map(|o| -o).collect();
                    let back: f64 = increments
                        .iter()
                        .filter(|j| j.offset == mirror)
                        .map(|j| j.prob)
                        .sum();
                    let forth: f64 = increments
                        .iter()
                        .filter(|j| j.offset == inc.offset)
                        .map(|j| j.prob)
                        .sum();
                    if (back - forth).abs() > STOCHASTIC_TOL {
                        return Err(ModelError::InvalidProposal(format!(
                            "increment {:?} is not symmetric",
                            inc.offset
                        )));
                    }
                }
                (0..n)
                    .map(|x| {
                        let here: Vec<i64> = space.coords(x).into_iter().map(|c| c as i64).collect();
                        let mut row = std::collections::BTreeMap::<State, f64>::new();
                        for inc in increments {
                            let there: Vec<i64> =
                                here.iter().zip(&inc.offset).map(|(h, o)| h + o).collect();
                            let y = space.index(&there).unwrap_or(x);
                            *row.entry(y).or_default() += inc.prob;
                        }
                        row.into_iter().filter(|(_, p)| *p != 0.0).collect()
                    })
                    .collect()
            }
            ProposalKernel::Explicit { matrix } => {
                if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                    return Err(ModelError::InvalidProposal(format!(
                        "explicit proposal must be {n}x{n}"
                    )));
                }
                matrix
                    .iter()
                    .map(|r| {
                        r.iter()
                            .enumerate()
                            .filter(|(_, p)| **p != 0.0)
                            .map(|(y, p)| (y, *p))
                            .collect()
                    })
                    .collect()
            }
        };
        for (x, row) in rows.iter().enumerate() {
            if row.iter().any(|(_, p)| !(p.is_finite() && *p >= 0.0)) {
                return Err(ModelError::InvalidProposal(format!("row {x} has invalid entries")));
            }
            let sum: f64 = row.iter().map(|(_, p)| p).sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(ModelError::InvalidProposal(format!("row {x} sums to {sum}")));
            }
        }
        Ok(rows)
    }
}

/// A target with its proposal, materialized as sparse proposal rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecDef", into = "ModelSpecDef")]
pub struct ModelSpec {
    target: TargetDistribution,
    proposal: ProposalKernel,
    rows: Vec<Vec<(State, f64)>>,
}

#[derive(Serialize, Deserialize)]
struct ModelSpecDef {
    target: TargetDistribution,
    proposal: ProposalKernel,
}

impl TryFrom<ModelSpecDef> for ModelSpec {
    type Error = ModelError;
    fn try_from(def: ModelSpecDef) -> Result<Self, ModelError> {
        ModelSpec::new(def.target, def.proposal)
    }
}

impl From<ModelSpec> for ModelSpecDef {
    fn from(m: ModelSpec) -> Self {
        ModelSpecDef {
            target: m.target,
            proposal: m.proposal,
        }
    }
}

impl ModelSpec {
    pub fn new(target: TargetDistribution, proposal: ProposalKernel) -> Result<Self, ModelError> {
        let rows = proposal.rows(target.space())?;
        Ok(ModelSpec {
            target,
            proposal,
            rows,
        })
    }

    pub fn target(&self) -> &TargetDistribution {
        &self.target
    }

    pub fn proposal(&self) -> &ProposalKernel {
        &self.proposal
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_independent(&self) -> bool {
        matches!(self.proposal, ProposalKernel::Independent { .. })
    }

    /// Sparse proposal row `y ↦ q(x, y)`, sorted by `y`.
    pub fn proposal_row(&self, x: State) -> &[(State, f64)] {
        &self.rows[x]
    }

    pub fn q(&self, x: State, y: State) -> f64 {
        let row = &self.rows[x];
        match row.binary_search_by_key(&y, |(s, _)| *s) {
            Ok(i) => row[i].1,
            Err(_) => 0.0,
        }
    }

    /// `r(x,y) = π(y)q(y,x) / (π(x)q(x,y))`.
    pub fn acceptance_ratio(&self, x: State, y: State) -> Result<f64, ModelError> {
        let qxy = self.q(x, y);
        let lx = self.target.log_prob(x);
        if lx == f64::NEG_INFINITY {
            return Err(ModelError::UndefinedRatio { x, y });
        }
        if x == y {
            return Ok(1.0);
        }
        if qxy == 0.0 {
            return Err(ModelError::UndefinedRatio { x, y });
        }
        let qyx = self.q(y, x);
        Ok((self.target.log_prob(y) - lx).exp() * qyx / qxy)
    }

    /// `min{1, r(x,y)}` for a proposed move; the caller guarantees `q(x,y) > 0`.
    pub(crate) fn accept_prob(&self, x: State, y: State, qxy: f64) -> f64 {
        if x == y {
            return 1.0;
        }
        let ratio = (self.target.log_prob(y) - self.target.log_prob(x)).exp() * self.q(y, x) / qxy;
        ratio.min(1.0)
    }

    /// Same as [`accept_prob`](Self::accept_prob) but returns the raw ratio.
    pub(crate) fn ratio_unchecked(&self, x: State, y: State, qxy: f64) -> f64 {
        if x == y {
            return 1.0;
        }
        (self.target.log_prob(y) - self.target.log_prob(x)).exp() * self.q(y, x) / qxy
    }

    /// `ρ(x) = 1 − Σ_y min{1, r(x,y)} q(x,y)`.
    pub fn rejection_probability(&self, x: State) -> Result<f64, ModelError> {
        if self.target.log_prob(x) == f64::NEG_INFINITY {
            return Err(ModelError::ZeroMassState(x));
        }
        let acc: f64 = self.rows[x]
            .iter()
            .map(|&(y, qxy)| qxy * self.accept_prob(x, y, qxy))
            .sum();
        Ok((1.0 - acc).clamp(0.0, 1.0))
    }

    /// Marginal acceptance probability `1 − ρ(x)` for every state of positive mass.
    pub fn acceptance_profile(&self) -> Vec<f64> {
        (0..self.len())
            .map(|x| self.rejection_probability(x).map(|r| 1.0 - r).unwrap_or(0.0))
            .collect()
    }

    /// Largest `ρ(x)` over states of non-negligible mass.
    pub fn max_rejection(&self) -> f64 {
        (0..self.len())
            .filter(|&x| self.target.prob(x) > 1e-14)
            .filter_map(|x| self.rejection_probability(x).ok())
            .fold(0.0, f64::max)
    }
}

/// Exact marginal kernel `P` as a joint matrix with a single `w = 1` node.
pub fn build_marginal_matrix(model: &ModelSpec) -> Result<JointKernelMatrix, KernelError> {
    JointKernelMatrix::build(model, &WeightGrid::constant_one(model.len()), KernelKind::Marginal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imh3() -> ModelSpec {
        let t = TargetDistribution::from_masses(StateSpace::finite(3).unwrap(), &[0.5, 0.3, 0.2]).unwrap();
        ModelSpec::new(t, ProposalKernel::uniform_independent(3)).unwrap()
    }

    fn geometric_walk(n: usize) -> ModelSpec {
        let t = TargetDistribution::geometric(n, 0.5).unwrap();
        ModelSpec::new(t, ProposalKernel::nearest_neighbour()).unwrap()
    }

    #[test]
    fn ratio_identity_and_geometric() {
        let m = geometric_walk(31);
        assert_eq!(m.acceptance_ratio(4, 4).unwrap(), 1.0);
        assert!((m.acceptance_ratio(3, 4).unwrap() - 0.5).abs() < 1e-15);
        assert!((m.acceptance_ratio(3, 2).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ratio_imh_arithmetic() {
        let m = imh3();
        assert!((m.acceptance_ratio(0, 1).unwrap() - 0.6).abs() < 1e-14);
        for x in 0..3 {
            for y in 0..3 {
                let prod = m.acceptance_ratio(x, y).unwrap() * m.acceptance_ratio(y, x).unwrap();
                assert!((prod - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn undefined_ratio() {
        let t = TargetDistribution::from_masses(StateSpace::finite(3).unwrap(), &[0.0, 1.0, 1.0]).unwrap();
        let m = ModelSpec::new(t, ProposalKernel::uniform_independent(3)).unwrap();
        assert_eq!(
            m.acceptance_ratio(0, 1),
            Err(ModelError::UndefinedRatio { x: 0, y: 1 })
        );
        let walk = geometric_walk(5);
        assert!(matches!(
            walk.acceptance_ratio(0, 3),
            Err(ModelError::UndefinedRatio { .. })
        ));
    }

    #[test]
    fn rejection_examples() {
        let m = imh3();
        assert!((m.rejection_probability(0).unwrap() - 1.0 / 3.0).abs() < 1e-14);
        let walk = geometric_walk(31);
        for x in 1..30 {
            assert!((walk.rejection_probability(x).unwrap() - 0.25).abs() < 1e-14);
        }
        let flat = ModelSpec::new(
            TargetDistribution::uniform(StateSpace::finite(6).unwrap()).unwrap(),
            ProposalKernel::nearest_neighbour(),
        )
        .unwrap();
        for x in 0..6 {
            assert_eq!(flat.rejection_probability(x).unwrap(), 0.0);
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(StateSpace::finite(1).is_err());
        assert!(StateSpace::grid(1.0, 0.0, 10, 1).is_err());
        assert!(StateSpace::grid(0.0, 1.0, 1, 1).is_err());
        assert!(StateSpace::Finite { labels: vec![1, 1] }.validate().is_err());
        let space = StateSpace::finite(3).unwrap();
        assert!(TargetDistribution::from_masses(space.clone(), &[0.0, 0.0, 0.0]).is_err());
        assert!(TargetDistribution::from_masses(space.clone(), &[1.0, -1.0, 0.0]).is_err());
        let t = TargetDistribution::uniform(space).unwrap();
        let skew = ProposalKernel::RandomWalk {
            increments: vec![
                Increment { offset: vec![1], prob: 0.7 },
                Increment { offset: vec![-1], prob: 0.3 },
            ],
        };
        assert!(matches!(ModelSpec::new(t.clone(), skew), Err(ModelError::InvalidProposal(_))));
        let bad = ProposalKernel::Explicit {
            matrix: vec![vec![0.5, 0.4, 0.0]; 3],
        };
        assert!(matches!(ModelSpec::new(t, bad), Err(ModelError::InvalidProposal(_))));
    }

    #[test]
    fn grid_midpoints_and_2d_walk() {
        let space = StateSpace::grid(-1.0, 1.0, 4, 2).unwrap();
        assert_eq!(space.len(), 16);
        assert_eq!(space.midpoint(0), vec![-0.75, -0.75]);
        assert_eq!(space.midpoint(7), vec![-0.25, 0.75]);
        let t = TargetDistribution::from_log_density(space, |p| -(p[0] * p[0] + p[1] * p[1])).unwrap();
        let walk = ProposalKernel::RandomWalk {
            increments: vec![
                Increment { offset: vec![1, 0], prob: 0.25 },
                Increment { offset: vec![-1, 0], prob: 0.25 },
                Increment { offset: vec![0, 1], prob: 0.25 },
                Increment { offset: vec![0, -1], prob: 0.25 },
            ],
        };
        let m = ModelSpec::new(t, walk).unwrap();
        // corner: two of four moves leave the grid
        assert!((m.q(0, 0) - 0.5).abs() < 1e-15);
        assert!((m.q(5, 6) - 0.25).abs() < 1e-15);
        let total: f64 = m.target().probs().iter().sum();
        assert!((total - 1.0).abs() < STOCHASTIC_TOL);
    }

    #[test]
    fn convolved_gaussian_is_symmetric_and_stochastic() {
        let k = ProposalKernel::convolved_gaussian(1.5, 4);
        if let ProposalKernel::RandomWalk { increments } = &k {
            assert_eq!(increments.len(), 17);
            let total: f64 = increments.iter().map(|i| i.prob).sum();
            assert!((total - 1.0).abs() < 1e-14);
        } else {
            unreachable!()
        }
        let t = TargetDistribution::uniform(StateSpace::finite(20).unwrap()).unwrap();
        assert!(ModelSpec::new(t, k).is_ok());
    }

    #[test]
    fn underflowing_masses_keep_ratios() {
        let n = 2100;
        let space = StateSpace::finite(n).unwrap();
        let logs = (0..n).map(|x| -(x as f64 + 1.0) * std::f64::consts::LN_2).collect();
        let t = TargetDistribution::from_log_masses(space, logs).unwrap();
        let m = ModelSpec::new(t, ProposalKernel::nearest_neighbour()).unwrap();
        assert_eq!(m.target().prob(2050), 0.0);
        assert!((m.acceptance_ratio(2050, 2051).unwrap() - 0.5).abs() < 1e-12);
        assert!((m.rejection_probability(2050).unwrap() - 0.25).abs() < 1e-12);
    }
}

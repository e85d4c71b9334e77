//! Geometric target on a truncated lattice with weights that destroy the
//! left spectral gap: block `k` occupies `x = 10^k + n`, `n ∈ [1, 10^k]`, with
//! `Q_x = (1−ε_k)δ_{a(k,n)} + ε_k δ_{b(k,n)}`, `ε_k = 10^{−k}`, `a = 2^{n−10^k}`.

use serde::{Deserialize, Serialize};

use crate::kernels::{JointKernelMatrix, KernelKind};
use crate::spectral::Spectrum;
use crate::target::{build_marginal_matrix, ModelSpec, ProposalKernel, TargetDistribution};
use crate::weights::{StateParam, WeightFamily, WeightGrid};

use super::DriftError;

/// Largest block handled; the joint matrix is only built up to [`MAX_EXACT_K`].
pub const MAX_K: u32 = 3;
pub const MAX_EXACT_K: u32 = 2;
pub const DRIFT_BASE: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterexampleConfig {
    pub k_max: u32,
    /// Last state of the truncated lattice; defaults to `2·10^k_max + 1`.
    pub truncation: Option<usize>,
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        CounterexampleConfig {
            k_max: 2,
            truncation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub k: u32,
    pub epsilon: f64,
    /// `⟨f_k, P̃f_k⟩ / ‖f_k‖²`.
    pub quotient: f64,
    /// `−1 + (2 + (10^k−2)ε_k)/10^k`.
    pub bound: f64,
    pub holds: bool,
    /// The same quotient from the assembled joint matrix, when built.
    pub quotient_matrix: Option<f64>,
    /// `1 + quotient ≥ Gap_L(P̃)`.
    pub left_gap_upper: f64,
    /// Exact `Gap_L(P̃)` of the chain truncated after block `k`.
    pub left_gap_exact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub truncation: usize,
    /// `max |PV(x)/V(x) − 23/24|` over interior `x` for `V = (3/2)^x`.
    pub drift_error: f64,
    pub drift_ratio: f64,
    pub blocks: Vec<BlockReport>,
    /// Left-gap bounds decrease with `k`.
    pub left_gap_trend: bool,
    pub pass: bool,
}

pub fn epsilon(k: u32) -> f64 {
    10f64.powi(-(k as i32))
}

fn block_len(k: u32) -> usize {
    10usize.pow(k)
}

/// `(ln a, ln b)` at block `k`, offset `n`.
fn log_atoms(k: u32, n: usize) -> (f64, f64) {
    let e = epsilon(k);
    let ln_a = (n as f64 - block_len(k) as f64) * std::f64::consts::LN_2;
    let a = ln_a.exp();
    let b = (1.0 - (1.0 - e) * a) / e;
    (ln_a, b.ln())
}

pub fn bound(k: u32) -> f64 {
    let m = block_len(k) as f64;
    -1.0 + (2.0 + (m - 2.0) * epsilon(k)) / m
}

/// Model on `{0, …, truncation}` with `π(x) ∝ 2^{−x}` and `q(x, x±1) = 1/2`.
pub fn model(truncation: usize) -> Result<ModelSpec, DriftError> {
    let target = TargetDistribution::geometric(truncation + 1, 0.5)?;
    Ok(ModelSpec::new(target, ProposalKernel::nearest_neighbour())?)
}

/// Weight family of the example on `{0, …, truncation}` for blocks `1..=k_max`.
pub fn family(truncation: usize, k_max: u32) -> WeightFamily {
    let mut atoms = vec![vec![(1.0, 1.0)]; truncation + 1];
    for k in 1..=k_max {
        let e = epsilon(k);
        for n in 1..=block_len(k) {
            let x = block_len(k) + n;
            if x > truncation {
                break;
            }
            let (ln_a, ln_b) = log_atoms(k, n);
            atoms[x] = vec![(ln_a.exp(), 1.0 - e), (ln_b.exp(), e)];
        }
    }
    WeightFamily::Discrete {
        atoms: StateParam::PerState(atoms),
    }
}

/// `PV(x)/V(x)` for `V = (3/2)^x` at every interior state.
pub fn marginal_drift_ratios(model: &ModelSpec) -> Result<Vec<f64>, DriftError> {
    let p = build_marginal_matrix(model)?;
    let n = model.len();
    // V(y)/V(x) = base^{y−x} keeps the ratio finite on long lattices
    Ok((1..n - 1)
        .map(|x| {
            (x - 1..=x + 1)
                .map(|y| p.matrix[(x, y)] * DRIFT_BASE.powi(y as i32 - x as i32))
                .sum::<f64>()
        })
        .collect())
}

/// Rayleigh quotient of `f_k` evaluated within block `k` in log scale; the
/// stationary weights are constant on the `a`-atoms except at `n = 10^k`,
/// where the two atoms coincide at 1.
pub fn block_quotient(k: u32) -> f64 {
    let m = block_len(k);
    let e = epsilon(k);
    let f = |n: usize| if n % 2 == 1 { 1.0 } else { -1.0 };
    // log of the a-atom and its Q-mass at offset n; n outside [1, m] means w = 1
    let atom = |n: usize| -> (f64, f64) {
        if n == m {
            (0.0, 1.0)
        } else {
            (log_atoms(k, n).0, 1.0 - e)
        }
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for n in 1..=m {
        let (ln_w, mass) = atom(n);
        // π̃ relative to c_k = π(x)(1−ε)a(k,n)
        let weight = mass / (1.0 - e);
        let mut pf = 0.0;
        let mut moved = 0.0;
        for (dn, ln_r) in [(-1i64, std::f64::consts::LN_2), (1, -std::f64::consts::LN_2)] {
            let t = n as i64 + dn;
            let outcomes: Vec<(f64, f64, f64)> = if t >= 1 && t as usize <= m {
                let t = t as usize;
                let fv = f(t);
                if t == m {
                    vec![(0.0, 1.0, fv)]
                } else {
                    let (ln_a, ln_b) = log_atoms(k, t);
                    vec![(ln_a, 1.0 - e, fv), (ln_b, e, 0.0)]
                }
            } else {
                vec![(0.0, 1.0, 0.0)]
            };
            for (ln_u, qu, fv) in outcomes {
                let acc = (ln_r + ln_u - ln_w).min(0.0).exp();
                let prob = 0.5 * qu * acc;
                pf += prob * fv;
                moved += prob;
            }
        }
        pf += (1.0 - moved) * f(n);
        num += weight * f(n) * pf;
        den += weight;
    }
    num / den
}

fn f_vector(k: &JointKernelMatrix, block: u32) -> Vec<f64> {
    let m = block_len(block);
    k.points()
        .iter()
        .map(|p| {
            if p.x > m && p.x <= 2 * m {
                let n = p.x - m;
                let a = if n == m { 1.0 } else { log_atoms(block, n).0.exp() };
                if (p.w - a).abs() <= 1e-12 * a {
                    return if n % 2 == 1 { 1.0 } else { -1.0 };
                }
            }
            0.0
        })
        .collect()
}

fn matrix_quotient(k: &JointKernelMatrix, block: u32) -> f64 {
    let f = f_vector(k, block);
    let n = k.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        if f[i] == 0.0 {
            continue;
        }
        let pf: f64 = (0..n).map(|j| k.matrix[(i, j)] * f[j]).sum();
        num += k.stationary[i] * f[i] * pf;
        den += k.stationary[i] * f[i] * f[i];
    }
    num / den
}

fn joint_chain(truncation: usize, k_max: u32) -> Result<JointKernelMatrix, DriftError> {
    let m = model(truncation)?;
    let fam = family(truncation, k_max);
    let grid = WeightGrid::from_family(&fam, m.len(), &Default::default())?;
    Ok(JointKernelMatrix::build(&m, &grid, KernelKind::Pseudo)?)
}

pub fn counterexample_ledger(cfg: &CounterexampleConfig) -> Result<CounterexampleReport, DriftError> {
    if cfg.k_max == 0 || cfg.k_max > MAX_K {
        return Err(DriftError::Invalid(format!("k_max must lie in 1..={MAX_K}")));
    }
    let truncation = cfg.truncation.unwrap_or(2 * block_len(cfg.k_max) + 1);
    if truncation < 2 * block_len(cfg.k_max) + 1 {
        return Err(DriftError::TruncationTooSmall { truncation, k: cfg.k_max });
    }
    let ratios = marginal_drift_ratios(&model(truncation)?)?;
    let target = 23.0 / 24.0;
    let drift_error = ratios.iter().map(|r| (r - target).abs()).fold(0.0, f64::max);

    let exact_k = cfg.k_max.min(MAX_EXACT_K);
    let full_truncation = if cfg.k_max <= MAX_EXACT_K {
        truncation
    } else {
        2 * block_len(MAX_EXACT_K) + 1
    };
    let full = joint_chain(full_truncation, exact_k)?;

    let mut blocks = Vec::new();
    for k in 1..=cfg.k_max {
        let q = block_quotient(k);
        let b = bound(k);
        let (quotient_matrix, left_gap_exact) = if k <= exact_k {
            let qm = Some(matrix_quotient(&full, k));
            let own = joint_chain(2 * block_len(k) + 1, k)?;
            let gap = Spectrum::of(&own)?.report().left_gap;
            (qm, Some(gap))
        } else {
            (None, None)
        };
        let holds = q <= b + 1e-12 && quotient_matrix.is_none_or(|qm| (qm - q).abs() < 1e-9);
        blocks.push(BlockReport {
            k,
            epsilon: epsilon(k),
            quotient: q,
            bound: b,
            holds,
            quotient_matrix,
            left_gap_upper: 1.0 + q,
            left_gap_exact,
        });
    }
    let left_gap_trend = blocks.windows(2).all(|w| {
        w[1].left_gap_upper < w[0].left_gap_upper
            && match (w[0].left_gap_exact, w[1].left_gap_exact) {
                (Some(a), Some(b)) => b < a,
                _ => true,
            }
    });
    let pass = drift_error <= 1e-12 && blocks.iter().all(|b| b.holds) && left_gap_trend;
    Ok(CounterexampleReport {
        truncation,
        drift_error,
        drift_ratio: target,
        blocks,
        left_gap_trend,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_rows() {
        let m = model(30).unwrap();
        let p = build_marginal_matrix(&m).unwrap();
        for x in 1..30 {
            assert!((p.matrix[(x, x - 1)] - 0.5).abs() < 1e-14);
            assert!((p.matrix[(x, x)] - 0.25).abs() < 1e-14);
            assert!((p.matrix[(x, x + 1)] - 0.25).abs() < 1e-14);
        }
        assert!((m.rejection_probability(5).unwrap() - 0.25).abs() < 1e-14);
    }

    #[test]
    fn drift_ratio() {
        let r = marginal_drift_ratios(&model(40).unwrap()).unwrap();
        assert!(r.iter().all(|v| (v - 23.0 / 24.0).abs() < 1e-12));
    }

    #[test]
    fn bounds_at_small_k() {
        assert!((bound(1) + 0.72).abs() < 1e-15);
        assert!((bound(2) + 0.9702).abs() < 1e-15);
        assert!(block_quotient(1) <= -0.72);
        assert!(block_quotient(2) <= -0.9702);
        assert!(block_quotient(3) <= bound(3));
    }

    #[test]
    fn ledger_k1() {
        let r = counterexample_ledger(&CounterexampleConfig { k_max: 1, truncation: None }).unwrap();
        assert!(r.pass, "{r:?}");
        let b = &r.blocks[0];
        assert!((b.quotient_matrix.unwrap() - b.quotient).abs() < 1e-9);
        assert!(b.left_gap_exact.unwrap() <= b.left_gap_upper + 1e-9);
        let small = counterexample_ledger(&CounterexampleConfig { k_max: 1, truncation: Some(15) });
        assert!(matches!(small, Err(DriftError::TruncationTooSmall { .. })));
    }
}

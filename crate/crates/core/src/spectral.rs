//! Spectral gaps, Dirichlet forms and exact asymptotic variances of
//! reversible finite kernels, plus the ordering checks built on them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{delta_functional, mean_acceptance, weight_l1_deviation, JointKernelMatrix, KernelError, KernelKind};
use crate::target::{build_marginal_matrix, ModelSpec};
use crate::weights::WeightGrid;

pub const REVERSIBILITY_TOL: f64 = 1e-9;
pub const POSITIVITY_TOL: f64 = 1e-9;
const CLAMP_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("kernel is not reversible (residual {0:.3e})")]
    NotReversible(f64),
    #[error("spectral gap is zero")]
    ZeroGap,
    #[error("inequality `{check}` violated with slack {slack:.3e}")]
    InequalityViolated {
        check: String,
        slack: f64,
        instance: String,
    },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub gap: f64,
    pub left_gap: f64,
    pub min_eigenvalue: f64,
    pub is_positive_operator: bool,
    /// Eigenvalues on the mean-zero subspace, ascending.
    pub eigen_summary: Vec<f64>,
    /// Dirichlet quotient of the extremal eigenvector.
    pub rayleigh_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// `+inf` when the gap is zero and `f` charges the unit eigenspace.
    pub var_exact: f64,
    pub infinite: bool,
    pub iact: f64,
    pub var_pi: f64,
    pub var_lambda_curve: Vec<(f64, f64)>,
    /// Same quantity from the eigen-expansion `Σ c_i²(1+λ_i)/(1−λ_i)`.
    pub spectral_formula: f64,
    /// Truncated autocovariance series and a bound on its remainder.
    pub series_estimate: f64,
    pub series_tail_bound: f64,
}

/// Eigen-decomposition of a reversible kernel restricted to the mean-zero
/// subspace, obtained by deflating `√μ` with a Householder reflection.
#[derive(Debug, Clone)]
pub struct Spectrum {
    sqrt_mu: DVector<f64>,
    house: DVector<f64>,
    sym: DMatrix<f64>,
    deflated: DMatrix<f64>,
    eigen: SymmetricEigen<f64, nalgebra::Dyn>,
    mu: DVector<f64>,
}

fn householder_for(v: &DVector<f64>) -> DVector<f64> {
    // H = I − 2uuᵀ/uᵀu maps v to −sign(v₀)‖v‖e₁
    let mut u = v.clone();
    let norm = v.norm();
    let s = if v[0] >= 0.0 { 1.0 } else { -1.0 };
    u[0] += s * norm;
    u
}

fn apply_householder(u: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    let c = u.dot(u);
    x - u * (2.0 * u.dot(x) / c)
}

impl Spectrum {
    pub fn new(matrix: &DMatrix<f64>, mu: &DVector<f64>) -> Result<Self, SpectralError> {
        let n = matrix.nrows();
        let sqrt_mu = mu.map(f64::sqrt);
        let mut sym = DMatrix::<f64>::zeros(n, n);
        let mut residual: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let sij = sqrt_mu[i] * matrix[(i, j)] / sqrt_mu[j];
                sym[(i, j)] = sij;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                residual = residual.max((mu[i] * matrix[(i, j)] - mu[j] * matrix[(j, i)]).abs());
                let avg = 0.5 * (sym[(i, j)] + sym[(j, i)]);
                sym[(i, j)] = avg;
                sym[(j, i)] = avg;
            }
        }
        if residual > REVERSIBILITY_TOL {
            return Err(SpectralError::NotReversible(residual));
        }
        let u = householder_for(&sqrt_mu);
        let c = u.dot(&u);
        // HSH = S − 2u(Su)ᵀ/c − 2(Su)uᵀ/c + 4(uᵀSu)uuᵀ/c²
        let su = &sym * &u;
        let usu = u.dot(&su);
        let mut hsh = sym.clone();
        hsh -= (&u * su.transpose()) * (2.0 / c);
        hsh -= (&su * u.transpose()) * (2.0 / c);
        hsh += (&u * u.transpose()) * (4.0 * usu / (c * c));
        let deflated = hsh.view((1, 1), (n - 1, n - 1)).clone_owned();
        let sym_deflated = (&deflated + deflated.transpose()) * 0.5;
        let mut eigen = SymmetricEigen::new(sym_deflated.clone());
        for v in eigen.eigenvalues.iter_mut() {
            if *v > 1.0 && *v < 1.0 + CLAMP_TOL {
                *v = 1.0;
            }
            if *v < -1.0 && *v > -1.0 - CLAMP_TOL {
                *v = -1.0;
            }
        }
        Ok(Spectrum {
            sqrt_mu,
            house: u,
            sym,
            deflated: sym_deflated,
            eigen,
            mu: mu.clone(),
        })
    }

    pub fn of(k: &JointKernelMatrix) -> Result<Self, SpectralError> {
        Self::new(&k.matrix, &k.stationary)
    }

    pub fn len(&self) -> usize {
        self.sqrt_mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sqrt_mu.is_empty()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.eigen.eigenvalues.iter().cloned().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    fn extremal(&self, largest: bool) -> usize {
        let ev = &self.eigen.eigenvalues;
        let mut best = 0;
        for i in 1..ev.len() {
            if (largest && ev[i] > ev[best]) || (!largest && ev[i] < ev[best]) {
                best = i;
            }
        }
        best
    }

    /// Lifts a deflated eigenvector back to symmetric coordinates.
    fn lift(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut full = DVector::<f64>::zeros(self.len());
        full.rows_mut(1, self.len() - 1).copy_from(v);
        apply_householder(&self.house, &full)
    }

    pub fn report(&self) -> SpectralReport {
        let ev = self.eigenvalues();
        let (lo, hi) = (ev[0], ev[ev.len() - 1]);
        let top = self.lift(&self.eigen.eigenvectors.column(self.extremal(true)).clone_owned());
        let rayleigh_gap = top.dot(&(&top - &self.sym * &top)) / top.dot(&top);
        SpectralReport {
            gap: 1.0 - hi,
            left_gap: 1.0 + lo,
            min_eigenvalue: lo,
            is_positive_operator: lo >= -POSITIVITY_TOL,
            eigen_summary: ev,
            rayleigh_gap,
        }
    }

    /// Minimizer of the Dirichlet quotient, as a function over the states.
    pub fn gap_function(&self) -> DVector<f64> {
        let g = self.lift(&self.eigen.eigenvectors.column(self.extremal(true)).clone_owned());
        g.component_div(&self.sqrt_mu)
    }

    /// Coordinates of `D^{1/2}(f − μ(f))` on the deflated basis.
    fn coords(&self, f: &[f64]) -> DVector<f64> {
        let mean: f64 = f.iter().zip(self.mu.iter()).map(|(a, m)| a * m).sum();
        let g = DVector::from_iterator(self.len(), f.iter().zip(self.sqrt_mu.iter()).map(|(a, s)| (a - mean) * s));
        let h = apply_householder(&self.house, &g);
        h.rows(1, self.len() - 1).clone_owned()
    }

    pub fn stationary_variance(&self, f: &[f64]) -> f64 {
        self.coords(f).norm_squared()
    }

    /// `var_λ = ⟨f̄,(I−λK)⁻¹(I+λK)f̄⟩_μ` by a resolvent solve.
    pub fn var_lambda(&self, f: &[f64], lambda: f64) -> f64 {
        let c = self.coords(f);
        let m = self.len() - 1;
        let a = DMatrix::<f64>::identity(m, m) - &self.deflated * lambda;
        let y = a.lu().solve(&c).expect("I − λK is invertible for λ < 1");
        2.0 * c.dot(&y) - c.norm_squared()
    }

    /// Spectral-measure form `Σ c_i² φ(λ_i)` for any function of the eigenvalue.
    pub fn spectral_sum(&self, f: &[f64], phi: impl Fn(f64) -> f64) -> f64 {
        let c = self.eigen.eigenvectors.tr_mul(&self.coords(f));
        c.iter()
            .zip(self.eigen.eigenvalues.iter())
            .map(|(ci, li)| ci * ci * phi(*li))
            .sum()
    }

    pub fn asymptotic_variance(&self, f: &[f64]) -> VarianceReport {
        let c = self.coords(f);
        let var_pi = c.norm_squared();
        let coeff = self.eigen.eigenvectors.tr_mul(&c);
        let ev = &self.eigen.eigenvalues;
        let charged_unit = coeff
            .iter()
            .zip(ev.iter())
            .any(|(ci, li)| 1.0 - li <= 1e-13 && ci * ci > 1e-24 * var_pi.max(1e-300));
        let curve: Vec<(f64, f64)> = [0.0, 0.5, 0.9, 0.99, 0.999]
            .iter()
            .map(|&l| (l, self.var_lambda(f, l)))
            .collect();
        if charged_unit {
            return VarianceReport {
                var_exact: f64::INFINITY,
                infinite: true,
                iact: f64::INFINITY,
                var_pi,
                var_lambda_curve: curve,
                spectral_formula: f64::INFINITY,
                series_estimate: f64::INFINITY,
                series_tail_bound: f64::INFINITY,
            };
        }
        let m = self.len() - 1;
        let a = DMatrix::<f64>::identity(m, m) - &self.deflated;
        let y = a.lu().solve(&c).expect("I − K invertible on the mean-zero subspace");
        let var_exact = 2.0 * c.dot(&y) - var_pi;
        let spectral_formula: f64 = coeff
            .iter()
            .zip(ev.iter())
            .filter(|(ci, _)| **ci != 0.0)
            .map(|(ci, li)| ci * ci * (1.0 + li) / (1.0 - li))
            .sum();
        let (series_estimate, series_tail_bound) = self.autocovariance_series(&c, 2000);
        VarianceReport {
            var_exact,
            infinite: false,
            iact: if var_pi > 0.0 { var_exact / var_pi } else { 0.0 },
            var_pi,
            var_lambda_curve: curve,
            spectral_formula,
            series_estimate,
            series_tail_bound,
        }
    }

    /// `γ₀ + 2Σ_{k=1}^{T} γ_k` with the geometric bound on the omitted tail.
    fn autocovariance_series(&self, c: &DVector<f64>, max_terms: usize) -> (f64, f64) {
        let ev = &self.eigen.eigenvalues;
        let rho = ev.iter().map(|l| l.abs()).fold(0.0, f64::max);
        let var_pi = c.norm_squared();
        let mut sum = var_pi;
        let mut v = c.clone();
        let mut terms = 0;
        while terms < max_terms {
            v = &self.deflated * v;
            sum += 2.0 * c.dot(&v);
            terms += 1;
            if rho.powi(terms as i32) < 1e-14 {
                break;
            }
        }
        let tail = if rho < 1.0 {
            2.0 * var_pi * rho.powi(terms as i32 + 1) / (1.0 - rho)
        } else {
            f64::INFINITY
        };
        (sum, tail)
    }

    /// `Σ_{k≥n} ⟨ḡ, K^k ḡ⟩ = ⟨ḡ, K^n(I−K)⁻¹ḡ⟩`.
    pub fn tail_autocovariance(&self, f: &[f64], n: u32) -> Result<f64, SpectralError> {
        let coeff = self.eigen.eigenvectors.tr_mul(&self.coords(f));
        let mut total = 0.0;
        for (ci, li) in coeff.iter().zip(self.eigen.eigenvalues.iter()) {
            if *ci == 0.0 {
                continue;
            }
            if 1.0 - li <= 1e-13 {
                return Err(SpectralError::ZeroGap);
            }
            total += ci * ci * li.powi(n as i32) / (1.0 - li);
        }
        Ok(total)
    }
}

pub fn spectral_gap(k: &JointKernelMatrix) -> Result<SpectralReport, SpectralError> {
    Ok(Spectrum::of(k)?.report())
}

/// `(1/2) Σ μ(s)K(s,t)(f(s) − f(t))²`.
pub fn dirichlet_form(k: &JointKernelMatrix, f: &[f64]) -> f64 {
    dirichlet_form_of(&k.matrix, &k.stationary, f)
}

pub fn dirichlet_form_of(matrix: &DMatrix<f64>, mu: &DVector<f64>, f: &[f64]) -> f64 {
    let n = matrix.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let kij = matrix[(i, j)];
            if kij != 0.0 {
                total += mu[i] * kij * (f[i] - f[j]).powi(2);
            }
        }
    }
    0.5 * total
}

pub fn asymptotic_variance_exact(k: &JointKernelMatrix, f: &[f64]) -> Result<VarianceReport, SpectralError> {
    Ok(Spectrum::of(k)?.asymptotic_variance(f))
}

pub fn var_lambda(k: &JointKernelMatrix, f: &[f64], lambda: f64) -> Result<f64, SpectralError> {
    Ok(Spectrum::of(k)?.var_lambda(f, lambda))
}

/// Lifts `f` on X to the joint grid of `k`.
pub fn lift(k: &JointKernelMatrix, f: &[f64]) -> Vec<f64> {
    k.points().iter().map(|p| f[p.x]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs` for a check of the form `lhs ≤ rhs`.
    pub slack: f64,
}

impl InequalityCheck {
    pub fn le(name: &str, lhs: f64, rhs: f64) -> Self {
        InequalityCheck {
            name: name.to_string(),
            lhs,
            rhs,
            slack: rhs - lhs,
        }
    }
}

/// A batch of inequality checks on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub checks: Vec<InequalityCheck>,
    pub values: Vec<(String, f64)>,
}

impl CheckReport {
    fn new() -> Self {
        CheckReport {
            checks: Vec::new(),
            values: Vec::new(),
        }
    }

    fn value(&mut self, name: &str, v: f64) {
        self.values.push((name.to_string(), v));
    }

    fn le(&mut self, name: &str, lhs: f64, rhs: f64) {
        self.checks.push(InequalityCheck::le(name, lhs, rhs));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn check(&self, name: &str) -> Option<&InequalityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn min_slack(&self) -> f64 {
        self.checks.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min)
    }

    pub fn worst(&self) -> Option<&InequalityCheck> {
        self.checks.iter().min_by(|a, b| a.slack.total_cmp(&b.slack))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.min_slack() >= -tol
    }

    /// Fails with the worst check and the serialized instance.
    pub fn ensure(&self, tol: f64, model: &ModelSpec, grid: &WeightGrid) -> Result<(), SpectralError> {
        match self.worst() {
            Some(w) if w.slack < -tol => Err(SpectralError::InequalityViolated {
                check: w.name.clone(),
                slack: w.slack,
                instance: instance_json(model, grid),
            }),
            _ => Ok(()),
        }
    }
}

pub fn instance_json(model: &ModelSpec, grid: &WeightGrid) -> String {
    serde_json::json!({ "model": model, "weights": grid }).to_string()
}

/// Gap ordering between `P`, `P̄`, `P̌` and `P̃` for a bounded weight grid.
pub fn verify_gap_sandwich(model: &ModelSpec, grid: &WeightGrid) -> Result<CheckReport, SpectralError> {
    let p = build_marginal_matrix(model)?;
    let pbar = JointKernelMatrix::build(model, grid, KernelKind::Auxiliary)?;
    let ptilde = JointKernelMatrix::build(model, grid, KernelKind::Pseudo)?;
    let pcheck = JointKernelMatrix::build(model, grid, KernelKind::Check)?;
    let gp = spectral_gap(&p)?.gap;
    let gbar = spectral_gap(&pbar)?.gap;
    let gtilde = spectral_gap(&ptilde)?.gap;
    let gcheck = spectral_gap(&pcheck)?.gap;
    let max_rho = model.max_rejection();
    let w_bar = grid.max_weight();
    let mut r = CheckReport::new();
    r.value("gap_marginal", gp);
    r.value("gap_auxiliary", gbar);
    r.value("gap_pseudo", gtilde);
    r.value("gap_check", gcheck);
    r.value("max_rho", max_rho);
    r.value("w_bar", w_bar);
    r.le("gap_aux_le_marginal", gbar, gp);
    r.le("gap_aux_ge_min", gp.min(1.0 - max_rho), gbar);
    r.le("gap_pseudo_ge_check", gcheck, gtilde);
    r.le("gap_check_ge_aux_over_wbar", gbar / w_bar, gcheck);
    Ok(r)
}

/// Gap upper bound `(1 − μ(A))⁻¹(1 − inf_A ρ)` for an index set `A`, with
/// `ρ` the rejection probability of each joint state.
pub fn gap_vs_rejection_bound(k: &JointKernelMatrix, rejection: &[f64], set: &[usize]) -> Option<f64> {
    let mass: f64 = set.iter().map(|&i| k.stationary[i]).sum();
    if !(mass > 0.0 && mass < 1.0) {
        return None;
    }
    let inf_rho = set.iter().map(|&i| rejection[i]).fold(f64::INFINITY, f64::min);
    Some((1.0 - inf_rho) / (1.0 - mass))
}

/// Rejection probability of every joint state of `k`.
pub fn rejection_profile(model: &ModelSpec, grid: &WeightGrid, k: &JointKernelMatrix) -> Vec<f64> {
    k.points()
        .iter()
        .map(|p| 1.0 - crate::kernels::acceptance_prob(model, grid, &k.kind, p.x, p.w))
        .collect()
}

/// Variance ordering of the pseudo-marginal kernel against the marginal.
pub fn verify_variance_order(
    model: &ModelSpec,
    grid: &WeightGrid,
    g: &[f64],
    lambda: f64,
) -> Result<CheckReport, SpectralError> {
    let p = build_marginal_matrix(model)?;
    let ptilde = JointKernelMatrix::build(model, grid, KernelKind::Pseudo)?;
    let pcheck = JointKernelMatrix::build(model, grid, KernelKind::Check)?;
    let sp = Spectrum::of(&p)?;
    let st = Spectrum::of(&ptilde)?;
    let sc = Spectrum::of(&pcheck)?;
    let gt = lift(&ptilde, g);
    let var_p = sp.asymptotic_variance(g).var_exact;
    let var_t = st.asymptotic_variance(&gt).var_exact;
    let var_c = sc.asymptotic_variance(&lift(&pcheck, g)).var_exact;
    let var_pi = model.target().variance(g);
    let w_bar = grid.max_weight();
    let mut r = CheckReport::new();
    r.value("var_marginal", var_p);
    r.value("var_pseudo", var_t);
    r.value("var_check", var_c);
    r.value("var_pi", var_pi);
    r.value("w_bar", w_bar);
    r.le("var_pseudo_ge_marginal", var_p, var_t);
    r.le("var_check_ge_pseudo", var_t, var_c);
    r.le("var_pseudo_upper", var_t, w_bar * var_p + (w_bar - 1.0) * var_pi);

    // refined lower bound through the Δ-functionals at λ
    let n = model.len();
    let mean = model.target().mean(g);
    let fbar = DVector::from_iterator(n, g.iter().map(|v| v - mean));
    let phi = (DMatrix::<f64>::identity(n, n) - &p.matrix * lambda)
        .lu()
        .solve(&fbar)
        .expect("I − λP invertible");
    let gl = DMatrix::from_fn(n, n, |i, j| (phi[i] - phi[j]).powi(2));
    let delta = delta_functional(model, grid, &gl)?;
    let vl_t = st.var_lambda(&gt, lambda);
    let vl_p = sp.var_lambda(g, lambda);
    r.value("var_lambda_pseudo", vl_t);
    r.value("var_lambda_marginal", vl_p);
    r.value("delta_gap", delta.auxiliary - delta.pseudo);
    r.le("var_lambda_refined", lambda * (delta.auxiliary - delta.pseudo), vl_t - vl_p);
    Ok(r)
}

/// Acceptance-rate order `0 ≤ α_P − α_P̃ ≤ ∫|w−1|πQ`.
pub fn verify_acceptance_order(model: &ModelSpec, grid: &WeightGrid) -> CheckReport {
    let ap = mean_acceptance(model, grid, &KernelKind::Marginal);
    let at = mean_acceptance(model, grid, &KernelKind::Pseudo);
    let bound = weight_l1_deviation(model, grid);
    let mut r = CheckReport::new();
    r.value("alpha_marginal", ap);
    r.value("alpha_pseudo", at);
    r.value("l1_deviation", bound);
    r.le("alpha_diff_nonneg", 0.0, ap - at);
    r.le("alpha_diff_bound", ap - at, bound);
    r
}

/// One point of a gap-collapse scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapsePoint {
    pub upper_quantile: f64,
    pub gap: f64,
    pub max_weight: f64,
    pub tail_mass: f64,
    pub tail_bound: f64,
}

/// Gaps of `P̃` as the weight grid's upper cutoff grows; the tail set `A` is
/// the joint states at the largest weight node.
pub fn gap_collapse_scan(
    model: &ModelSpec,
    family: &crate::weights::WeightFamily,
    spec: &crate::weights::GridSpec,
    upper_quantiles: &[f64],
) -> Result<Vec<CollapsePoint>, SpectralError> {
    let mut out = Vec::new();
    for &uq in upper_quantiles {
        let s = spec.with_quantiles(spec.lower_quantile, uq);
        let grid = WeightGrid::from_family(family, model.len(), &s)
            .map_err(|e| SpectralError::InequalityViolated {
                check: format!("grid projection: {e}"),
                slack: f64::NAN,
                instance: String::new(),
            })?;
        let k = JointKernelMatrix::build(model, &grid, KernelKind::Pseudo)?;
        let gap = spectral_gap(&k)?.gap;
        let top = grid.max_weight();
        let set: Vec<usize> = k
            .points()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.w >= top)
            .map(|(i, _)| i)
            .collect();
        let rej = rejection_profile(model, &grid, &k);
        let tail_mass: f64 = set.iter().map(|&i| k.stationary[i]).sum();
        let tail_bound = gap_vs_rejection_bound(&k, &rej, &set).unwrap_or(f64::INFINITY);
        out.push(CollapsePoint {
            upper_quantile: uq,
            gap,
            max_weight: top,
            tail_mass,
            tail_bound,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::target::{ProposalKernel, StateSpace, TargetDistribution};
    use crate::weights::{GridSpec, WeightFamily};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn swap2() -> JointKernelMatrix {
        let t = TargetDistribution::uniform(StateSpace::finite(2).unwrap()).unwrap();
        let m = ModelSpec::new(
            t,
            ProposalKernel::Explicit {
                matrix: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            },
        )
        .unwrap();
        build_marginal_matrix(&m).unwrap()
    }

    fn chain5() -> ModelSpec {
        let t = TargetDistribution::from_masses(StateSpace::finite(5).unwrap(), &[1.0, 2.0, 3.0, 2.0, 1.5]).unwrap();
        ModelSpec::new(t, ProposalKernel::nearest_neighbour()).unwrap()
    }

    fn random_reversible(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.random::<f64>() + 0.05;
                sym[(i, j)] = v;
                sym[(j, i)] = v;
            }
        }
        let total = sym.sum();
        let mu = DVector::from_iterator(n, (0..n).map(|i| sym.row(i).sum() / total));
        let k = DMatrix::from_fn(n, n, |i, j| sym[(i, j)] / sym.row(i).sum());
        (k, mu)
    }

    #[test]
    fn swap_chain_spectrum() {
        let k = swap2();
        let r = spectral_gap(&k).unwrap();
        assert!((r.gap - 2.0).abs() < 1e-12);
        assert!(r.left_gap.abs() < 1e-12);
        assert!(!r.is_positive_operator);
        let v = asymptotic_variance_exact(&k, &[1.0, -1.0]).unwrap();
        assert!(v.var_exact.abs() < 1e-12);
    }

    #[test]
    fn identity_has_zero_gap() {
        let mu = DVector::from_vec(vec![0.25; 4]);
        let s = Spectrum::new(&DMatrix::identity(4, 4), &mu).unwrap();
        let r = s.report();
        assert!(r.gap.abs() < 1e-14);
        let v = s.asymptotic_variance(&[1.0, 0.0, 0.0, 0.0]);
        assert!(v.infinite && v.var_exact.is_infinite());
        assert_eq!(s.tail_autocovariance(&[1.0, 0.0, 0.0, 0.0], 3), Err(SpectralError::ZeroGap));
    }

    #[test]
    fn not_reversible_rejected() {
        let k = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let mu = DVector::from_vec(vec![1.0 / 3.0; 3]);
        assert!(matches!(Spectrum::new(&k, &mu), Err(SpectralError::NotReversible(_))));
    }

    #[test]
    fn iid_kernel_variance_is_stationary_variance() {
        let mu = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let k = DMatrix::from_fn(4, 4, |_, j| mu[j]);
        let s = Spectrum::new(&k, &mu).unwrap();
        let f = [1.0, -2.0, 0.5, 3.0];
        let v = s.asymptotic_variance(&f);
        assert!((v.var_exact - v.var_pi).abs() < 1e-12);
        assert!((v.iact - 1.0).abs() < 1e-12);
        assert!((s.var_lambda(&f, 0.0) - v.var_pi).abs() < 1e-12);
    }

    #[test]
    fn rayleigh_and_dirichlet_cross_checks() {
        for seed in 0..10 {
            let (k, mu) = random_reversible(6, seed);
            let s = Spectrum::new(&k, &mu).unwrap();
            let r = s.report();
            assert!((r.rayleigh_gap - r.gap).abs() < 1e-8);
            let f = s.gap_function();
            let fv: Vec<f64> = f.iter().cloned().collect();
            let e = dirichlet_form_of(&k, &mu, &fv);
            let var = s.stationary_variance(&fv);
            assert!((e / var - r.gap).abs() < 1e-8);
            // E(f) = ⟨f,(I−K)f⟩_μ
            let ikf = &f - &k * &f;
            let inner: f64 = (0..6).map(|i| mu[i] * f[i] * ikf[i]).sum();
            assert!((inner - e).abs() < 1e-10);
            assert_eq!(dirichlet_form_of(&k, &mu, &[2.0; 6]), 0.0);
        }
    }

    #[test]
    fn variance_series_and_lambda_limit() {
        let (k, mu) = random_reversible(5, 42);
        let s = Spectrum::new(&k, &mu).unwrap();
        let f = [1.0, 0.0, -1.0, 2.0, 0.5];
        let v = s.asymptotic_variance(&f);
        assert!((v.var_exact - v.spectral_formula).abs() < 1e-10);
        assert!((v.var_exact - v.series_estimate).abs() <= v.series_tail_bound + 1e-10);
        let last = s.var_lambda(&f, 0.999999);
        assert!((last - v.var_exact).abs() < 1e-4 * v.var_exact.abs().max(1.0));
        // exact tail of the autocovariance series
        let t0 = s.tail_autocovariance(&f, 0).unwrap();
        assert!((2.0 * t0 - v.var_pi - v.var_exact).abs() < 1e-10);
    }

    #[test]
    fn lambda_near_one_on_gap_point_three_chain() {
        // uniform μ, Walsh eigenvectors with eigenvalues {1, 0.7, 0.1, −0.1}
        let sign = |k: usize, i: usize| if (k & i).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
        let lam = [1.0, 0.7, 0.1, -0.1];
        let k = DMatrix::from_fn(4, 4, |i, j| (0..4).map(|m| lam[m] * sign(m, i) * sign(m, j)).sum::<f64>() / 4.0);
        let mu = DVector::from_vec(vec![0.25; 4]);
        let s = Spectrum::new(&k, &mu).unwrap();
        assert!((s.report().gap - 0.3).abs() < 1e-12);
        let f: Vec<f64> = (0..4).map(|i| sign(1, i) + 2.0 * sign(2, i) + 2.0 * sign(3, i)).collect();
        let exact = s.asymptotic_variance(&f).var_exact;
        assert!((s.var_lambda(&f, 0.99) - exact).abs() < 0.02 * exact);
        let vals: Vec<f64> = [0.9, 0.99, 0.999].iter().map(|&l| s.var_lambda(&f, l)).collect();
        assert!(vals[0] <= vals[1] && vals[1] <= vals[2] && vals[2] <= exact + 1e-12);
        // an eigenfunction at 1 − gap sits 2.7% below its limit at λ = 0.99
        let e: Vec<f64> = (0..4).map(|i| sign(1, i)).collect();
        let ratio = s.var_lambda(&e, 0.99) / s.asymptotic_variance(&e).var_exact;
        assert!((ratio - (1.693 / 0.307) / (1.7 / 0.3)).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_decomposition_of_auxiliary() {
        let m = chain5();
        let grid = WeightGrid::from_family(&WeightFamily::two_point(0.5, 0.8), 5, &GridSpec::default()).unwrap();
        let p = build_marginal_matrix(&m).unwrap();
        let pbar = JointKernelMatrix::build(&m, &grid, KernelKind::Auxiliary).unwrap();
        let ptilde = JointKernelMatrix::build(&m, &grid, KernelKind::Pseudo).unwrap();
        let w_bar = grid.max_weight();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let f: Vec<f64> = (0..pbar.len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            // f₀(x) = Σ_w π_x(w) f(x,w), f̄ = f − f₀
            let mut f0 = vec![0.0; 5];
            for (i, pt) in pbar.points().iter().enumerate() {
                f0[pt.x] += pbar.stationary[i] / m.target().prob(pt.x) * f[i];
            }
            let rest: f64 = pbar
                .points()
                .iter()
                .enumerate()
                .map(|(i, pt)| {
                    let rho = m.rejection_probability(pt.x).unwrap();
                    pbar.stationary[i] * (1.0 - rho) * (f[i] - f0[pt.x]).powi(2)
                })
                .sum();
            let lhs = dirichlet_form(&pbar, &f);
            assert!((lhs - (dirichlet_form(&p, &f0) + rest)).abs() < 1e-12);
            assert!(dirichlet_form(&ptilde, &f) >= lhs / w_bar - 1e-12);
        }
    }

    #[test]
    fn sandwich_on_chain5() {
        let m = chain5();
        let grid = WeightGrid::from_family(&WeightFamily::two_point(0.5, 0.8), 5, &GridSpec::default()).unwrap();
        let r = verify_gap_sandwich(&m, &grid).unwrap();
        assert!(r.passes(1e-8), "{:?}", r.worst());
        r.ensure(1e-8, &m, &grid).unwrap();
        let one = WeightGrid::constant_one(5);
        let r1 = verify_gap_sandwich(&m, &one).unwrap();
        assert!((r1.get("gap_pseudo").unwrap() - r1.get("gap_auxiliary").unwrap()).abs() < 1e-12);
    }

    #[test]
    fn appendix_bound_on_random_sets() {
        let m = chain5();
        let p = build_marginal_matrix(&m).unwrap();
        let gap = spectral_gap(&p).unwrap().gap;
        let rho: Vec<f64> = (0..5).map(|x| m.rejection_probability(x).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let set: Vec<usize> = (0..5).filter(|_| rng.random::<bool>()).collect();
            if let Some(b) = gap_vs_rejection_bound(&p, &rho, &set) {
                assert!(gap <= b + 1e-12);
            }
        }
    }

    #[test]
    fn variance_order_constant_and_small_delta() {
        let m = chain5();
        let g = [0.0, 1.0, 3.0, -1.0, 2.0];
        let one = WeightGrid::constant_one(5);
        let r = verify_variance_order(&m, &one, &g, 0.99).unwrap();
        assert!((r.get("var_pseudo").unwrap() - r.get("var_marginal").unwrap()).abs() < 1e-10);
        let delta = 0.05;
        let f = WeightFamily::two_point(1.0 - delta * 0.25, 0.8);
        let grid = WeightGrid::from_family(&f, 5, &GridSpec::default()).unwrap();
        let wb = grid.max_weight() - 1.0;
        let r = verify_variance_order(&m, &grid, &g, 0.99).unwrap();
        assert!(r.passes(1e-8), "{:?}", r.worst());
        let (vt, vp, vpi) = (r.get("var_pseudo").unwrap(), r.get("var_marginal").unwrap(), r.get("var_pi").unwrap());
        assert!(vt - vp <= wb * (vp + vpi) + 1e-12);
    }

    #[test]
    fn lazy_eigenvalues_shift() {
        let m = chain5();
        let grid = WeightGrid::from_family(&WeightFamily::two_point(0.5, 0.8), 5, &GridSpec::default()).unwrap();
        let base = spectral_gap(&JointKernelMatrix::build(&m, &grid, KernelKind::Pseudo).unwrap()).unwrap();
        let eps = 0.3;
        let lazy = spectral_gap(&JointKernelMatrix::build(&m, &grid, KernelKind::lazy(KernelKind::Pseudo, eps)).unwrap()).unwrap();
        for (a, b) in base.eigen_summary.iter().zip(&lazy.eigen_summary) {
            assert!((eps + (1.0 - eps) * a - b).abs() < 1e-10);
        }
        assert!(lazy.min_eigenvalue >= 2.0 * eps - 1.0 - 1e-12);
    }

    #[test]
    fn collapse_scan_bounded_family_stable() {
        let m = chain5();
        let pts = gap_collapse_scan(&m, &WeightFamily::two_point(0.5, 0.8), &GridSpec::default(), &[0.99, 0.999999]).unwrap();
        assert!((pts[0].gap - pts[1].gap).abs() < 1e-12 && pts[0].gap > 0.0);
    }
}

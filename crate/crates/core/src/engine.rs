//! Chain simulation, autocorrelation-time and variance estimators, and the
//! exact convergence-in-N experiments.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::kernels::{mean_acceptance, weight_l1_deviation, JointKernelMatrix, JointState, KernelError, KernelKind};
use crate::spectral::{lift, InequalityCheck, SpectralError, Spectrum};
use crate::target::{build_marginal_matrix, ModelSpec, State};
use crate::weights::{GridSpec, WeightError, WeightFamily, WeightGrid};

pub const MIN_TRACE: usize = 1000;
pub const MAX_LAG: usize = 10_000;
pub const BATCHES: usize = 64;
pub const DEFAULT_BURN_IN: usize = 10_000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("trace of length {0} is too short (need {MIN_TRACE})")]
    TraceTooShort(usize),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Marginal,
    Pseudo,
    Auxiliary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    Fixed { x: State, w: f64 },
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub sampler: Sampler,
    pub init: InitialState,
    /// Number of recorded states, the initial one included.
    pub n: usize,
    pub seed: u64,
    /// Discarded steps before recording; defaults to 0 from the stationary
    /// law and [`DEFAULT_BURN_IN`] otherwise.
    pub burn_in: Option<usize>,
}

impl ChainConfig {
    pub fn new(sampler: Sampler, init: InitialState, n: usize, seed: u64) -> Self {
        ChainConfig {
            sampler,
            init,
            n,
            seed,
            burn_in: None,
        }
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(match self.init {
            InitialState::Stationary => 0,
            InitialState::Fixed { .. } => DEFAULT_BURN_IN,
        })
    }
}

/// Columnar trajectory `(x_k, w_k, accepted_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub seed: u64,
    pub model_id: String,
    pub family_id: String,
    pub xs: Vec<u32>,
    pub ws: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn state(&self, k: usize) -> JointState {
        JointState {
            x: self.xs[k] as State,
            w: self.ws[k],
        }
    }

    pub fn values(&self, g: &[f64]) -> Vec<f64> {
        self.xs.iter().map(|&x| g[x as usize]).collect()
    }

    pub fn acceptance_rate(&self) -> EstimatorOutput {
        let n = (self.len() - 1).max(1) as f64;
        let a = self.accepted.iter().skip(1).filter(|b| **b).count() as f64 / n;
        EstimatorOutput {
            point: a,
            std_error: (a * (1.0 - a) / n).sqrt(),
            method: EstimatorMethod::Proportion,
            n_effective: n,
        }
    }

    /// Little-endian records `u64 step, u32 x, f64 w, u8 accepted`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(21 * self.len());
        for k in 0..self.len() {
            buf.extend_from_slice(&(k as u64).to_le_bytes());
            buf.extend_from_slice(&self.xs[k].to_le_bytes());
            buf.extend_from_slice(&self.ws[k].to_le_bytes());
            buf.push(u8::from(self.accepted[k]));
        }
        out.write_all(&buf)
    }

    pub fn read_binary<R: Read>(mut input: R, seed: u64) -> std::io::Result<ChainTrace> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() % 21 != 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "truncated record"));
        }
        let mut trace = ChainTrace {
            seed,
            model_id: String::new(),
            family_id: String::new(),
            xs: Vec::new(),
            ws: Vec::new(),
            accepted: Vec::new(),
        };
        for rec in bytes.chunks_exact(21) {
            trace.xs.push(u32::from_le_bytes(rec[8..12].try_into().unwrap()));
            trace.ws.push(f64::from_le_bytes(rec[12..20].try_into().unwrap()));
            trace.accepted.push(rec[20] != 0);
        }
        Ok(trace)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "x", "w", "accepted"])?;
        for k in 0..self.len() {
            w.serialize((k, self.xs[k], self.ws[k], u8::from(self.accepted[k])))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn draw_stationary<R: Rng + ?Sized>(model: &ModelSpec, family: &WeightFamily, sampler: Sampler, rng: &mut R) -> JointState {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let probs = model.target().probs();
    let mut x = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            x = i;
            break;
        }
    }
    let w = match sampler {
        Sampler::Marginal => 1.0,
        _ => family.sample_tilted(x, rng),
    };
    JointState { x, w }
}

/// Deterministic given `cfg.seed`.
pub fn run_chain(model: &ModelSpec, family: &WeightFamily, cfg: &ChainConfig) -> ChainTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = match cfg.init {
        InitialState::Fixed { x, w } => JointState { x, w },
        InitialState::Stationary => draw_stationary(model, family, cfg.sampler, &mut rng),
    };
    let step = |s: JointState, rng: &mut ChaCha8Rng| -> (JointState, bool) {
        match cfg.sampler {
            Sampler::Marginal => {
                let (x, a) = crate::kernels::marginal_step(model, s.x, rng);
                (JointState { x, w: 1.0 }, a)
            }
            Sampler::Pseudo => crate::kernels::pseudo_step(model, family, s, rng),
            Sampler::Auxiliary => crate::kernels::auxiliary_step(model, family, s, rng),
        }
    };
    for _ in 0..cfg.burn_in() {
        state = step(state, &mut rng).0;
    }
    let n = cfg.n.max(1);
    let mut trace = ChainTrace {
        seed: cfg.seed,
        model_id: String::new(),
        family_id: String::new(),
        xs: Vec::with_capacity(n),
        ws: Vec::with_capacity(n),
        accepted: Vec::with_capacity(n),
    };
    trace.xs.push(state.x as u32);
    trace.ws.push(state.w);
    trace.accepted.push(false);
    for _ in 1..n {
        let (next, a) = step(state, &mut rng);
        state = next;
        trace.xs.push(state.x as u32);
        trace.ws.push(state.w);
        trace.accepted.push(a);
    }
    trace
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMethod {
    BatchMeans,
    InitialMonotoneSequence,
    Proportion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutput {
    pub point: f64,
    pub std_error: f64,
    pub method: EstimatorMethod,
    pub n_effective: f64,
}

fn centered(xs: &[f64]) -> (Vec<f64>, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| x - mean).collect(), mean)
}

fn autocov(c: &[f64], lag: usize) -> f64 {
    let n = c.len();
    c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64
}

/// Empirical autocovariances `γ₀ … γ_max_lag`.
pub fn autocovariances(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let (c, _) = centered(xs);
    (0..=max_lag.min(xs.len() - 1)).map(|k| autocov(&c, k)).collect()
}

/// Integrated autocorrelation time by the initial monotone sequence over
/// pair sums `Γ_k = γ_{2k} + γ_{2k+1}`; floored at 0.
pub fn estimate_iact_series(xs: &[f64]) -> Result<EstimatorOutput, EngineError> {
    let n = xs.len();
    if n < MIN_TRACE {
        return Err(EngineError::TraceTooShort(n));
    }
    let (c, _) = centered(xs);
    let max_lag = (n / 50).min(MAX_LAG);
    let g0 = autocov(&c, 0);
    if g0 <= 0.0 {
        return Ok(EstimatorOutput {
            point: 0.0,
            std_error: 0.0,
            method: EstimatorMethod::InitialMonotoneSequence,
            n_effective: n as f64,
        });
    }
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    let mut cutoff = 1;
    while 2 * k < max_lag {
        let mut pair = autocov(&c, 2 * k) + autocov(&c, 2 * k + 1);
        if k > 0 && pair <= 0.0 {
            break;
        }
        if pair > prev {
            pair = prev;
        }
        sum += pair;
        prev = pair;
        cutoff = 2 * k + 1;
        k += 1;
    }
    let tau = (2.0 * sum / g0 - 1.0).max(0.0);
    Ok(EstimatorOutput {
        point: tau,
        std_error: tau * (2.0 * (2 * cutoff + 1) as f64 / n as f64).sqrt(),
        method: EstimatorMethod::InitialMonotoneSequence,
        n_effective: if tau > 0.0 { (n as f64 / tau).min(n as f64) } else { n as f64 },
    })
}

pub fn estimate_iact(trace: &ChainTrace, g: &[f64]) -> Result<EstimatorOutput, EngineError> {
    estimate_iact_series(&trace.values(g))
}

/// Batch-means estimate of the asymptotic variance.
pub fn batch_means(xs: &[f64], batches: usize) -> Result<EstimatorOutput, EngineError> {
    let n = xs.len();
    if n < MIN_TRACE.max(2 * batches) {
        return Err(EngineError::TraceTooShort(n));
    }
    let b = n / batches;
    let used = b * batches;
    let mean = xs[..used].iter().sum::<f64>() / used as f64;
    let means: Vec<f64> = xs[..used].chunks(b).map(|c| c.iter().sum::<f64>() / b as f64).collect();
    let var_means = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    let var = b as f64 * var_means;
    let var_pi = xs[..used].iter().map(|x| (x - mean).powi(2)).sum::<f64>() / used as f64;
    Ok(EstimatorOutput {
        point: var,
        std_error: var * (2.0 / (batches - 1) as f64).sqrt(),
        method: EstimatorMethod::BatchMeans,
        n_effective: if var > 0.0 { (used as f64 * var_pi / var).min(used as f64) } else { used as f64 },
    })
}

/// Asymptotic-variance estimate `τ̂·var̂_π(g)`.
pub fn estimate_asymptotic_variance(trace: &ChainTrace, g: &[f64]) -> Result<EstimatorOutput, EngineError> {
    let xs = trace.values(g);
    let tau = estimate_iact_series(&xs)?;
    let (c, _) = centered(&xs);
    let var_pi = autocov(&c, 0);
    Ok(EstimatorOutput {
        point: tau.point * var_pi,
        std_error: tau.std_error * var_pi,
        ..tau
    })
}

/// Pearson goodness-of-fit of the x-occupancy of every `thin`-th state.
pub fn occupancy_test(trace: &ChainTrace, probs: &[f64], thin: usize) -> (f64, f64) {
    let mut counts = vec![0.0; probs.len()];
    let mut total = 0.0;
    for x in trace.xs.iter().step_by(thin.max(1)) {
        counts[*x as usize] += 1.0;
        total += 1.0;
    }
    let mut stat = 0.0;
    let mut df = 0usize;
    for (c, p) in counts.iter().zip(probs) {
        if *p > 0.0 {
            stat += (c - total * p).powi(2) / (total * p);
            df += 1;
        }
    }
    let df = (df.max(2) - 1) as f64;
    (stat, 1.0 - ChiSquared::new(df).unwrap().cdf(stat))
}

/// Two-sample homogeneity test between the x-occupancies of two traces.
pub fn two_sample_occupancy_test(a: &ChainTrace, b: &ChainTrace, n_states: usize, thin: usize) -> (f64, f64) {
    let count = |t: &ChainTrace| {
        let mut c = vec![0.0; n_states];
        for x in t.xs.iter().step_by(thin.max(1)) {
            c[*x as usize] += 1.0;
        }
        c
    };
    let (ca, cb) = (count(a), count(b));
    let (na, nb): (f64, f64) = (ca.iter().sum(), cb.iter().sum());
    let mut stat = 0.0;
    let mut df = 0usize;
    for i in 0..n_states {
        let tot = ca[i] + cb[i];
        if tot == 0.0 {
            continue;
        }
        df += 1;
        let ea = tot * na / (na + nb);
        let eb = tot * nb / (na + nb);
        stat += (ca[i] - ea).powi(2) / ea + (cb[i] - eb).powi(2) / eb;
    }
    let df = (df.max(2) - 1) as f64;
    (stat, 1.0 - ChiSquared::new(df).unwrap().cdf(stat))
}

/// Empirical `|Σ_{k≥n} γ_k|` up to the estimator's maximal lag.
pub fn tail_autocov_estimate(trace: &ChainTrace, g: &[f64], n: usize) -> f64 {
    let xs = trace.values(g);
    let max_lag = (xs.len() / 50).min(MAX_LAG);
    let (c, _) = centered(&xs);
    (n..=max_lag).map(|k| autocov(&c, k)).sum::<f64>().abs()
}

fn pseudo_for(model: &ModelSpec, family: &WeightFamily, spec: &GridSpec) -> Result<(WeightGrid, JointKernelMatrix), EngineError> {
    let grid = WeightGrid::from_family(family, model.len(), spec)?;
    let k = JointKernelMatrix::build(model, &grid, KernelKind::Pseudo)?;
    Ok((grid, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub cutoff: u32,
    /// `(N, |Σ_{k≥n} γ_k|)` per averaging level.
    pub tails: Vec<(usize, f64)>,
    pub sup: f64,
    /// Number of averaging levels covered; never a claim about all N.
    pub n_range: (usize, usize),
}

/// Exact tails `⟨ḡ, P̃_N^n(I−P̃_N)⁻¹ḡ⟩` for every `N`.
pub fn tail_autocorr_sup(
    model: &ModelSpec,
    base: &WeightFamily,
    ns: &[usize],
    g: &[f64],
    cutoff: u32,
    spec: &GridSpec,
) -> Result<TailReport, EngineError> {
    let mut tails = Vec::new();
    for &n in ns {
        let (_, k) = pseudo_for(model, &base.clone().averaged(n), spec)?;
        let s = Spectrum::of(&k)?;
        tails.push((n, s.tail_autocovariance(&lift(&k, g), cutoff)?.abs()));
    }
    let sup = tails.iter().map(|t| t.1).fold(0.0, f64::max);
    Ok(TailReport {
        cutoff,
        sup,
        n_range: (*ns.iter().min().unwrap_or(&0), *ns.iter().max().unwrap_or(&0)),
        tails,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub var_pseudo: f64,
    pub var_marginal: f64,
    pub gap: f64,
    /// `∫|w−1| π(dx) Q^N_x(dw)`.
    pub weight_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub checks: Vec<InequalityCheck>,
}

impl ConvergenceTable {
    pub fn min_slack(&self) -> f64 {
        self.checks.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min)
    }

    /// CSV with header `N,var_pseudo,var_marginal,gap`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["N", "var_pseudo", "var_marginal", "gap"])?;
        for r in &self.rows {
            w.serialize((r.n, r.var_pseudo, r.var_marginal, r.gap))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact `var(g, P̃_N)` across an N-list against `var(g, P)`.
pub fn variance_convergence_experiment(
    model: &ModelSpec,
    base: &WeightFamily,
    ns: &[usize],
    g: &[f64],
    spec: &GridSpec,
) -> Result<ConvergenceTable, EngineError> {
    let p = build_marginal_matrix(model)?;
    let var_marginal = Spectrum::of(&p)?.asymptotic_variance(g).var_exact;
    let mut rows = Vec::new();
    for &n in ns {
        let (grid, k) = pseudo_for(model, &base.clone().averaged(n), spec)?;
        let s = Spectrum::of(&k)?;
        rows.push(ConvergenceRow {
            n,
            var_pseudo: s.asymptotic_variance(&lift(&k, g)).var_exact,
            var_marginal,
            gap: s.report().gap,
            weight_l1: weight_l1_deviation(model, &grid),
        });
    }
    let mut checks = Vec::new();
    for r in &rows {
        checks.push(InequalityCheck::le(&format!("var_order_N{}", r.n), r.var_marginal, r.var_pseudo));
    }
    for pair in rows.windows(2) {
        let d0 = pair[0].var_pseudo - pair[0].var_marginal;
        let d1 = pair[1].var_pseudo - pair[1].var_marginal;
        checks.push(InequalityCheck::le(&format!("diff_decreasing_N{}", pair[1].n), d1, d0));
    }
    Ok(ConvergenceTable { rows, checks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub core_sup: f64,
    pub core_mass: f64,
    pub max_bound_violation: f64,
}

/// Row-wise total variation `sup_A |P̃_N(s,A) − P̄_N(s,A)|` over a core set of
/// stationary mass `1 − ε` made of the rows with smallest distance, and the
/// largest excess over `2|1−1/w| + 4∫q Q^N|1−u|` across all rows.
pub fn tv_distance_scan(
    model: &ModelSpec,
    base: &WeightFamily,
    ns: &[usize],
    epsilon: f64,
    spec: &GridSpec,
) -> Result<Vec<TvRow>, EngineError> {
    let mut out = Vec::new();
    for &n in ns {
        let grid = WeightGrid::from_family(&base.clone().averaged(n), model.len(), spec)?;
        let pt = JointKernelMatrix::build(model, &grid, KernelKind::Pseudo)?;
        let pb = JointKernelMatrix::build(model, &grid, KernelKind::Auxiliary)?;
        let mut rows: Vec<(f64, f64)> = Vec::with_capacity(pt.len());
        let mut worst = f64::NEG_INFINITY;
        for (i, p) in pt.points().iter().enumerate() {
            let l1: f64 = (0..pt.len()).map(|j| (pt.matrix[(i, j)] - pb.matrix[(i, j)]).abs()).sum();
            let tv = 0.5 * l1;
            let dev: f64 = model
                .proposal_row(p.x)
                .iter()
                .map(|&(y, q)| q * grid.mean_abs_deviation(y))
                .sum();
            let bound = 2.0 * (1.0 - 1.0 / p.w).abs() + 4.0 * dev;
            worst = worst.max(tv - bound);
            rows.push((tv, pt.stationary[i]));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut mass = 0.0;
        let mut sup = 0.0;
        for (tv, m) in rows {
            if mass >= 1.0 - epsilon {
                break;
            }
            mass += m;
            sup = tv;
        }
        out.push(TvRow {
            n,
            core_sup: sup,
            core_mass: mass,
            max_bound_violation: worst,
        });
    }
    Ok(out)
}

/// Exact acceptance rate usable as a Monte Carlo reference.
pub fn exact_acceptance(model: &ModelSpec, family: &WeightFamily, sampler: Sampler, spec: &GridSpec) -> Result<f64, EngineError> {
    let grid = WeightGrid::from_family(family, model.len(), spec)?;
    let kind = match sampler {
        Sampler::Marginal => KernelKind::Marginal,
        Sampler::Pseudo => KernelKind::Pseudo,
        Sampler::Auxiliary => KernelKind::Auxiliary,
    };
    Ok(mean_acceptance(model, &grid, &kind))
}

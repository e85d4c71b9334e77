//! Simulation estimators against exact spectral quantities on long runs.

use pmlab_core::engine::{estimate_asymptotic_variance, estimate_iact, run_chain};
use pmlab_core::target::build_marginal_matrix;
use pmlab_core::{
    ChainConfig, InitialState, ModelSpec, ProposalKernel, Sampler, Spectrum, StateSpace, TargetDistribution, WeightFamily,
};

fn four_state() -> ModelSpec {
    let t = TargetDistribution::from_masses(StateSpace::finite(4).unwrap(), &[1.0, 3.0, 2.0, 1.5]).unwrap();
    let q = vec![
        vec![0.2, 0.5, 0.2, 0.1],
        vec![0.5, 0.1, 0.3, 0.1],
        vec![0.2, 0.3, 0.1, 0.4],
        vec![0.1, 0.1, 0.4, 0.4],
    ];
    ModelSpec::new(t, ProposalKernel::Explicit { matrix: q }).unwrap()
}

#[test]
fn iact_within_five_percent_at_ten_million() {
    let m = four_state();
    let s = Spectrum::of(&build_marginal_matrix(&m).unwrap()).unwrap();
    assert!(s.report().gap >= 0.1);
    let g = [1.0, -1.0, 2.0, 0.5];
    let exact = s.asymptotic_variance(&g);
    let tr = run_chain(&m, &WeightFamily::ConstantOne, &ChainConfig::new(Sampler::Marginal, InitialState::Stationary, 10_000_000, 5));
    let tau = estimate_iact(&tr, &g).unwrap().point;
    assert!((tau - exact.iact).abs() <= 0.05 * exact.iact, "{tau} vs {}", exact.iact);
    let bm = estimate_asymptotic_variance(&tr, &g).unwrap().point;
    assert!((bm - exact.var_exact).abs() <= 0.05 * exact.var_exact, "{bm} vs {}", exact.var_exact);
}

#[test]
fn pseudo_acceptance_matches_exact_rate() {
    let m = four_state();
    let fam = WeightFamily::two_point(0.5, 0.8);
    let exact = pmlab_core::engine::exact_acceptance(&m, &fam, Sampler::Pseudo, &Default::default()).unwrap();
    let tr = run_chain(&m, &fam, &ChainConfig::new(Sampler::Pseudo, InitialState::Stationary, 1_000_001, 9));
    let a = tr.acceptance_rate();
    // successive indicators are correlated; inflate the binomial error by the IACT bound
    assert!((a.point - exact).abs() <= 4.0 * 3.0 * a.std_error, "{} vs {exact}", a.point);
}

//! Fixtures shared by the benchmarks.

use pmlab_core::{GridSpec, ModelSpec, ProposalKernel, StateSpace, TargetDistribution, WeightFamily, WeightGrid};

/// Nearest-neighbour chain on `n` states with a tilted target.
pub fn chain(n: usize) -> ModelSpec {
    let masses: Vec<f64> = (0..n).map(|i| 1.0 + (i % 5) as f64).collect();
    let t = TargetDistribution::from_masses(StateSpace::finite(n).expect("n ≥ 2"), &masses).expect("positive masses");
    ModelSpec::new(t, ProposalKernel::nearest_neighbour()).expect("valid model")
}

/// Lognormal weights projected onto `nodes` grid points.
pub fn lognormal_grid(model: &ModelSpec, sigma: f64, nodes: usize) -> WeightGrid {
    WeightGrid::from_family(&WeightFamily::lognormal(sigma), model.len(), &GridSpec::default().with_nodes(nodes))
        .expect("grid projection")
}

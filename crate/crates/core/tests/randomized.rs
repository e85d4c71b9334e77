//! The randomized ordering suite at its documented settings.

use pmlab_core::suite::{random_instance, randomized_suite, Instance, SuiteConfig, SuiteFamilies};

#[test]
fn hundred_instances_all_orderings_hold() {
    let r = randomized_suite(&SuiteConfig::new(100, 1)).unwrap();
    assert!(r.pass);
    for c in &r.checks {
        assert!(c.min_slack >= -c.tolerance, "{c:?}");
        assert!(c.evaluated > 0);
    }
    assert_eq!(r.check("alpha_diff_bound").unwrap().evaluated, 100);
}

#[test]
fn fixed_seed_gives_identical_report() {
    let a = serde_json::to_string(&randomized_suite(&SuiteConfig::new(30, 99)).unwrap()).unwrap();
    let b = serde_json::to_string(&randomized_suite(&SuiteConfig::new(30, 99)).unwrap()).unwrap();
    let c = serde_json::to_string(&randomized_suite(&SuiteConfig::new(30, 100)).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn single_constant_one_instance_is_tight() {
    let mut cfg = SuiteConfig::new(1, 4);
    cfg.families = SuiteFamilies::ConstantOne;
    let r = randomized_suite(&cfg).unwrap();
    let v = r.check("var_pseudo_ge_marginal").unwrap();
    assert!(v.max_abs_slack < 1e-10, "{v:?}");
}

#[test]
fn size_bounds_are_respected() {
    let cfg = SuiteConfig::new(1, 0);
    for s in 0..50 {
        let inst: Instance = random_instance(&cfg, 0, s).unwrap();
        assert!(inst.model.len() <= 8 && inst.model.len() >= 2);
        let grid = pmlab_core::WeightGrid::from_family(&inst.family, inst.model.len(), &Default::default()).unwrap();
        for x in 0..inst.model.len() {
            assert!(grid.q_row(x).len() <= 4);
            assert!((grid.mean(x) - 1.0).abs() < 1e-12);
        }
    }
}

mod support;

use proptest::prelude::*;
use roboiaas::coalition::{form_coalition, CoalitionParams};
use support::cover_oracle::{brute_force, check, instances, random_instance};

#[test]
fn exact_matches_brute_force_on_two_hundred_instances() {
    let params = CoalitionParams::default();
    let r = check(&instances(2016, 200, 15), &params);
    assert!(r.passed(), "{r:?}");
    assert!(r.satisfiable >= 100, "too few satisfiable instances: {r:?}");
}

#[test]
fn remote_penalty_shifts_but_never_breaks_optimality() {
    let params = CoalitionParams {
        remote_penalty: 4.0,
        ..CoalitionParams::default()
    };
    let r = check(&instances(7, 100, 12), &params);
    assert!(r.passed(), "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn returned_coalition_is_the_minimum(seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, 10);
        let params = CoalitionParams::default();
        let got = form_coalition(&inst.candidates, &inst.required, inst.site, &params);
        match brute_force(&inst, &params) {
            None => prop_assert!(got.is_err()),
            Some((cost, _)) => {
                let c = got.unwrap();
                prop_assert!((c.cost - cost).abs() <= roboiaas::coalition::COST_EPS);
                prop_assert!(c.pattern.capabilities.is_superset(&inst.required));
            }
        }
    }
}

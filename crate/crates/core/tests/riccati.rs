mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{max_deviation, random_lti, riccati_solution};
use zipmpc::solver::solve;

#[test]
fn matches_riccati_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..30 {
        let (n, m, horizon) = (rng.gen_range(1..=6), rng.gen_range(1..=2), rng.gen_range(1..=25));
        let (prob, x0) = random_lti(&mut rng, n, m, horizon);
        let rec = solve(&prob, &x0, None).unwrap();
        assert!(rec.converged);
        let (xs, us) = riccati_solution(&prob.system.a, &prob.system.b, &prob.cost, &x0);
        assert!(max_deviation(&rec.states, &xs) < 1e-8);
        assert!(max_deviation(&rec.inputs, &us) < 1e-8);
    }
}

#[test]
fn warm_start_from_optimum_stops_quickly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (prob, x0) = random_lti(&mut rng, 4, 2, 12);
    let rec = solve(&prob, &x0, None).unwrap();
    let again = solve(&prob, &x0, Some(&rec.inputs)).unwrap();
    assert!(again.iterations <= 2);
    assert!((again.objective - rec.objective).abs() < 1e-9);
}

#[test]
fn zero_horizon_is_a_single_stage() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (prob, x0) = random_lti(&mut rng, 3, 1, 0);
    let rec = solve(&prob, &x0, None).unwrap();
    assert_eq!(rec.inputs.len(), 1);
    assert_eq!(rec.states.len(), 2);
    // with nothing downstream the input minimizes q u^2 + p u alone
    let m = &prob.cost;
    let u = -m.p[0][3] / (2.0 * m.q[0][3]);
    assert!((rec.inputs[0][0] - u).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objective_never_below_riccati_optimum(seed in 0u64..10_000, n in 1usize..=4, m in 1usize..=2, horizon in 1usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (prob, x0) = random_lti(&mut rng, n, m, horizon);
        let (xs, us) = riccati_solution(&prob.system.a, &prob.system.b, &prob.cost, &x0);
        let rec = solve(&prob, &x0, None).unwrap();
        let optimum = prob.objective(&xs, &us);
        prop_assert!(rec.objective >= optimum - 1e-9 * (1.0 + optimum.abs()));
        prop_assert!((rec.objective - optimum).abs() <= 1e-8 * (1.0 + optimum.abs()));
        // any perturbation of the optimal inputs costs more
        let mut worse = us.clone();
        worse[0] += DVector::from_element(m, 1e-3);
        let xs_w = prob.rollout(&x0, &worse).unwrap();
        prop_assert!(prob.objective(&xs_w, &worse) > optimum);
    }
}

use mfviflow::gradcheck::{
    check_flow_layers, check_mle_objective, check_ops, check_vi_objective, numerical_gradient, relative_error,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

#[test]
fn fd_helper_on_quadratic() {
    let g = numerical_gradient(|x| x[0] * x[0] + 3.0 * x[0] * x[1], &[1.0, 2.0], 1e-6);
    assert!(relative_error(&g, &[8.0, 3.0]) < 1e-9);
    assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
}

#[test]
fn every_graph_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for r in check_ops(&mut rng, 100).unwrap() {
        assert!(r.max_rel_error < TOL, "{}: {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn flow_layers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for r in check_flow_layers(&mut rng, 100).unwrap() {
        assert!(r.max_rel_error < TOL, "{}: {:e}", r.name, r.max_rel_error);
    }
}

#[test]
fn objectives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rs = [
        check_mle_objective(&mut rng, 100).unwrap(),
        check_vi_objective(&mut rng, 100, true).unwrap(),
        check_vi_objective(&mut rng, 100, false).unwrap(),
    ];
    for r in rs {
        assert!(r.max_rel_error < TOL, "{}: {:e}", r.name, r.max_rel_error);
    }
}

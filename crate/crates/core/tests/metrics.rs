mod common;

use std::f64::consts::PI;

use common::rng;
use mfviflow::flows::{ConditionalArch, ConditionalSampler};
use mfviflow::metrics::{density_grid, moment_report, moment_report_batched, GridSpec, MomentReport};
use mfviflow::problem::standard_normal;

#[test]
fn identity_flow_density_is_standard_normal() {
    let t = ConditionalSampler::fresh(ConditionalArch::default(), &mut rng(0)).unwrap();
    let origin = mfviflow::diff::Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
    assert!((t.log_density(&[0.1, 0.2], &origin).unwrap()[0] + (2.0 * PI).ln()).abs() < 1e-15);
    let grid = density_grid(GridSpec::square(-8.0, 8.0, 400), |x| t.log_density(&[0.0, 0.0], x)).unwrap();
    assert!((grid.integral() - 1.0).abs() < 0.01);
    let m = grid.moments();
    assert!(m.mean.iter().all(|v| v.abs() < 1e-12));
    assert!((m.cov[0] - 1.0).abs() < 1e-6 && m.cov[1].abs() < 1e-12);
}

#[test]
fn sample_moments_converge_with_honest_errors() {
    // Correlated Gaussian x = L z with cov [[1, 0.5], [0.5, 2]].
    let l = [[1.0, 0.0], [0.5, (2.0f64 - 0.25).sqrt()]];
    let truth = MomentReport::exact(vec![0.0, 0.0], vec![1.0, 0.5, 0.5, 2.0]);
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let z = standard_normal(&mut rng(seed), 20_000, 2);
        let data: Vec<f64> = z
            .rows()
            .flat_map(|r| [l[0][0] * r[0], l[1][0] * r[0] + l[1][1] * r[1]])
            .collect();
        let x = mfviflow::diff::Tensor::matrix(20_000, 2, data).unwrap();
        let m = moment_report(&x).unwrap();
        worst = worst.max(m.max_z_score(&truth));
        let b = moment_report_batched(&x, 50).unwrap();
        assert_eq!(b.mean, m.mean);
        for (se_b, se) in b.mean_se.iter().zip(&m.mean_se) {
            assert!((se_b / se - 1.0).abs() < 0.5);
        }
    }
    assert!(worst < 4.5, "{worst}");
}

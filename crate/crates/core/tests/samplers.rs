mod common;

use common::rng;
use mfviflow::diff::Tensor;
use mfviflow::flows::{ConditionalArch, ConditionalFlow};
use mfviflow::metrics::{grid_posterior_moments, moment_report_batched, GridSpec};
use mfviflow::problem::ToyPosterior;
use mfviflow::samplers::{flow_samples, sgld, SgldConfig};

#[test]
fn sgld_recovers_standard_normal_for_ten_seeds() {
    let cfg = SgldConfig::default();
    assert_eq!(cfg.retained(), 100_000);
    for seed in 0..10 {
        let chain = sgld(|x| vec![-x[0], -x[1]], &[0.0, 0.0], &cfg, &mut rng(seed)).unwrap();
        assert_eq!(chain.len(), 100_000);
        let s = chain.samples();
        assert!(s.all_finite());
        for k in 0..2 {
            let col: Vec<f64> = s.rows().map(|r| r[k]).collect();
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            assert!(mean.abs() < 0.02, "seed {seed} coord {k}: mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "seed {seed} coord {k}: var {var}");
        }
    }
}

#[test]
fn sgld_posterior_chain_matches_grid_quadrature() {
    let post = ToyPosterior {
        a: [[0.9, 0.25], [-0.3, 0.8]],
        y: [0.6, 0.2],
        sigma: 0.4,
    };
    let cfg = SgldConfig {
        n_steps: 2_050_000,
        step_a: 2e-3 * 1e7f64.powf(0.55),
        step_b: 1e7,
        step_gamma: 0.55,
        burn_in: 50_000,
        stride: 20,
        inject_noise: true,
    };
    let chain = sgld(|x| post.grad(x).to_vec(), &[0.0, 0.0], &cfg, &mut rng(3)).unwrap();
    let m = moment_report_batched(chain.samples(), 50).unwrap();
    let grid = grid_posterior_moments(GridSpec::posterior_default(), |x| post.log_density(x)).unwrap();
    let z = m.max_z_score(&grid);
    assert!(z < 3.0, "z {z}: chain {:?} grid {:?}", m.mean, grid.mean);
}

#[test]
fn flow_samples_map_back_to_their_latents() {
    let mut r = rng(4);
    let arch = ConditionalArch {
        blocks: 3,
        hidden: 8,
        ..Default::default()
    };
    let mut f = ConditionalFlow::new(arch, &mut r).unwrap();
    f.data_lane_mut().randomize(0.2, &mut r);
    f.model_lane_mut().randomize(0.2, &mut r);
    let (t, _) = f.init_from_pretrained();
    let y = [0.3, -1.2];
    let x = flow_samples(&t, &y, 500, &mut rng(5)).unwrap();
    let z = mfviflow::problem::standard_normal(&mut rng(5), 500, 2);
    let (_, zx, _) = f.forward(&Tensor::repeat_row(&y, 500), &x).unwrap();
    assert!(zx.max_abs_diff(&z) < 1e-9);
    assert_eq!(x, flow_samples(&t, &y, 500, &mut rng(5)).unwrap());
}

#[test]
fn chains_are_reproducible() {
    let cfg = SgldConfig {
        n_steps: 20_000,
        burn_in: 1_000,
        stride: 3,
        ..SgldConfig::default()
    };
    let run = |s| sgld(|x| vec![-x[0], -2.0 * x[1]], &[1.0, 1.0], &cfg, &mut rng(s)).unwrap();
    assert_eq!(run(6).to_csv(), run(6).to_csv());
    assert_ne!(run(6).to_csv(), run(7).to_csv());
    assert_eq!(run(6).len(), cfg.retained());
}

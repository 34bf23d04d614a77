mod common;

use std::f64::consts::PI;

use common::{diagonal_affine, rng};
use mfviflow::diff::Tensor;
use mfviflow::flows::{ConditionalArch, ConditionalFlow, ConditionalSampler};
use mfviflow::metrics::kl_proxy;
use mfviflow::objectives::{
    mle_loss, train_mle, train_vi, vi_integrand, vi_loss, vi_loss_and_grad, NoiseModel, PriorDensity, TrainConfig,
    ViProblem,
};
use mfviflow::problem::{generate_pairs, standard_normal, ForwardOperator};

fn small() -> ConditionalArch {
    ConditionalArch {
        blocks: 2,
        hidden: 8,
        ..Default::default()
    }
}

fn log_normal_1d(v: f64, m: f64, sd: f64) -> f64 {
    -0.5 * ((v - m) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * PI).ln()
}

#[test]
fn gaussian_identity_for_vi_loss() {
    // E[|z|^2 / 2] + E[-log N(z)] with z ~ N(0, I_2).
    let expected = 1.0 + (1.0 + (2.0 * PI).ln());
    let op = ForwardOperator::identity(2, 1.0).unwrap();
    let t = ConditionalSampler::fresh(small(), &mut rng(0)).unwrap();
    let prior = PriorDensity::StandardNormal;
    let at = |y: &[f64]| {
        let p = ViProblem {
            operator: &op,
            y,
            prior: &prior,
            noise: NoiseModel::new(1.0).unwrap(),
        };
        kl_proxy(&t, &p, 1_000_000, &mut rng(1)).unwrap()
    };
    let base = at(&[0.0, 0.0]);
    assert!((base - expected).abs() < 0.01, "{base} vs {expected}");
    let shifted = at(&[1.0, 0.0]);
    assert!((shifted - base - 0.5).abs() < 0.01, "{}", shifted - base);
}

#[test]
fn constant_prior_offset_shifts_loss_and_keeps_gradients() {
    let mut r = rng(2);
    let mut f = ConditionalFlow::new(small(), &mut r).unwrap();
    f.data_lane_mut().randomize(0.3, &mut r);
    f.model_lane_mut().randomize(0.3, &mut r);
    let (t, frozen) = f.init_from_pretrained();
    let op = ForwardOperator::from_matrix(&[[0.8, 0.3], [-0.2, 0.9]], 0.4).unwrap();
    let y = [0.5, 0.1];
    let z = standard_normal(&mut r, 16, 2);
    for base in [PriorDensity::Rosenbrock, PriorDensity::conditional(frozen, &y)] {
        let k = 3.25;
        let shifted = PriorDensity::Shifted(Box::new(base.clone()), k);
        let problem = |p| ViProblem {
            operator: &op,
            y: &y,
            prior: p,
            noise: NoiseModel::new(0.4).unwrap(),
        };
        let (a, ga) = vi_loss_and_grad(&t, &problem(&base), &z).unwrap();
        let (b, gb) = vi_loss_and_grad(&t, &problem(&shifted), &z).unwrap();
        assert!((a - k - b).abs() < 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
    }
}

#[test]
fn mle_loss_is_negative_log_likelihood_minus_constant() {
    // For a flow with closed-form density, mle_loss + (d/2) log 2 pi = -log p(y, x).
    let mut f = ConditionalFlow::new(small(), &mut rng(3)).unwrap();
    let (my, sy) = ([0.2, -0.4], [1.5, 0.7]);
    let (mx, sx) = ([-1.0, 0.3], [0.5, 2.0]);
    diagonal_affine(f.data_lane_mut(), my, sy);
    diagonal_affine(f.model_lane_mut(), mx, sx);
    let y = Tensor::matrix(3, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, -0.3]).unwrap();
    let x = Tensor::matrix(3, 2, vec![0.7, -0.1, 0.0, 0.0, -2.0, 1.5]).unwrap();
    let nll: f64 = y
        .rows()
        .zip(x.rows())
        .map(|(yr, xr)| {
            -(0..2)
                .map(|i| log_normal_1d(yr[i], my[i], sy[i]) + log_normal_1d(xr[i], mx[i], sx[i]))
                .sum::<f64>()
        })
        .sum::<f64>()
        / 3.0;
    let loss = mle_loss(&f, &y, &x).unwrap();
    assert!((loss + 2.0 * (2.0 * PI).ln() - nll).abs() < 1e-12, "{loss} {nll}");

    let fresh = ConditionalFlow::new(small(), &mut rng(4)).unwrap();
    let expected = (0..3).map(|i| 0.5 * (y.row(i).iter().chain(x.row(i)).map(|v| v * v).sum::<f64>())).sum::<f64>() / 3.0;
    assert!((mle_loss(&fresh, &y, &x).unwrap() - expected).abs() < 1e-15);
}

fn linear_gaussian_problem() -> (ForwardOperator, [f64; 2], f64) {
    (ForwardOperator::identity(2, 0.4).unwrap(), [0.9, -0.5], 0.4)
}

#[test]
fn exact_posterior_sampler_has_constant_integrand_and_minimal_proxy() {
    // y = x + e, x ~ N(0, I), e ~ N(0, s^2 I): posterior N(y / (1 + s^2), s^2 / (1 + s^2) I).
    // With q equal to the posterior, integrand(z) + log N(z) = -log Z for every
    // z, so the mean integrand is -log Z + d (1 + log 2 pi) / 2.
    let (op, y, s) = linear_gaussian_problem();
    let s2 = s * s;
    let sd = (s2 / (1.0 + s2)).sqrt();
    let mean = [y[0] / (1.0 + s2), y[1] / (1.0 + s2)];
    let log_z: f64 = (0..2)
        .map(|i| 0.5 * (2.0 * PI * s2).ln() + log_normal_1d(y[i], 0.0, (1.0 + s2).sqrt()))
        .sum();
    let expected = -log_z + (1.0 + (2.0 * PI).ln());

    let mut exact = ConditionalSampler::fresh(small(), &mut rng(5)).unwrap();
    diagonal_affine(exact.model_lane_mut(), mean, [sd, sd]);
    let prior = PriorDensity::StandardNormal;
    let problem = ViProblem {
        operator: &op,
        y: &y,
        prior: &prior,
        noise: NoiseModel::new(s).unwrap(),
    };
    let z = standard_normal(&mut rng(6), 50, 2);
    let lnq: Vec<f64> = z.rows().map(|r| -0.5 * (r[0] * r[0] + r[1] * r[1]) - (2.0 * PI).ln()).collect();
    for (v, l) in vi_integrand(&exact, &problem, &z).unwrap().iter().zip(&lnq) {
        assert!((v + l - (-log_z)).abs() < 1e-10);
    }
    let kl_exact = kl_proxy(&exact, &problem, 200_000, &mut rng(7)).unwrap();
    assert!((kl_exact - expected).abs() < 0.01, "{kl_exact} vs {expected}");

    let mut others = vec![ConditionalSampler::fresh(small(), &mut rng(8)).unwrap()];
    for seed in 0..3 {
        let mut r = rng(20 + seed);
        let mut t = ConditionalSampler::fresh(small(), &mut r).unwrap();
        t.model_lane_mut().randomize(0.1, &mut r);
        others.push(t);
    }
    for t in &others {
        let kl = kl_proxy(t, &problem, 200_000, &mut rng(7)).unwrap();
        assert!(kl_exact <= kl + 1e-3, "{kl_exact} > {kl}");
    }
}

#[test]
fn kl_proxy_is_reproducible_and_needs_enough_samples() {
    let (op, y, s) = linear_gaussian_problem();
    let t = ConditionalSampler::fresh(small(), &mut rng(9)).unwrap();
    let prior = PriorDensity::Rosenbrock;
    let p = ViProblem {
        operator: &op,
        y: &y,
        prior: &prior,
        noise: NoiseModel::new(s).unwrap(),
    };
    let a = kl_proxy(&t, &p, 10_000, &mut rng(10)).unwrap();
    let b = kl_proxy(&t, &p, 10_000, &mut rng(10)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(kl_proxy(&t, &p, 9_999, &mut rng(10)).is_err());
}

#[test]
fn kl_differences_ignore_shared_prior_constants() {
    let (op, y, s) = linear_gaussian_problem();
    let a = ConditionalSampler::fresh(small(), &mut rng(11)).unwrap();
    let mut r = rng(12);
    let mut b = ConditionalSampler::fresh(small(), &mut r).unwrap();
    b.model_lane_mut().randomize(0.1, &mut r);
    let diff = |prior: &PriorDensity| {
        let p = ViProblem {
            operator: &op,
            y: &y,
            prior,
            noise: NoiseModel::new(s).unwrap(),
        };
        kl_proxy(&a, &p, 10_000, &mut rng(13)).unwrap() - kl_proxy(&b, &p, 10_000, &mut rng(13)).unwrap()
    };
    let base = diff(&PriorDensity::Rosenbrock);
    let shifted = diff(&PriorDensity::Shifted(Box::new(PriorDensity::Rosenbrock), -7.5));
    assert!((base - shifted).abs() < 1e-9);
}

#[test]
fn mle_training_reduces_loss_and_is_deterministic() {
    let op = ForwardOperator::identity(2, 0.4).unwrap();
    let data = generate_pairs(|r, n| standard_normal(r, n, 2), &op, 2000, 14, None).unwrap();
    let cfg = TrainConfig {
        epochs: 25,
        ..TrainConfig::pretrain_default()
    };
    let run = || {
        let mut f = ConditionalFlow::new(small(), &mut rng(15)).unwrap();
        let trace = train_mle(&mut f, &data.y, &data.x, &cfg, 16).unwrap();
        (f, trace)
    };
    let (f1, t1) = run();
    let (f2, t2) = run();
    assert_eq!(t1.to_csv(false), t2.to_csv(false));
    assert_eq!(f1.to_checkpoint_string(), f2.to_checkpoint_string());
    let means = t1.epoch_means("pretrain");
    assert_eq!(means.len(), 25);
    assert!(means[24].1 < means[0].1);
}

#[test]
fn vi_training_is_deterministic_and_leaves_prior_untouched() {
    let mut r = rng(17);
    let mut f = ConditionalFlow::new(small(), &mut r).unwrap();
    f.data_lane_mut().randomize(0.2, &mut r);
    f.model_lane_mut().randomize(0.2, &mut r);
    let op = ForwardOperator::from_matrix(&[[0.8, 0.3], [-0.2, 0.9]], 0.4).unwrap();
    let y = [0.5, 0.1];
    let x = standard_normal(&mut r, 8, 2);
    let run = || {
        let (mut t, frozen) = f.init_from_pretrained();
        let before = frozen.log_prob(&y, &x).unwrap();
        let prior = PriorDensity::conditional(frozen.clone(), &y);
        let p = ViProblem {
            operator: &op,
            y: &y,
            prior: &prior,
            noise: NoiseModel::new(0.4).unwrap(),
        };
        let trace = train_vi(&mut t, &p, 200, &TrainConfig::finetune_default(), 18, "finetune").unwrap();
        let after = frozen.log_prob(&y, &x).unwrap();
        assert_eq!(before, after);
        (t.model_lane().params().tensors().to_vec(), trace.to_csv(false))
    };
    assert_eq!(run(), run());
}

#[test]
fn vi_loss_is_batch_mean_of_integrand() {
    let mut r = rng(19);
    let mut t = ConditionalSampler::fresh(small(), &mut r).unwrap();
    t.model_lane_mut().randomize(0.2, &mut r);
    let (op, y, s) = linear_gaussian_problem();
    let prior = PriorDensity::Rosenbrock;
    let p = ViProblem {
        operator: &op,
        y: &y,
        prior: &prior,
        noise: NoiseModel::new(s).unwrap(),
    };
    let z = standard_normal(&mut r, 10, 2);
    let per_row = vi_integrand(&t, &p, &z).unwrap();
    let mean = per_row.iter().sum::<f64>() / 10.0;
    assert!((vi_loss(&t, &p, &z).unwrap() - mean).abs() < 1e-12);
}

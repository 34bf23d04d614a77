mod common;

use common::rng;
use mfviflow::diff::{lr_schedule, Tensor};
use mfviflow::flows::{ConditionalArch, ConditionalFlow, FlowArch, FlowStack};
use mfviflow::gradcheck::{numerical_gradient, relative_error};
use mfviflow::metrics::{sig4, TrainingTrace};
use mfviflow::objectives::mle_loss_and_grad;
use mfviflow::problem::{build_forward_matrix, rosenbrock_grad, rosenbrock_logpdf, spectral_radius_2x2, standard_normal};
use proptest::prelude::*;

fn random_flow(seed: u64, blocks: usize) -> ConditionalFlow {
    let mut r = rng(seed);
    let arch = ConditionalArch {
        blocks,
        hidden: 6,
        ..Default::default()
    };
    let mut f = ConditionalFlow::new(arch, &mut r).unwrap();
    f.data_lane_mut().randomize(0.2, &mut r);
    f.model_lane_mut().randomize(0.2, &mut r);
    f
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stacks_invert(seed in any::<u64>(), dim in 2usize..6, blocks in 1usize..5, cond in prop::bool::ANY, batch in 1usize..9) {
        let mut r = rng(seed);
        let cond_dim = if cond { 2 } else { 0 };
        let arch = FlowArch { dim, cond_dim, blocks, hidden: 6, clamp: 5.0 };
        let mut s = FlowStack::new(arch, &mut r).unwrap();
        s.randomize(0.15, &mut r);
        let u = standard_normal(&mut r, batch, dim);
        let c = cond.then(|| standard_normal(&mut r, batch, 2));
        let (z, ld) = s.forward(&u, c.as_ref()).unwrap();
        let (back, ld_inv) = s.inverse(&z, c.as_ref()).unwrap();
        prop_assert!(back.max_abs_diff(&u) < 1e-9);
        for (a, b) in ld.iter().zip(&ld_inv) {
            prop_assert!((a + b).abs() < 1e-10);
        }
    }

    #[test]
    fn fresh_flows_are_identity(seed in any::<u64>(), dim in 2usize..6, blocks in 1usize..4) {
        let mut r = rng(seed);
        let s = FlowStack::new(FlowArch { dim, cond_dim: 0, blocks, hidden: 4, clamp: 5.0 }, &mut r).unwrap();
        let u = standard_normal(&mut r, 3, dim);
        let (z, ld) = s.forward(&u, None).unwrap();
        prop_assert_eq!(z, u);
        prop_assert!(ld.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_gradient_is_sum_of_example_gradients(seed in any::<u64>(), batch in 1usize..6) {
        let f = random_flow(seed, 2);
        let mut r = rng(seed ^ 1);
        let y = standard_normal(&mut r, batch, 2);
        let x = standard_normal(&mut r, batch, 2);
        let (_, gd, gm) = mle_loss_and_grad(&f, &y, &x).unwrap();
        let mut summed: Vec<Vec<f64>> = gd.iter().chain(&gm).map(|t| vec![0.0; t.len()]).collect();
        for i in 0..batch {
            let yi = Tensor::matrix(1, 2, y.row(i).to_vec()).unwrap();
            let xi = Tensor::matrix(1, 2, x.row(i).to_vec()).unwrap();
            let (_, a, b) = mle_loss_and_grad(&f, &yi, &xi).unwrap();
            for (acc, t) in summed.iter_mut().zip(a.iter().chain(&b)) {
                for (s, v) in acc.iter_mut().zip(t.data()) {
                    *s += v;
                }
            }
        }
        for (acc, t) in summed.iter().zip(gd.iter().chain(&gm)) {
            for (s, v) in acc.iter().zip(t.data()) {
                prop_assert!((s / batch as f64 - v).abs() < 1e-10 * (1.0 + v.abs()));
            }
        }
    }

    #[test]
    fn gradients_are_bit_deterministic(seed in any::<u64>()) {
        let f = random_flow(seed, 2);
        let mut r = rng(seed ^ 2);
        let y = standard_normal(&mut r, 4, 2);
        let x = standard_normal(&mut r, 4, 2);
        prop_assert_eq!(mle_loss_and_grad(&f, &y, &x).unwrap(), mle_loss_and_grad(&f, &y, &x).unwrap());
    }

    #[test]
    fn rosenbrock_gradient(x1 in -3.0f64..3.0, x2 in -3.0f64..6.0) {
        let fd = numerical_gradient(rosenbrock_logpdf, &[x1, x2], 1e-5);
        prop_assert!(relative_error(&rosenbrock_grad(&[x1, x2]), &fd) < 1e-7);
    }

    #[test]
    fn forward_matrices_have_unit_radius(seed in any::<u64>(), gamma in 0.0f64..5.0) {
        let a = build_forward_matrix(gamma, &mut rng(seed)).unwrap();
        prop_assert!((spectral_radius_2x2(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_geometric(epoch in 0usize..50, lr in 1e-5f64..1.0, decay in 0.1f64..1.0) {
        let next = lr_schedule(epoch + 1, lr, decay);
        prop_assert!((next - lr_schedule(epoch, lr, decay) * decay).abs() <= 1e-15 * lr);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), blocks in 1usize..4) {
        let f = random_flow(seed, blocks);
        let text = f.to_checkpoint_string();
        let arch = ConditionalArch { blocks, hidden: 6, ..Default::default() };
        let g = ConditionalFlow::from_checkpoint_str(&text, arch).unwrap();
        prop_assert_eq!(&g.to_checkpoint_string(), &text);
        let mut r = rng(seed ^ 3);
        let y = standard_normal(&mut r, 3, 2);
        let x = standard_normal(&mut r, 3, 2);
        prop_assert_eq!(f.forward(&y, &x).unwrap(), g.forward(&y, &x).unwrap());
    }

    #[test]
    fn four_significant_digits_round_trip(x in -1e6f64..1e6) {
        prop_assume!(x.abs() > 1e-6);
        let back: f64 = sig4(x).parse().unwrap();
        prop_assert!((back - x).abs() <= 5e-4 * x.abs());
    }

    #[test]
    fn trace_steps_must_increase(steps in prop::collection::vec(1usize..100, 1..20)) {
        let mut t = TrainingTrace::new();
        let mut last = 0;
        for s in steps {
            let res = t.push("p", 1, s, 0.5, 1e-3, 0.0);
            prop_assert_eq!(res.is_ok(), s > last);
            if s > last {
                last = s;
            }
        }
    }
}

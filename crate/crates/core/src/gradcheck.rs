//! Central finite-difference checks of every differentiable graph operation,
//! the flow layers and both training objectives.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::flows::{standard_normal_logpdf, ConditionalArch, ConditionalFlow, FlowArch, FlowStack};
use crate::objectives::{mle_loss, mle_loss_and_grad, vi_loss, vi_loss_and_grad, NoiseModel, PriorDensity, ViProblem};
use crate::problem::{draw_gamma_matrix, rosenbrock_logpdf_graph, ForwardOperator};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn numerical_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error seen for one checked function.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub configs: usize,
    pub max_rel_error: f64,
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    /// Input shapes from random sizes `(m, n, k)`.
    shapes: fn(usize, usize, usize) -> Vec<Vec<usize>>,
    positive: bool,
    build: Build,
}

fn mat(m: usize, n: usize) -> Vec<usize> {
    vec![m, n]
}

fn op_cases() -> Vec<OpCase> {
    macro_rules! case {
        ($name:expr, $shapes:expr, $pos:expr, $build:expr) => {
            OpCase {
                name: $name,
                shapes: $shapes,
                positive: $pos,
                build: $build,
            }
        };
    }
    vec![
        case!("add", |m, n, _| vec![mat(m, n), mat(m, n)], false, |g, v| g.add(v[0], v[1])),
        case!("sub", |m, n, _| vec![mat(m, n), mat(m, n)], false, |g, v| g.sub(v[0], v[1])),
        case!("mul", |m, n, _| vec![mat(m, n), mat(m, n)], false, |g, v| g.mul(v[0], v[1])),
        case!("add_row", |m, n, _| vec![mat(m, n), vec![n]], false, |g, v| g.add_row(v[0], v[1])),
        case!("scale", |m, n, _| vec![mat(m, n)], false, |g, v| g.scale(v[0], -1.7)),
        case!("neg", |m, _, _| vec![vec![m]], false, |g, v| g.neg(v[0])),
        case!("add_scalar", |m, n, _| vec![mat(m, n)], false, |g, v| g.add_scalar(v[0], 0.3)),
        case!("matmul", |m, n, k| vec![mat(m, k), mat(k, n)], false, |g, v| g.matmul(v[0], v[1])),
        case!("matvec", |m, _, k| vec![mat(m, k), vec![k]], false, |g, v| g.matvec(v[0], v[1])),
        case!("exp", |m, n, _| vec![mat(m, n)], false, |g, v| g.exp(v[0])),
        case!("ln", |m, n, _| vec![mat(m, n)], true, |g, v| g.ln(v[0])),
        case!("square", |m, n, _| vec![mat(m, n)], false, |g, v| g.square(v[0])),
        case!("tanh", |m, n, _| vec![mat(m, n)], false, |g, v| g.tanh(v[0])),
        case!("leaky_relu", |m, n, _| vec![mat(m, n)], false, |g, v| g.leaky_relu(v[0], 0.01)),
        case!("sum", |m, n, _| vec![mat(m, n)], false, |g, v| g.sum(v[0])),
        case!("mean", |m, n, _| vec![mat(m, n)], false, |g, v| g.mean(v[0])),
        case!("sum_cols", |m, n, _| vec![mat(m, n)], false, |g, v| g.sum_cols(v[0])),
        case!("sq_norm", |m, n, _| vec![mat(m, n)], false, |g, v| g.sq_norm(v[0])),
        case!("row_sq_norm", |m, n, _| vec![mat(m, n)], false, |g, v| g.row_sq_norm(v[0])),
        case!("concat_rows", |m, n, k| vec![mat(m, n), mat(k, n)], false, |g, v| g.concat(v[0], v[1], 0)),
        case!("concat_cols", |m, n, k| vec![mat(m, n), mat(m, k)], false, |g, v| g.concat(v[0], v[1], 1)),
        case!("concat_vec", |m, _, k| vec![vec![m], vec![k]], false, |g, v| g.concat(v[0], v[1], 0)),
        case!("slice", |m, n, _| vec![mat(m, n + 1)], false, |g, v| g.slice(v[0], 1, 1, 1)),
        case!("split", |m, n, _| vec![mat(m + 1, n)], false, |g, v| {
            let (a, b) = g.split(v[0], 0, 1)?;
            let sa = g.sum(a)?;
            let sb = g.sq_norm(b)?;
            g.add(sa, sb)
        }),
        case!("permute_cols", |m, _, _| vec![mat(m, 3)], false, |g, v| g.permute_cols(v[0], &[2, 0, 1])),
        case!("standard_normal_logpdf", |m, n, _| vec![mat(m, n)], false, |g, v| {
            standard_normal_logpdf(g, v[0])
        }),
        case!("rosenbrock_logpdf", |m, _, _| vec![mat(m, 2)], false, |g, v| rosenbrock_logpdf_graph(g, v[0])),
    ]
}

fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], positive: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if positive {
                rng.random_range(0.2..3.0)
            } else {
                rng.random_range(-1.5..1.5)
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Builds `sum(op(inputs) * w)` and returns its value and, optionally, the
/// gradient with respect to every input.
fn weighted_output(build: Build, inputs: &[Tensor], w: Option<&Tensor>, grad: bool) -> Result<(f64, Vec<Tensor>, Tensor)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), grad))
        .collect::<Result<_>>()?;
    let out = build(&mut g, &vars)?;
    let out_value = g.value(out).clone();
    let weights = match w {
        Some(w) => w.clone(),
        None => out_value.clone(),
    };
    let wv = g.constant(weights)?;
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod)?;
    let value = g.value(loss).item();
    let grads = if grad {
        g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    } else {
        Vec::new()
    };
    Ok((value, grads, out_value))
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflat(like: &[Tensor], x: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let n = t.len();
            let out = Tensor::new(t.shape().to_vec(), x[off..off + n].to_vec()).expect("same shape");
            off += n;
            out
        })
        .collect()
}

const H: f64 = 1e-6;

/// Checks every graph operation on `configs` random input sets each.
pub fn check_ops<R: Rng + ?Sized>(rng: &mut R, configs: usize) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for case in op_cases() {
        let mut worst: f64 = 0.0;
        for _ in 0..configs {
            let (m, n, k) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let inputs: Vec<Tensor> = (case.shapes)(m, n, k)
                .iter()
                .map(|s| random_tensor(rng, s, case.positive))
                .collect();
            let (_, _, out) = weighted_output(case.build, &inputs, None, false)?;
            let w = random_tensor(rng, out.shape(), false);
            let (_, grads, _) = weighted_output(case.build, &inputs, Some(&w), true)?;
            let x0 = flat(&inputs);
            let fd = numerical_gradient(
                |x| {
                    weighted_output(case.build, &unflat(&inputs, x), Some(&w), false)
                        .map(|r| r.0)
                        .unwrap_or(f64::NAN)
                },
                &x0,
                H,
            );
            worst = worst.max(relative_error(&flat(&grads), &fd));
        }
        results.push(CheckResult {
            name: case.name.to_string(),
            configs,
            max_rel_error: worst,
        });
    }
    Ok(results)
}

fn set_params(stack: &mut FlowStack, x: &[f64]) {
    let mut off = 0;
    for t in stack.params_mut().tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&x[off..off + n]);
        off += n;
    }
}

fn params_of(stack: &FlowStack) -> Vec<f64> {
    flat(stack.params().tensors())
}

fn random_matrix<R: Rng + ?Sized>(rng: &mut R, m: usize, n: usize) -> Tensor {
    let data = (0..m * n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(m, n, data).expect("nonempty")
}

fn small_arch<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> ConditionalArch {
    ConditionalArch {
        data_dim: dim,
        model_dim: dim,
        blocks: rng.random_range(1..3),
        hidden: rng.random_range(3..7),
        clamp: 5.0,
    }
}

/// Flow forward and inverse passes, differentiated with respect to their
/// inputs, the condition and every weight.
pub fn check_flow_layers<R: Rng + ?Sized>(rng: &mut R, configs: usize) -> Result<Vec<CheckResult>> {
    let mut fwd_worst: f64 = 0.0;
    let mut inv_worst: f64 = 0.0;
    for _ in 0..configs {
        let dim = rng.random_range(2..5);
        let arch = FlowArch {
            dim,
            cond_dim: 2,
            blocks: rng.random_range(1..3),
            hidden: rng.random_range(3..7),
            clamp: 5.0,
        };
        let mut stack = FlowStack::new(arch, rng)?;
        stack.randomize(0.4, rng);
        let batch = rng.random_range(1..4);
        let u = random_matrix(rng, batch, dim);
        let c = random_matrix(rng, batch, 2);
        let w_out = random_matrix(rng, batch, dim);
        let w_ld = random_tensor(rng, &[batch], false);
        for inverse in [false, true] {
            let eval = |stack: &FlowStack, u: &Tensor, c: &Tensor, grad: bool| -> Result<(f64, Vec<f64>)> {
                let mut g = Graph::new();
                let vars = stack.bind(&mut g, grad)?;
                let uv = g.leaf(u.clone(), grad)?;
                let cv = g.leaf(c.clone(), grad)?;
                let (out, ld) = if inverse {
                    stack.inverse_graph(&mut g, &vars, uv, Some(cv))?
                } else {
                    stack.forward_graph(&mut g, &vars, uv, Some(cv))?
                };
                let wo = g.constant(w_out.clone())?;
                let wl = g.constant(w_ld.clone())?;
                let a = g.mul(out, wo)?;
                let a = g.sum(a)?;
                let b = g.mul(ld, wl)?;
                let b = g.sum(b)?;
                let loss = g.add(a, b)?;
                let value = g.value(loss).item();
                if !grad {
                    return Ok((value, Vec::new()));
                }
                g.backward(loss)?;
                let mut grads = flat(&stack.params().collect_grads(&g, &vars));
                grads.extend(g.grad(uv).expect("input grad").data());
                grads.extend(g.grad(cv).expect("cond grad").data());
                Ok((value, grads))
            };
            let (_, grads) = eval(&stack, &u, &c, true)?;
            let np = stack.params().numel();
            let mut x0 = params_of(&stack);
            x0.extend(u.data());
            x0.extend(c.data());
            let mut probe = stack.clone();
            let fd = numerical_gradient(
                |x| {
                    set_params(&mut probe, &x[..np]);
                    let uu = Tensor::matrix(batch, dim, x[np..np + batch * dim].to_vec()).unwrap();
                    let cc = Tensor::matrix(batch, 2, x[np + batch * dim..].to_vec()).unwrap();
                    eval(&probe, &uu, &cc, false).map(|r| r.0).unwrap_or(f64::NAN)
                },
                &x0,
                H,
            );
            let e = relative_error(&grads, &fd);
            if inverse {
                inv_worst = inv_worst.max(e);
            } else {
                fwd_worst = fwd_worst.max(e);
            }
        }
    }
    Ok(vec![
        CheckResult {
            name: "flow_forward".into(),
            configs,
            max_rel_error: fwd_worst,
        },
        CheckResult {
            name: "flow_inverse".into(),
            configs,
            max_rel_error: inv_worst,
        },
    ])
}

fn random_flow<R: Rng + ?Sized>(rng: &mut R) -> Result<ConditionalFlow> {
    let mut flow = ConditionalFlow::new(small_arch(rng, 2), rng)?;
    flow.data_lane_mut().randomize(0.3, rng);
    flow.model_lane_mut().randomize(0.3, rng);
    Ok(flow)
}

/// Maximum-likelihood loss, differentiated with respect to both lanes.
pub fn check_mle_objective<R: Rng + ?Sized>(rng: &mut R, configs: usize) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let flow = random_flow(rng)?;
        let batch = rng.random_range(1..5);
        let y = random_matrix(rng, batch, 2);
        let x = random_matrix(rng, batch, 2);
        let (_, gd, gm) = mle_loss_and_grad(&flow, &y, &x)?;
        let mut grads = flat(&gd);
        grads.extend(flat(&gm));
        let nd = flow.data_lane().params().numel();
        let mut x0 = params_of(flow.data_lane());
        x0.extend(params_of(flow.model_lane()));
        let mut probe = flow.clone();
        let fd = numerical_gradient(
            |p| {
                set_params(probe.data_lane_mut(), &p[..nd]);
                set_params(probe.model_lane_mut(), &p[nd..]);
                mle_loss(&probe, &y, &x).unwrap_or(f64::NAN)
            },
            &x0,
            H,
        );
        worst = worst.max(relative_error(&grads, &fd));
    }
    Ok(CheckResult {
        name: "mle_objective".into(),
        configs,
        max_rel_error: worst,
    })
}

/// Variational objective with the frozen conditional prior (`conditional`)
/// or the analytic Rosenbrock prior, differentiated with respect to the
/// sampler's weights.
pub fn check_vi_objective<R: Rng + ?Sized>(rng: &mut R, configs: usize, conditional: bool) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let flow = random_flow(rng)?;
        let (mut sampler, frozen) = flow.init_from_pretrained();
        sampler.model_lane_mut().randomize(0.3, rng);
        let a = draw_gamma_matrix(rng);
        let op = ForwardOperator::from_matrix(&a, 0.4)?;
        let y = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let prior = if conditional {
            PriorDensity::conditional(frozen, &y)
        } else {
            PriorDensity::Rosenbrock
        };
        let problem = ViProblem {
            operator: &op,
            y: &y,
            prior: &prior,
            noise: NoiseModel::new(rng.random_range(0.3..1.0))?,
        };
        let rows = rng.random_range(1..5);
        let z = random_matrix(rng, rows, 2);
        let (_, grads) = vi_loss_and_grad(&sampler, &problem, &z)?;
        let x0 = params_of(sampler.model_lane());
        let mut probe = sampler.clone();
        let fd = numerical_gradient(
            |p| {
                set_params(probe.model_lane_mut(), p);
                vi_loss(&probe, &problem, &z).unwrap_or(f64::NAN)
            },
            &x0,
            H,
        );
        worst = worst.max(relative_error(&flat(&grads), &fd));
    }
    let name = if conditional { "vi_objective_conditional_prior" } else { "vi_objective_rosenbrock_prior" };
    Ok(CheckResult {
        name: name.into(),
        configs,
        max_rel_error: worst,
    })
}

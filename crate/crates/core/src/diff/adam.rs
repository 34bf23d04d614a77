use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            state: AdamState::zeros_like(params),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        adam_step(params, grads, &mut self.state, &self.config)
    }
}

pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(
                "adam_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.t += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = *config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

/// Exponential per-epoch decay: `base_lr * decay^epoch`.
pub fn lr_schedule(epoch: usize, base_lr: f64, decay: f64) -> f64 {
    base_lr * decay.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::scalar(0.5)];
        let g = vec![Tensor::scalar(1.0)];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &g).unwrap();
        // m_hat = g and v_hat = g^2 on the first step.
        let expected = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert_eq!(p[0].item(), expected);
        assert!((0.5 - p[0].item() - 0.001).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let g = vec![Tensor::zeros(&[2])];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(opt.state.t, 1);
    }

    #[test]
    fn identical_inputs_give_identical_states() {
        let run = || {
            let mut p = vec![Tensor::vector(vec![0.3, 0.7, -1.1])];
            let mut opt = Adam::new(AdamConfig::default(), &p);
            for k in 0..5 {
                let g = vec![Tensor::vector(vec![0.1 * k as f64, -0.2, 1.5])];
                opt.step(&mut p, &g).unwrap();
            }
            (p, opt.state)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let g = vec![Tensor::vector(vec![1.0, 2.0, 3.0])];
        assert!(matches!(opt.step(&mut p, &g), Err(Error::Dimension { .. })));
        assert_eq!(opt.state.t, 0);
    }

    #[test]
    fn schedule_decays_geometrically() {
        assert_eq!(lr_schedule(0, 0.001, 0.9), 0.001);
        assert!((lr_schedule(1, 0.001, 0.9) - 0.0009).abs() < 1e-15);
        assert!((lr_schedule(2, 0.001, 0.9) - 0.00081).abs() < 1e-15);
        assert_eq!(lr_schedule(7, 0.01, 1.0), 0.01);
    }
}

//! AdamW with decoupled weight decay, and the warmup + cosine-decay
//! learning-rate schedule.

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::gradcheck::NamedTensors;
use crate::numerics::tensor::Tensor;
use alloc::collections::BTreeMap;
use alloc::format;

/// First/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<E: Element> {
    pub m: NamedTensors<E>,
    pub v: NamedTensors<E>,
    pub step: usize,
    pub cfg: OptimConfig,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(params: &NamedTensors<E>, cfg: OptimConfig) -> Self {
        let zeros = |src: &NamedTensors<E>| {
            src.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect::<BTreeMap<_, _>>()
        };
        OptimizerState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
            cfg,
        }
    }
}

/// One AdamW update: bias-corrected Adam step plus decay applied directly to
/// the parameter (`theta -= lr * wd * theta`), independent of the adaptive
/// term. Gradients must be finite; the offending parameter is named
/// otherwise.
pub fn adamw_step<E: Element>(
    params: &mut NamedTensors<E>,
    grads: &NamedTensors<E>,
    state: &mut OptimizerState<E>,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let beta1 = E::from_f64(state.cfg.beta1);
    let beta2 = E::from_f64(state.cfg.beta2);
    let one_minus_beta1 = E::from_f64(1.0 - state.cfg.beta1);
    let one_minus_beta2 = E::from_f64(1.0 - state.cfg.beta2);
    let bias1 = E::from_f64(1.0 - libm::pow(state.cfg.beta1, t));
    let bias2 = E::from_f64(1.0 - libm::pow(state.cfg.beta2, t));
    let eps = E::from_f64(state.cfg.eps);
    let lr_e = E::from_f64(lr);
    let decay = E::from_f64(lr * state.cfg.weight_decay);

    for (name, theta) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing gradient for `{name}`")))?;
        grad.check_finite(&format!("gradient of `{name}`"))?;
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::internal(format!("missing moment for `{name}`")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::internal(format!("missing moment for `{name}`")))?;

        let mut new_theta = theta.data().to_vec();
        let mut new_m = m.data().to_vec();
        let mut new_v = v.data().to_vec();
        for i in 0..new_theta.len() {
            let g = grad.data()[i];
            new_m[i] = beta1 * new_m[i] + one_minus_beta1 * g;
            new_v[i] = beta2 * new_v[i] + one_minus_beta2 * g * g;
            let m_hat = new_m[i] / bias1;
            let v_hat = new_v[i] / bias2;
            new_theta[i] =
                new_theta[i] - lr_e * (m_hat / (v_hat.sqrt() + eps)) - decay * new_theta[i];
        }
        *theta = Tensor::new(theta.shape().to_vec(), new_theta)?;
        *m = Tensor::new(m.shape().to_vec(), new_m)?;
        *v = Tensor::new(v.shape().to_vec(), new_v)?;
    }
    Ok(())
}

/// Resolved learning-rate schedule over a whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub warmup_start_lr: f64,
}

impl ScheduleConfig {
    pub fn constant_zero(total_steps: usize) -> Self {
        ScheduleConfig {
            base_lr: 0.0,
            total_steps,
            warmup_steps: 0,
            warmup_start_lr: 0.0,
        }
    }
}

/// Linear warmup to the base rate, then cosine decay to zero.
pub fn lr_at(step: usize, schedule: &ScheduleConfig) -> Result<f64> {
    if schedule.warmup_steps > schedule.total_steps {
        return Err(Error::config("warmup longer than the run"));
    }
    if step > schedule.total_steps {
        return Err(Error::contract(format!(
            "step {step} beyond total {}",
            schedule.total_steps
        )));
    }
    if step < schedule.warmup_steps {
        let t = step as f64 / schedule.warmup_steps as f64;
        return Ok(schedule.warmup_start_lr + (schedule.base_lr - schedule.warmup_start_lr) * t);
    }
    let span = schedule.total_steps - schedule.warmup_steps;
    if span == 0 {
        return Ok(schedule.base_lr);
    }
    let progress = (step - schedule.warmup_steps) as f64 / span as f64;
    Ok(schedule.base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn one_param(value: f64) -> NamedTensors<f64> {
        let mut m = BTreeMap::new();
        m.insert("theta".to_string(), Tensor::scalar(value));
        m
    }

    #[test]
    fn first_step_hand_value() {
        // theta=1, g=1, lr=1e-4, wd=5e-2: bias correction cancels at step 1,
        // so theta' = 1 - 1e-4 * (1 / (1 + 1e-8)) - 1e-4 * 5e-2.
        let mut params = one_param(1.0);
        let grads = one_param(1.0);
        let mut state = OptimizerState::new(&params, OptimConfig::default());
        adamw_step(&mut params, &grads, &mut state, 1e-4).unwrap();
        let got = params["theta"].scalar_value().unwrap();
        assert!((got - 0.9998950).abs() < 1e-7, "{got}");
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = one_param(1.25);
        let grads = one_param(0.0);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut state = OptimizerState::new(&params, cfg);
        adamw_step(&mut params, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(params["theta"].scalar_value().unwrap(), 1.25);
    }

    #[test]
    fn zero_lr_is_identity_even_with_decay() {
        let mut params = one_param(3.0);
        let grads = one_param(0.7);
        let mut state = OptimizerState::new(&params, OptimConfig::default());
        adamw_step(&mut params, &grads, &mut state, 0.0).unwrap();
        assert_eq!(params["theta"].scalar_value().unwrap(), 3.0);
    }

    #[test]
    fn identical_states_give_identical_updates() {
        let run = || {
            let mut params = one_param(0.5);
            let grads = one_param(-0.3);
            let mut state = OptimizerState::new(&params, OptimConfig::default());
            adamw_step(&mut params, &grads, &mut state, 1e-2).unwrap();
            adamw_step(&mut params, &grads, &mut state, 1e-2).unwrap();
            params["theta"].scalar_value().unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut params = one_param(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("theta".to_string(), Tensor::scalar(f64::NAN));
        let mut state = OptimizerState::new(&params, OptimConfig::default());
        match adamw_step(&mut params, &grads, &mut state, 1e-3) {
            Err(Error::NonFinite { op }) => assert!(op.contains("theta")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn schedule_hits_pinned_points() {
        let s = ScheduleConfig {
            base_lr: 1e-4,
            total_steps: 100,
            warmup_steps: 10,
            warmup_start_lr: 1e-6,
        };
        assert!((lr_at(10, &s).unwrap() - 1e-4).abs() < 1e-18);
        assert!(lr_at(100, &s).unwrap().abs() < 1e-18);
        // Midpoint of the decay span: cos(pi/2) = 0 -> base / 2.
        assert!((lr_at(55, &s).unwrap() - 5e-5).abs() < 1e-12);
        // Warmup is linear from the warmup start rate.
        assert!((lr_at(0, &s).unwrap() - 1e-6).abs() < 1e-18);
        let mid = lr_at(5, &s).unwrap();
        assert!((mid - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-12);
    }

    #[test]
    fn step_beyond_total_is_contract_error() {
        let s = ScheduleConfig {
            base_lr: 1.0,
            total_steps: 10,
            warmup_steps: 0,
            warmup_start_lr: 0.0,
        };
        assert!(matches!(lr_at(11, &s), Err(Error::Contract { .. })));
        let _ = vec![0; 0];
    }
}

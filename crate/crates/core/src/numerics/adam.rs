//! Adam optimizer and the step-decay / halving-restart learning-rate policy.

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    /// Fresh state with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(params: &ParamSet) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamSet, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            step: 0,
            beta1,
            beta2,
            eps,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    params.check_mirrors(grads)?;
    params.check_mirrors(&state.m)?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { param: name.to_string() });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("mirrors checked");
        let m = state.m.get_mut(name).expect("mirrors checked");
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state.v.get_mut(name).expect("mirrors checked");
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let m = state.m.get(name).expect("mirrors checked");
        let v = state.v.get(name).expect("mirrors checked");
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Step decay every few epochs, with the initial rate halved per restart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrPolicy {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: u32,
    pub restart_halvings: u32,
}

impl Default for LrPolicy {
    fn default() -> Self {
        LrPolicy {
            initial_lr: 0.001,
            decay_factor: 0.98,
            decay_every_epochs: 2,
            restart_halvings: 0,
        }
    }
}

impl LrPolicy {
    /// Initial rate of the current restart: `initial_lr / 2^restart_halvings`.
    pub fn restart_lr(&self) -> f64 {
        self.initial_lr * 0.5f64.powi(self.restart_halvings as i32)
    }

    /// `restart_lr · decay_factor^floor(epoch / decay_every_epochs)`.
    pub fn lr_for_epoch(&self, epoch: u32) -> f64 {
        let decays = epoch / self.decay_every_epochs.max(1);
        self.restart_lr() * self.decay_factor.powi(decays as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_set(v: f64) -> ParamSet {
        let mut p = ParamSet::default();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_set(0.7);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &scalar_set(0.0), &mut s, 0.001).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_set(1.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &scalar_set(0.5), &mut s, 0.001).unwrap();
        // m̂ = g, v̂ = g² → Δ = -lr · g / (|g| + eps)
        let want = 1.0 - 0.001 * 0.5 / (0.5 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-15);
        assert!((p.get("w").unwrap().data()[0] - (1.0 - 0.001)).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_aborts_without_side_effects() {
        let mut p = scalar_set(1.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &scalar_set(f64::NAN), &mut s, 0.001).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.step, 0);
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = scalar_set(0.3);
            let mut s = AdamState::new(&p);
            for _ in 0..2 {
                adam_step(&mut p, &scalar_set(0.25), &mut s, 0.01).unwrap();
            }
            p.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_values() {
        let policy = LrPolicy::default();
        assert_eq!(policy.lr_for_epoch(0), 0.001);
        assert_eq!(policy.lr_for_epoch(1), 0.001);
        assert!((policy.lr_for_epoch(2) - 0.00098).abs() < 1e-18);
        let halved: Vec<f64> = (0..3)
            .map(|k| LrPolicy { restart_halvings: k, ..policy }.lr_for_epoch(0))
            .collect();
        assert_eq!(halved, vec![0.001, 0.0005, 0.00025]);
    }
}

//! Learning-rate schedule and AdamW.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_BASE_LR: f64 = 5e-4;
pub const DEFAULT_WARMUP_STEPS: usize = 500;
pub const DEFAULT_WARMUP_START: f64 = 0.001;
pub const DEFAULT_MILESTONES: [usize; 2] = [170, 200];
pub const DEFAULT_GAMMA: f64 = 0.1;

/// Linear warmup by optimizer step followed by multi-step decay by epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub warmup_start_factor: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: DEFAULT_BASE_LR,
            warmup_steps: DEFAULT_WARMUP_STEPS,
            warmup_start_factor: DEFAULT_WARMUP_START,
            milestones: DEFAULT_MILESTONES.to_vec(),
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::param(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.warmup_start_factor > 0.0 && self.warmup_start_factor <= 1.0) {
            return Err(Error::param(format!(
                "warmup_start_factor must be in (0, 1], got {}",
                self.warmup_start_factor
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::param(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        Ok(())
    }

    /// Multiplier on `base_lr` for optimizer step `step` taken during `epoch`
    /// (both counted from 0).
    pub fn lr_factor(&self, step: usize, epoch: usize) -> f64 {
        let warmup = if self.warmup_steps == 0 {
            1.0
        } else {
            let t = step.min(self.warmup_steps) as f64 / self.warmup_steps as f64;
            self.warmup_start_factor + (1.0 - self.warmup_start_factor) * t
        };
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        warmup * self.gamma.powi(passed as i32)
    }

    pub fn lr(&self, step: usize, epoch: usize) -> f64 {
        self.base_lr * self.lr_factor(step, epoch)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        AdamWState {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }
}

/// One AdamW update in place, with weight decay decoupled from the moments.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::dim(format!(
            "adamw: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::param(format!("learning rate must be positive, got {lr}")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = lr * state.weight_decay;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + state.eps) - decay * *p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_factor(0, 0), 0.001);
        assert_eq!(s.lr_factor(500, 0), 1.0);
        assert!((s.lr_factor(10_000, 200) - 0.01).abs() < 1e-15);
        assert!((s.lr_factor(10_000, 169) - 1.0).abs() < 1e-15);
        assert!((s.lr_factor(10_000, 170) - 0.1).abs() < 1e-15);
        assert!((s.lr_factor(250, 0) - (0.001 + 0.999 * 0.5)).abs() < 1e-15);
        assert_eq!(s.lr(500, 0), 5e-4);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::default().validate().is_ok());
        for bad in [
            LrSchedule { gamma: 1.0, ..Default::default() },
            LrSchedule { warmup_start_factor: 0.0, ..Default::default() },
            LrSchedule { milestones: vec![200, 170], ..Default::default() },
            LrSchedule { base_lr: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let no_warmup = LrSchedule { warmup_steps: 0, ..Default::default() };
        assert_eq!(no_warmup.lr_factor(0, 0), 1.0);
    }

    #[test]
    fn adamw_one_step_hand_example() {
        let mut p = [1.0];
        let mut st = AdamWState::new(1, 0.01);
        adamw_step(&mut p, &[1.0], &mut st, 0.001).unwrap();
        let expected = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8)) - 0.001 * 0.01 * 1.0;
        assert!((p[0] - expected).abs() <= 1e-9);
        assert!((p[0] - 0.998990).abs() < 1e-6);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adamw_fixed_point_and_decay() {
        let mut p = [0.3, -2.0];
        let mut st = AdamWState::new(2, 0.0);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, 0.01).unwrap();
        assert_eq!(p, [0.3, -2.0]);
        assert_eq!(st.first_moment, vec![0.0, 0.0]);
        assert_eq!(st.second_moment, vec![0.0, 0.0]);

        let mut p = [2.0];
        let mut st = AdamWState::new(1, 0.1);
        adamw_step(&mut p, &[0.0], &mut st, 0.01).unwrap();
        let after_one = p[0];
        adamw_step(&mut p, &[0.0], &mut st, 0.01).unwrap();
        assert_eq!(after_one, 2.0 * (1.0 - 0.001));
        assert_eq!(p[0], after_one * (1.0 - 0.001));
    }

    #[test]
    fn adamw_errors() {
        let mut st = AdamWState::new(2, 0.01);
        assert!(matches!(adamw_step(&mut [0.0], &[0.0], &mut st, 0.1), Err(Error::Dimension(_))));
        assert!(adamw_step(&mut [0.0, 0.0], &[0.0, 0.0], &mut st, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn warmup_is_continuous_and_decay_piecewise_constant(step in 0usize..499, epoch in 0usize..400) {
            let s = LrSchedule::default();
            let gap = (s.lr_factor(step + 1, 0) - s.lr_factor(step, 0)).abs();
            prop_assert!(gap <= (1.0 - s.warmup_start_factor) / s.warmup_steps as f64 + 1e-15);
            prop_assert_eq!(s.lr_factor(600, epoch), s.lr_factor(10_000, epoch));
            if !s.milestones.contains(&(epoch + 1)) {
                prop_assert_eq!(s.lr_factor(600, epoch), s.lr_factor(600, epoch + 1));
            }
        }

        #[test]
        fn second_moment_stays_nonnegative(g in prop::collection::vec(-1e3f64..1e3, 1..8)) {
            let mut p = vec![0.5; g.len()];
            let mut st = AdamWState::new(g.len(), 0.01);
            for _ in 0..3 {
                adamw_step(&mut p, &g, &mut st, 1e-3).unwrap();
            }
            prop_assert!(st.second_moment.iter().all(|&v| v >= 0.0));
            prop_assert!(p.iter().all(|v| v.is_finite()));
        }
    }
}

//! Adam, reduce-on-plateau learning-rate control and early stopping.

use serde::{Deserialize, Serialize};

use crate::convnet::Param;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_LR: f64 = 0.0000427;

/// Bias-corrected Adam moments for one parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    fn ensure_moments(&mut self, params: &[&mut Param<T>]) -> Result<()> {
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.first_moment) {
            if p.value.shape() != m.shape() {
                return Err(Error::Shape(format!("moment shape mismatch for {}", p.name)));
            }
        }
        Ok(())
    }
}

/// One Adam update from the accumulated gradients. Parameters are left
/// untouched if any gradient is non-finite.
pub fn adam_step<T: Float>(params: &mut [&mut Param<T>], state: &mut AdamState<T>) -> Result<()> {
    if let Some(bad) = params.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFiniteGradient(bad.name.clone()));
    }
    state.ensure_moments(params)?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let step_size = state.lr / bc1;
    let bc2_sqrt = bc2.sqrt();
    for ((p, m), v) in params
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let Param { value, grad, .. } = &mut **p;
        for (i, &g) in grad.data().iter().enumerate() {
            let g = g.to_f64();
            let mi = b1 * m[i].to_f64() + (1.0 - b1) * g;
            let vi = b2 * v[i].to_f64() + (1.0 - b2) * g * g;
            m[i] = T::from_f64(mi);
            v[i] = T::from_f64(vi);
            let denom = vi.sqrt() / bc2_sqrt + state.eps;
            value[i] = T::from_f64(value[i].to_f64() - step_size * mi / denom);
        }
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` after `patience` epochs
/// without strict improvement (i.e. on the `patience + 1`-th stale epoch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub best_seen: f64,
    pub stale_count: usize,
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        Self::new(0.1, 10)
    }
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            min_lr: 1e-8,
            best_seen: f64::INFINITY,
            stale_count: 0,
        }
    }

    /// Returns the learning rate to use from now on.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best_seen {
            self.best_seen = val_loss;
            self.stale_count = 0;
            return lr;
        }
        self.stale_count += 1;
        if self.stale_count > self.patience {
            self.stale_count = 0;
            return (lr * self.factor).max(self.min_lr).min(lr);
        }
        lr
    }
}

pub fn scheduler_observe(sched: &mut PlateauScheduler, val_loss: f64, lr: f64) -> f64 {
    sched.observe(val_loss, lr)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopSignal {
    Continue,
    Stop,
}

/// Tracks the best validation loss and the parameters that achieved it.
#[derive(Debug, Clone)]
pub struct EarlyStopper<S> {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: Option<usize>,
    pub counter: usize,
    pub best_parameters: Option<S>,
    observed: usize,
}

impl<S: Clone> EarlyStopper<S> {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: None,
            counter: 0,
            best_parameters: None,
            observed: 0,
        }
    }

    /// `snapshot` is only called on strict improvement.
    pub fn observe(&mut self, val_loss: f64, snapshot: impl FnOnce() -> S) -> StopSignal {
        self.observed += 1;
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = Some(self.observed);
            self.best_parameters = Some(snapshot());
            self.counter = 0;
        } else {
            self.counter += 1;
        }
        if self.counter >= self.patience {
            StopSignal::Stop
        } else {
            StopSignal::Continue
        }
    }
}

pub fn early_stop_observe<S: Clone>(stopper: &mut EarlyStopper<S>, val_loss: f64, params: &S) -> StopSignal {
    stopper.observe(val_loss, || params.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64, g: f64) -> Param<f64> {
        let mut p = Param::new("w", Tensor::from_vec(&[1], vec![v]).unwrap());
        p.grad[0] = g;
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(1.5, 0.0);
        let mut st = AdamState::new(0.1);
        adam_step(&mut [&mut p], &mut st).unwrap();
        assert_eq!(p.value[0], 1.5);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let mut p = scalar(0.0, 1.0);
        let mut st = AdamState::new(0.1);
        adam_step(&mut [&mut p], &mut st).unwrap();
        let want = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.value[0] - want).abs() < 1e-15, "{}", p.value[0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut once = scalar(0.0, 1.0);
        let mut st = AdamState::new(0.1);
        adam_step(&mut [&mut once], &mut st).unwrap();
        let after_one = once.value[0];
        adam_step(&mut [&mut once], &mut st).unwrap();
        assert_ne!(once.value[0], after_one);
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar(0.0, f64::NAN);
        p.name = "enc0.0.conv.weight".into();
        let err = adam_step(&mut [&mut p], &mut AdamState::new(0.1)).unwrap_err();
        assert!(err.to_string().contains("enc0.0.conv.weight"));
        assert_eq!(p.value[0], 0.0);
    }

    #[test]
    fn scheduler_reduces_after_eleven_stale_epochs() {
        let mut s = PlateauScheduler::default();
        let mut lr = 4.27e-5;
        lr = s.observe(1.0, lr);
        for i in 0..10 {
            lr = s.observe(1.0, lr);
            assert_eq!(lr, 4.27e-5, "epoch {i}");
        }
        lr = s.observe(1.0, lr);
        assert!((lr - 4.27e-6).abs() < 1e-20);
        assert_eq!(s.stale_count, 0);
    }

    #[test]
    fn scheduler_resets_on_improvement() {
        let mut s = PlateauScheduler::default();
        let mut lr = 1e-3;
        lr = s.observe(1.0, lr);
        for _ in 0..9 {
            lr = s.observe(1.0, lr);
        }
        lr = s.observe(0.5, lr);
        assert_eq!(s.stale_count, 0);
        assert_eq!(lr, 1e-3);
        for i in 0..100 {
            lr = s.observe(0.4 - i as f64 * 1e-3, lr);
        }
        assert_eq!(lr, 1e-3);
    }

    #[test]
    fn scheduler_respects_min_lr() {
        let mut s = PlateauScheduler::new(0.1, 0);
        let mut lr = 1e-6;
        for _ in 0..10 {
            lr = s.observe(1.0, lr);
        }
        assert_eq!(lr, 1e-8);
    }

    #[test]
    fn stopper_constant_loss_stops_after_patience() {
        let mut st: EarlyStopper<u32> = EarlyStopper::new(75);
        let mut epochs = 0;
        loop {
            epochs += 1;
            if st.observe(2.0, || epochs) == StopSignal::Stop {
                break;
            }
        }
        assert_eq!(epochs, 76);
        assert_eq!(st.best_parameters, Some(1));
    }

    #[test]
    fn stopper_tracks_improvements() {
        let mut st: EarlyStopper<usize> = EarlyStopper::new(3);
        for e in 0..50 {
            assert_eq!(st.observe(100.0 - e as f64, || e), StopSignal::Continue);
        }
        assert_eq!(st.best_parameters, Some(49));

        let mut st: EarlyStopper<usize> = EarlyStopper::new(75);
        st.observe(1.0, || 0);
        for e in 1..75 {
            assert_eq!(st.observe(1.0, || e), StopSignal::Continue);
        }
        assert_eq!(st.counter, 74);
        st.observe(0.5, || 75);
        assert_eq!(st.counter, 0);
    }

    proptest! {
        #[test]
        fn zero_gradients_are_identity_for_any_state(vals in prop::collection::vec(-10.0f64..10.0, 1..8), warm in 0usize..5) {
            let mut p = Param::new("p", Tensor::from_vec(&[vals.len()], vals.clone()).unwrap());
            let mut st = AdamState::new(0.01);
            // warm the moments with gradients, then reset parameters and feed zeros
            for _ in 0..warm {
                p.grad.fill(0.0);
                adam_step(&mut [&mut p], &mut st).unwrap();
            }
            p.value = Tensor::from_vec(&[vals.len()], vals.clone()).unwrap();
            p.grad.fill(0.0);
            st.first_moment.iter_mut().for_each(|m| m.fill(0.0));
            adam_step(&mut [&mut p], &mut st).unwrap();
            prop_assert_eq!(p.value.data(), &vals[..]);
        }

        #[test]
        fn scheduler_lr_is_non_increasing(losses in prop::collection::vec(0.0f64..1.0, 1..200)) {
            let mut s = PlateauScheduler::new(0.1, 3);
            let mut lr = 4.27e-5;
            for l in losses {
                let next = s.observe(l, lr);
                prop_assert!(next <= lr);
                prop_assert!(next >= s.min_lr);
                if next < lr {
                    let ratio = next / lr;
                    prop_assert!((ratio - 0.1).abs() < 1e-12 || next == s.min_lr);
                }
                lr = next;
            }
        }

        #[test]
        fn stopper_keeps_earliest_minimum(losses in prop::collection::vec(0u8..5, 1..100)) {
            let mut st: EarlyStopper<usize> = EarlyStopper::new(1000);
            for (i, &l) in losses.iter().enumerate() {
                st.observe(l as f64, || i);
            }
            let min = *losses.iter().min().unwrap();
            let first = losses.iter().position(|&l| l == min).unwrap();
            prop_assert_eq!(st.best_parameters, Some(first));
            prop_assert_eq!(st.best_loss, min as f64);
        }
    }
}

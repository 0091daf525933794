use serde::{Deserialize, Serialize};

use super::{Grads, Matrix, ParamStore};
use crate::error::{Error, Result};

/// RMSprop hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

/// Squared-gradient accumulator plus hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: RmsPropConfig,
    square_avg: Vec<Matrix>,
}

impl OptState {
    pub fn new(store: &ParamStore, config: RmsPropConfig) -> Self {
        Self {
            config,
            square_avg: store
                .iter()
                .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn square_avg(&self) -> &[Matrix] {
        &self.square_avg
    }
}

/// One RMSprop update:
/// `s ← α s + (1 − α) g²`, `p ← p − lr · g / (√s + ε)`.
///
/// The step is rejected, leaving both store and state untouched, if any
/// gradient entry is non-finite.
pub fn rmsprop_step(store: &mut ParamStore, grads: &Grads, state: &mut OptState) -> Result<()> {
    if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            param: store.name(id).to_owned(),
        });
    }
    let RmsPropConfig { lr, alpha, eps } = state.config;
    for (id, g) in grads.iter() {
        let s = &mut state.square_avg[id.index()];
        let p = store.get_mut(id);
        for ((pi, si), &gi) in p.data_mut().iter_mut().zip(s.data_mut()).zip(g.data()) {
            *si = alpha * *si + (1.0 - alpha) * gi * gi;
            *pi -= lr * gi / (si.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_setup(p: f64) -> (ParamStore, OptState) {
        let mut store = ParamStore::new();
        store.add("p", Matrix::filled(1, 1, p));
        let state = OptState::new(&store, RmsPropConfig::default());
        (store, state)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, mut state) = scalar_setup(1.0);
        let grads = Grads::zeros_like(&store);
        rmsprop_step(&mut store, &grads, &mut state).unwrap();
        assert_eq!(store.flat_get(0), 1.0);
    }

    #[test]
    fn single_step_hand_computation() {
        let (mut store, mut state) = scalar_setup(1.0);
        let mut grads = Grads::zeros_like(&store);
        grads.accumulate(store.id("p").unwrap(), &Matrix::filled(1, 1, 1.0));
        rmsprop_step(&mut store, &grads, &mut state).unwrap();
        let s = state.square_avg()[0].data()[0];
        assert!((s - 0.01).abs() < 1e-15);
        let expected = 1.0 - 1e-3 / (0.1 + 1e-8);
        assert!((store.flat_get(0) - expected).abs() < 1e-12);
        assert!((store.flat_get(0) - 0.99).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let (mut store, mut state) = scalar_setup(1.0);
        let mut grads = Grads::zeros_like(&store);
        grads.accumulate(store.id("p").unwrap(), &Matrix::filled(1, 1, f64::NAN));
        let err = rmsprop_step(&mut store, &grads, &mut state).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "p"));
        assert_eq!(store.flat_get(0), 1.0);
        assert_eq!(state.square_avg()[0].data()[0], 0.0);
    }
}

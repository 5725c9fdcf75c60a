use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one pair per registered parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    let norm = grad_norm(store);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for id in store.ids().collect::<Vec<_>>() {
            for g in store.get_mut(id).grad.data_mut() {
                *g *= s;
            }
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let p = store.get_mut(id);
        let (m, v) = (state.first[i].data_mut(), state.second[i].data_mut());
        for (j, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            *w -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
        p.grad.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("p", Tensor::scalar(value));
        s
    }

    #[test]
    fn first_step_hand_value() {
        let mut store = scalar_store(0.0);
        let id = store.find("p").unwrap();
        store.get_mut(id).grad = Tensor::scalar(1.0);
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig::default();
        adam_step(&mut store, &mut state, &cfg);
        let (b1, b2) = (0.9f64, 0.999f64);
        let m_hat = (1.0 - b1) / (1.0 - b1);
        let v_hat = (1.0 - b2) / (1.0 - b2);
        let want = -1e-4 * m_hat / (v_hat.sqrt() + 1e-8);
        assert_eq!(store.value(id).data()[0], want);
        assert!((want + 1e-4).abs() < 1e-11);
        assert_eq!(store.grad(id).data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameter_and_decays_moments() {
        let mut store = scalar_store(2.0);
        let id = store.find("p").unwrap();
        let mut state = AdamState::new(&store);
        state.first[0] = Tensor::scalar(0.5);
        state.second[0] = Tensor::scalar(0.5);
        state.step = 5;
        let before = store.value(id).data()[0];
        let cfg = AdamConfig { learning_rate: 1e-4, ..AdamConfig::default() };
        // With m != 0 the parameter moves, so check the pure zero case separately.
        let mut fresh = AdamState::new(&store);
        adam_step(&mut store, &mut fresh, &cfg);
        assert_eq!(store.value(id).data()[0], before);
        assert_eq!(fresh.first[0].data()[0], 0.0);
        adam_step(&mut store, &mut state, &cfg);
        assert_eq!(state.first[0].data()[0], 0.45);
        assert!(state.second[0].data()[0] < 0.5);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let mut store = scalar_store(0.0);
        let id = store.find("p").unwrap();
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig::default();
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..2000 {
            store.get_mut(id).grad = Tensor::scalar(-3.0);
            adam_step(&mut store, &mut state, &cfg);
            let now = store.value(id).data()[0];
            last_step = now - prev;
            prev = now;
        }
        assert!((last_step - 1e-4).abs() < 1e-9, "{last_step}");
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParamStore::new();
        let a = s.register("a", Tensor::zeros(&[2]));
        s.get_mut(a).grad = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        clip_gradients(&mut s, 1.0);
        assert!((grad_norm(&s) - 1.0).abs() < 1e-12);
        clip_gradients(&mut s, 10.0);
        assert!((grad_norm(&s) - 1.0).abs() < 1e-12);
    }
}

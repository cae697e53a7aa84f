use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First/second moment accumulators for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Ok(AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry
    /// are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in grads.iter() {
            if id.0 >= store.len() || store.get(id).shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for parameter {} has shape {:?}",
                    id.0,
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let (m, v) = (self.m[id.0].data_mut(), self.v[id.0].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;

    fn scalar_store(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p)).unwrap();
        s
    }

    fn grad(g: f64) -> Gradients {
        let mut gr = Gradients::default();
        gr.insert(ParamId(0), Tensor::scalar(g));
        gr
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::new(&s, AdamConfig::with_lr(0.1)).unwrap();
        st.step(&mut s, &grad(0.0)).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[1.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+ε).
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s, AdamConfig::with_lr(0.1)).unwrap();
        st.step(&mut s, &grad(1.0)).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(ParamId(0)).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s, AdamConfig::with_lr(0.1)).unwrap();
        let mut prev = 1.0;
        for _ in 0..2 {
            st.step(&mut s, &grad(1.0)).unwrap();
            let now = s.get(ParamId(0)).data()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut s = scalar_store(0.3);
        let mut st = AdamState::new(&s, AdamConfig::with_lr(0.0)).unwrap();
        for g in [1.0, -2.0, 5.0] {
            st.step(&mut s, &grad(g)).unwrap();
        }
        assert_eq!(s.get(ParamId(0)).data(), &[0.3]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut s = scalar_store(0.3);
        let mut st = AdamState::new(&s, AdamConfig::with_lr(0.1)).unwrap();
        let mut g = Gradients::default();
        g.insert(ParamId(0), Tensor::zeros(&[2]));
        assert!(st.step(&mut s, &g).is_err());
    }
}

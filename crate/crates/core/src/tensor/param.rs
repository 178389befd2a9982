use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{opcount, Gradients, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: ParamId,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns a model's trainable parameters and their accumulated gradients.
///
/// Parameters that received a gradient since the last [`sgd_step`] are
/// tracked as "touched"; only those are updated, so an update costs the same
/// no matter how many parameters sit off the current route.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    touched: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { id, value, grad });
        self.touched.push(false);
        id
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)) for a `[fan_out, fan_in]` matrix.
    pub fn add_glorot(&mut self, fan_out: usize, fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(&[fan_out, fan_in], |_| rng.gen_range(-bound..bound));
        self.add(t)
    }

    pub fn add_zeros(&mut self, shape: &[usize]) -> ParamId {
        self.add(Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_touched(&self, id: ParamId) -> bool {
        self.touched[id.0]
    }

    /// Adds `grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
            opcount::add(g.len());
            self.touched[id.0] = true;
        }
    }

    /// Multiplies every touched gradient by `s` (e.g. 1/batch for mean losses).
    pub fn scale_grads(&mut self, s: f64) {
        for (p, &t) in self.params.iter_mut().zip(&self.touched) {
            if t {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
                opcount::add(p.grad.len());
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for (p, t) in self.params.iter_mut().zip(self.touched.iter_mut()) {
            if *t {
                p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
                *t = false;
            }
        }
    }

    /// Replaces parameter values from `(id, tensor)` records, checking shapes.
    pub fn load_values(&mut self, records: Vec<(u64, Tensor)>) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, model has {}",
                records.len(),
                self.params.len()
            )));
        }
        for (id, t) in records {
            let p = self
                .params
                .get_mut(id as usize)
                .ok_or_else(|| Error::Lookup(format!("parameter id {id}")))?;
            if p.value.shape() != t.shape() {
                return Err(Error::dim("load_values", p.value.shape(), t.shape()));
            }
            p.value = t;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub anneal_every: usize,
    pub anneal_divisor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-2,
            anneal_every: 20,
            anneal_divisor: 10.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.anneal_every == 0 {
            return Err(Error::Config("anneal_every must be positive".into()));
        }
        if self.anneal_divisor.is_nan() || self.anneal_divisor < 1.0 {
            return Err(Error::Config(format!(
                "anneal_divisor must be >= 1, got {}",
                self.anneal_divisor
            )));
        }
        Ok(())
    }

    /// `learning_rate / anneal_divisor^floor(epoch / anneal_every)`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.anneal_every) as i32;
        self.learning_rate / self.anneal_divisor.powi(steps)
    }
}

/// Plain SGD on every touched parameter, then clears gradients.
pub fn sgd_step(store: &mut ParamStore, config: &SgdConfig, epoch: usize) {
    let lr = config.lr_at(epoch);
    for (p, t) in store.params.iter_mut().zip(store.touched.iter_mut()) {
        if !*t {
            continue;
        }
        let (v, g) = (p.value.data_mut(), p.grad.data_mut());
        for (w, gi) in v.iter_mut().zip(g.iter_mut()) {
            *w -= lr * *gi;
            *gi = 0.0;
        }
        opcount::add(2 * v.len());
        *t = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: f64, g: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(Tensor::scalar(w));
        s.params[0].grad = Tensor::scalar(g);
        s.touched[0] = true;
        (s, id)
    }

    #[test]
    fn sgd_arithmetic() {
        let (mut s, id) = store_with(1.0, 0.5);
        sgd_step(&mut s, &SgdConfig::default(), 0);
        assert!((s.value(id).data()[0] - 0.995).abs() < 1e-15);
        assert_eq!(s.grad(id).data()[0], 0.0);
    }

    #[test]
    fn annealing_schedule() {
        let c = SgdConfig::default();
        assert!((c.lr_at(19) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(20) - 0.001).abs() < 1e-15);
        assert!((c.lr_at(40) - 0.0001).abs() < 1e-16);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let (mut s, id) = store_with(0.123, 0.0);
        sgd_step(&mut s, &SgdConfig::default(), 3);
        assert_eq!(s.value(id).data()[0], 0.123);
    }

    #[test]
    fn untouched_params_are_skipped() {
        let mut s = ParamStore::new();
        let id = s.add(Tensor::scalar(2.0));
        s.params[0].grad = Tensor::scalar(1.0);
        sgd_step(&mut s, &SgdConfig::default(), 0);
        assert_eq!(s.value(id).data()[0], 2.0);
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            anneal_divisor: 0.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            anneal_every: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }
}

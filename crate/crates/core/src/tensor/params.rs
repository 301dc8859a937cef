use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub identifier: String,
    pub value: Tensor,
    pub gradient: Tensor,
    pub trainable: bool,
}

/// Owns every learnable tensor of a model, in creation order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, identifier: impl Into<String>, value: Tensor) -> ParamId {
        let identifier = identifier.into();
        assert!(
            !self.by_name.contains_key(&identifier),
            "duplicate parameter {identifier}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(identifier.clone(), id);
        self.params.push(Parameter {
            gradient: Tensor::zeros(value.shape().to_vec()),
            identifier,
            value,
            trainable: true,
        });
        id
    }

    /// Uniform in `[-s, s]` with `s = 1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        identifier: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
    ) -> ParamId {
        self.add_bounded(identifier, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    /// Uniform in `[-s, s]` with `s = sqrt(6/fan_in)`, which keeps the
    /// activation variance roughly constant through ReLU layers.
    pub fn add_he_uniform(
        &mut self,
        identifier: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
    ) -> ParamId {
        self.add_bounded(identifier, shape, (6.0 / fan_in.max(1) as f64).sqrt())
    }

    fn add_bounded(&mut self, identifier: impl Into<String>, shape: &[usize], s: f64) -> ParamId {
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-s..=s));
        self.add(identifier, value)
    }

    pub fn add_zeros(&mut self, identifier: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(identifier, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn lookup(&self, identifier: &str) -> Option<ParamId> {
        self.by_name.get(identifier).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Marks every parameter whose identifier starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.identifier.starts_with(prefix))
        {
            p.trainable = trainable;
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient = Tensor::zeros(p.value.shape().to_vec());
        }
    }

    /// Adds `grad` into the stored gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        assert_eq!(
            grad.len(),
            p.value.len(),
            "gradient length for {}",
            p.identifier
        );
        let mut g = std::mem::replace(&mut p.gradient, Tensor::scalar(0.0)).into_vec();
        g.iter_mut().zip(grad).for_each(|(a, b)| *a += b);
        p.gradient = Tensor::from_parts(p.value.shape().to_vec(), g);
    }

    /// Plain gradient descent on the trainable parameters.
    pub fn sgd_step(&mut self, learning_rate: f64) {
        if learning_rate == 0.0 {
            return;
        }
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let v: Vec<f64> = p
                .value
                .data()
                .iter()
                .zip(p.gradient.data())
                .map(|(v, g)| v - learning_rate * g)
                .collect();
            p.value = Tensor::from_parts(p.value.shape().to_vec(), v);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.gradient.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// `(identifier, value)` pairs in creation order.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.identifier.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites values from `(identifier, tensor)` records. Every
    /// parameter in the store must be present with a matching shape.
    pub fn load_values(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<&str, &Tensor> = records.iter().map(|(k, v)| (k.as_str(), v)).collect();
        for p in &mut self.params {
            let v = map.get(p.identifier.as_str()).ok_or_else(|| {
                Error::Config(format!("checkpoint lacks parameter {}", p.identifier))
            })?;
            if v.shape() != p.value.shape() {
                return Err(Error::dim("load_values", p.value.shape(), v.shape()));
            }
            p.value = (*v).clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_init_is_bounded_and_seeded() {
        let mut a = ParamStore::new(3);
        let mut b = ParamStore::new(3);
        let pa = a.add_uniform("w", &[4, 16], 16);
        let pb = b.add_uniform("w", &[4, 16], 16);
        assert_eq!(a.value(pa), b.value(pb));
        assert!(a.value(pa).data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn gradient_accumulates_and_resets() {
        let mut s = ParamStore::new(0);
        let p = s.add_zeros("p", &[2]);
        s.accumulate_grad(p, &[1.0, 2.0]);
        s.accumulate_grad(p, &[0.5, 0.5]);
        assert_eq!(s.get(p).gradient.data(), &[1.5, 2.5]);
        s.zero_grad();
        assert_eq!(s.get(p).gradient.data(), &[0.0, 0.0]);
        assert_eq!(s.get(p).gradient.shape(), s.get(p).value.shape());
    }

    #[test]
    fn frozen_parameters_ignore_sgd() {
        let mut s = ParamStore::new(0);
        let a = s.add_zeros("enc.a", &[1]);
        let b = s.add_zeros("desc.b", &[1]);
        s.set_trainable("enc.", false);
        s.accumulate_grad(a, &[1.0]);
        s.accumulate_grad(b, &[1.0]);
        s.sgd_step(0.5);
        assert_eq!(s.value(a).data(), &[0.0]);
        assert_eq!(s.value(b).data(), &[-0.5]);
    }
}

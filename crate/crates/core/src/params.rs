//! Named parameter storage.
//!
//! A [`ParamSet`] owns every learnable tensor of a model in a stable,
//! deterministic order. Network modules hold [`ParamId`] handles; forward
//! passes bind the whole set onto a tape once per pass and address weights
//! through the resulting [`TapeBinding`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named collection of learnable tensors.
pub struct ParamSet<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Register a tensor under a unique name. Panics on duplicates: parameter
    /// naming is a construction-time contract, not runtime input.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        tensor.requires_grad = true;
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copy values from `other` for every name both sets share with equal
    /// shapes; returns how many tensors were copied. Used to seed a model
    /// with weights trained under a different configuration, e.g. a
    /// single-frame pretrain of the shared encoder/decoder.
    pub fn copy_matching(&mut self, other: &ParamSet<S>) -> usize {
        let mut copied = 0;
        for id in 0..self.tensors.len() {
            let id = ParamId(id);
            let name = self.names[id.0].clone();
            if let Some(src) = other.find(&name) {
                if other.get(src).shape() == self.get(id).shape() {
                    let data = other.get(src).data().to_vec();
                    self.get_mut(id).data_mut().copy_from_slice(&data);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Register every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>) -> TapeBinding {
        TapeBinding {
            ids: self
                .tensors
                .iter()
                .map(|t| tape.input(t, true))
                .collect(),
        }
    }

    /// Copy gradients accumulated on a bound tape back into each parameter's
    /// `grad` buffer. Parameters untouched by the loss get a zero gradient.
    pub fn take_grads(&mut self, tape: &Tape<S>, binding: &TapeBinding) {
        for (i, tensor) in self.tensors.iter_mut().enumerate() {
            let grad = match tape.grad(binding.ids[i]) {
                Some(g) => g.to_vec(),
                None => vec![S::zero(); tensor.numel()],
            };
            tensor.grad = Some(grad);
        }
    }
}

/// Tape-local ids of every parameter in a [`ParamSet`], in set order.
pub struct TapeBinding {
    ids: Vec<TensorId>,
}

impl TapeBinding {
    pub fn id(&self, param: ParamId) -> TensorId {
        self.ids[param.0]
    }
}

/// Truncated-normal initializer (std 0.02, clipped at two standard
/// deviations), the transformer convention for projection weights.
pub fn trunc_normal_init<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let normal = Normal::new(0.0f64, std).expect("valid std");
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(S::from_f64(v));
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_and_take_grads_round_trip() {
        let mut set = ParamSet::<f64>::new();
        let a = set.add("a", Tensor::full(&[2], 3.0));
        let b = set.add("b", Tensor::full(&[2], 1.0));

        let mut tape = Tape::new();
        let binding = set.bind(&mut tape);
        let prod = tape.mul(binding.id(a), binding.id(a)).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        set.take_grads(&tape, &binding);

        assert_eq!(set.get(a).grad.as_deref().unwrap(), &[6.0, 6.0]);
        // b did not participate: zero gradient, not a missing one
        assert_eq!(set.get(b).grad.as_deref().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let mut set = ParamSet::<f64>::new();
        set.add("w", Tensor::zeros(&[1]));
        set.add("w", Tensor::zeros(&[1]));
    }

    #[test]
    fn trunc_normal_is_clipped_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = trunc_normal_init::<f64, _>(&mut rng, &[64, 64], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let t2 = trunc_normal_init::<f64, _>(&mut rng2, &[64, 64], 0.02);
        assert_eq!(t.data(), t2.data());
    }
}

//! Named parameter storage shared by every trainable component.
//!
//! Components keep [`ParamId`] handles into a single [`ParamSet`]; the autograd
//! graph borrows the set read-only and the optimizer is its only writer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as batch-norm running statistics are stored but never
    /// receive gradient updates.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable || !trainable_only)
            .map(|e| e.value.len())
            .sum()
    }

    /// Overwrite values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, archive holds {}",
                self.len(),
                other.len()
            )));
        }
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
            if src.value.shape() != e.value.shape() {
                return shape_err(format!(
                    "tensor {}: expected {:?}, archive has {:?}",
                    e.name,
                    e.value.shape(),
                    src.value.shape()
                ));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }
}

/// Uniform fan-in initialization, `U(-gain/sqrt(fan_in), gain/sqrt(fan_in))`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product agree")
}

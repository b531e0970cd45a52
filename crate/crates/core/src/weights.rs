//! Named, shaped parameter collections.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Init, ModelGraph, ParamKind};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry<T = f32> {
    pub name: String,
    pub dims: Vec<usize>,
    pub tensor: Tensor<T>,
}

/// Ordered parameter store. Entry order is the graph's registry order, which
/// is also the on-disk order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<T = f32> {
    entries: Vec<WeightEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for WeightStore<T> {
    fn default() -> Self {
        WeightStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

/// Maps up to four dims onto a rank-4 tensor shape, padding with ones.
pub fn dims_to_shape(dims: &[usize]) -> Result<Shape> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(Error::Other(format!("unsupported parameter rank {}", dims.len())));
    }
    let mut s = [1usize; 4];
    s[..dims.len()].copy_from_slice(dims);
    Ok(Shape::new(s[0], s[1], s[2], s[3]))
}

impl<T: Element> WeightStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Weight(format!("{name} (duplicate)")));
        }
        let tensor = Tensor::new(dims_to_shape(&dims)?, values).map_err(|_| Error::Weight(name.clone()))?;
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(WeightEntry { name, dims, tensor });
        Ok(())
    }

    /// Fresh parameters for `graph`: He-uniform for kernels, ones/zeros for
    /// normalization terms, zero biases.
    pub fn initialize(graph: &ModelGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for p in graph.params() {
            let n: usize = p.dims.iter().product();
            let values: Vec<T> = match p.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::HeUniform { fan_in } => {
                    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| T::from_f64(rng.gen_range(-limit..limit))).collect()
                }
            };
            store
                .insert(p.name.clone(), p.dims.clone(), values)
                .expect("graph registry names are unique");
        }
        store
    }

    pub fn get(&self, name: &str) -> Result<&WeightEntry<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Weight(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn values(&self, name: &str) -> Result<&[T]> {
        Ok(self.get(name)?.tensor.data())
    }

    pub fn values_mut(&mut self, name: &str) -> Result<&mut [T]> {
        let i = *self.index.get(name).ok_or_else(|| Error::Weight(name.to_string()))?;
        Ok(self.entries[i].tensor.data_mut())
    }

    pub fn entries(&self) -> &[WeightEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> WeightStore<U> {
        WeightStore {
            entries: self
                .entries
                .iter()
                .map(|e| WeightEntry {
                    name: e.name.clone(),
                    dims: e.dims.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Every registry entry of `graph` must be present with the same dims.
    pub fn check_against(&self, graph: &ModelGraph) -> Result<()> {
        for p in graph.params() {
            let e = self.get(&p.name)?;
            if e.dims != p.dims {
                return Err(Error::Weight(format!("{} has dims {:?}, graph expects {:?}", p.name, e.dims, p.dims)));
            }
        }
        Ok(())
    }

    /// Names of entries the optimizer should update.
    pub fn trainable_names<'a>(&'a self, graph: &'a ModelGraph) -> impl Iterator<Item = &'a str> + 'a {
        graph
            .params()
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.name.as_str())
    }
}

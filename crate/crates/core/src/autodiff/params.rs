use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// AdaGrad running sum of squared gradients.
    pub accum: Vec<f64>,
    /// EMA shadow of `value`.
    pub shadow: Vec<f64>,
    /// Row 0 is a padding row: held at zero and excluded from L2.
    pub pad_row: bool,
}

impl Param {
    fn new(name: String, value: Tensor, pad_row: bool) -> Self {
        let n = value.len();
        let shadow = value.data().to_vec();
        Param {
            name,
            value,
            grad: vec![0.0; n],
            accum: vec![0.0; n],
            shadow,
            pad_row,
        }
    }

    /// Number of leading elements that belong to the padding row.
    pub fn pad_len(&self) -> usize {
        if self.pad_row {
            self.value.cols()
        } else {
            0
        }
    }
}

/// Named set of learned tensors with optimizer buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    /// Adds an embedding table whose row 0 is padding.
    pub fn add_padded(&mut self, name: &str, mut value: Tensor) -> Result<ParamId> {
        let cols = value.cols();
        value.data_mut()[..cols].iter_mut().for_each(|v| *v = 0.0);
        self.insert(name, value, true)
    }

    fn insert(&mut self, name: &str, value: Tensor, pad_row: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Validation(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param::new(name.to_string(), value, pad_row));
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform(−scale, scale) initialisation.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = if scale > 0.0 {
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
        } else {
            vec![0.0; n]
        };
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// λ·Σ‖Θ‖² over every parameter, padding rows excluded.
    pub fn l2_norm_sq(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.value.data()[p.pad_len()..].iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Copy of the registry whose values are the EMA shadows.
    pub fn shadow_snapshot(&self) -> ParamRegistry {
        let mut out = self.clone();
        for p in &mut out.params {
            p.value.data_mut().copy_from_slice(&p.shadow);
        }
        out
    }

    /// Resets shadows to the current values.
    pub fn reset_shadows(&mut self) {
        for p in &mut self.params {
            p.shadow.copy_from_slice(p.value.data());
        }
    }

    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites values from a list of named tensors. Every registry entry
    /// must be present with a matching shape.
    pub fn load_values(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = (*t).clone();
            p.shadow.copy_from_slice(p.value.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut reg = ParamRegistry::new();
        reg.add("w", Tensor::zeros(&[1, 1])).unwrap();
        assert!(reg.add("w", Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn padded_tables_zero_row_zero() {
        let mut reg = ParamRegistry::new();
        let id = reg
            .add_padded("emb", Tensor::filled(&[3, 2], 1.0))
            .unwrap();
        assert_eq!(reg.value(id).row(0), &[0.0, 0.0]);
        assert_eq!(reg.l2_norm_sq(), 4.0);
    }

    #[test]
    fn buffers_match_shapes() {
        let mut reg = ParamRegistry::new();
        let id = reg.add("w", Tensor::zeros(&[4, 3])).unwrap();
        let p = reg.get(id);
        assert_eq!(p.grad.len(), 12);
        assert_eq!(p.accum.len(), 12);
        assert_eq!(p.shadow.len(), 12);
    }
}

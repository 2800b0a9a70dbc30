//! Named parameters and the weight-decay eligibility rule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub weight_decay_eligible: bool,
}

/// Weight decay is not applied to the feature tokenizer (including the CLS
/// embedding), categorical embedding tables, any normalization layer, or any
/// bias.
pub fn weight_decay_eligible(name: &str) -> bool {
    let mut segments = name.split('.');
    let last = name.rsplit('.').next().unwrap_or(name);
    if last == "bias" {
        return false;
    }
    !segments.any(|s| {
        s == "tokenizer" || s == "cat_embeddings" || s.ends_with("norm") || s.starts_with("norm")
    })
}

/// Ordered, uniquely named parameter collection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id.0);
        self.params.push(Parameter {
            weight_decay_eligible: weight_decay_eligible(&name),
            name,
            tensor: tensor.with_grad(),
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id_of(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn accumulate<'g>(&mut self, grads: impl IntoIterator<Item = (ParamId, &'g [f64])>) {
        for (id, g) in grads {
            self.params[id.0].tensor.accumulate_grad(g);
        }
    }

    /// Copy all values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Contract("parameter layouts differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Contract(format!("parameter `{}` layout differs", dst.name)));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eligibility_rule() {
        assert!(weight_decay_eligible("blocks.0.linear1.weight"));
        assert!(weight_decay_eligible("head.linear.weight"));
        assert!(!weight_decay_eligible("blocks.0.linear1.bias"));
        assert!(!weight_decay_eligible("tokenizer.num_weight"));
        assert!(!weight_decay_eligible("tokenizer.cls"));
        assert!(!weight_decay_eligible("layers.1.attention_norm.weight"));
        assert!(!weight_decay_eligible("blocks.2.norm.weight"));
        assert!(!weight_decay_eligible("cat_embeddings.0"));
    }

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::zeros(vec![2])).unwrap();
        assert!(s.add("a.weight", Tensor::zeros(vec![2])).is_err());
        assert_eq!(s.num_elements(), 2);
    }
}

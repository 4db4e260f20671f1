use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::tensor::Tensor;

/// A named weight tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T = f32> {
    name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::validation("parameter name must be non-empty"));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        Ok(Parameter { name, value, grad })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Ordered, uniquely named parameters of one model. This is the unit the
/// server broadcasts and averages.
///
/// Equality compares names, shapes and values; gradients are ignored.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<T = f32> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet { params: Vec::new() }
    }

    /// Builds a set from `(name, value)` pairs, rejecting empty or duplicate names.
    pub fn from_tensors<I, S>(tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Tensor<T>)>,
        S: Into<String>,
    {
        let mut set = ParameterSet::new();
        for (name, value) in tensors {
            set.push(Parameter::new(name, value)?)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, param: Parameter<T>) -> Result<usize> {
        if self.params.iter().any(|p| p.name == param.name) {
            return Err(Error::validation(format!(
                "duplicate parameter name {:?}",
                param.name
            )));
        }
        self.params.push(param);
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParameterSet<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Consistency(format!(
                "parameter count differs: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Consistency(format!(
                    "parameter layout differs: {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Overwrites values from `other`, which must share this set's layout.
    pub fn copy_values_from(&mut self, other: &ParameterSet<T>) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    /// Values only, with gradients reset to zero.
    pub fn values(&self) -> ParameterSet<T> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    grad: Tensor::zeros(p.value.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }

    /// Exact equality of names, shapes and value bit patterns.
    pub fn bit_eq(&self, other: &ParameterSet<T>) -> bool {
        self.check_layout(other).is_ok()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.widen().to_bits() == y.widen().to_bits())
            })
    }
}

impl<T: Scalar> std::ops::Index<usize> for ParameterSet<T> {
    type Output = Parameter<T>;

    fn index(&self, index: usize) -> &Parameter<T> {
        &self.params[index]
    }
}

impl<T: Scalar> std::ops::IndexMut<usize> for ParameterSet<T> {
    fn index_mut(&mut self, index: usize) -> &mut Parameter<T> {
        &mut self.params[index]
    }
}

impl<T: Scalar> PartialEq for ParameterSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

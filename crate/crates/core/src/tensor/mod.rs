//! Dense `f64` tensors, parameters and a small reverse-mode tape.

pub mod kernel;
pub mod optim;
pub mod tape;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DasError, Result};

pub use kernel::{count_macs, mac_count, reset_mac_count, sigmoid};
pub use optim::{AdamW, AdamWConfig, Optimizer, Sgd};
pub use tape::{Gradients, Tape, Var};

/// Dense row-major array with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        // Zero rows are allowed (an empty batch); zero-width dimensions are not.
        if shape.is_empty() || shape[1..].contains(&0) {
            return Err(DasError::Dimension {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(DasError::Dimension {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel]).expect("zeros: positive shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar shape")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DasError::usage("ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        let values = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::new(shape.to_vec(), values).expect("randn: positive shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(DasError::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.values[i * cols..(i + 1) * cols]
    }

    /// Eager matrix product (counted, not recorded).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (p, q) = self.dims2("matmul")?;
        let (q2, r) = other.dims2("matmul")?;
        if q != q2 {
            return Err(DasError::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let values = kernel::matmul_forward(p, q, r, &self.values, &other.values);
        Tensor::matrix(p, r, values)
    }

    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.dims2("add_bias")?;
        if bias.numel() != cols {
            return Err(DasError::Dimension {
                op: "add_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        Tensor::matrix(rows, cols, kernel::add_bias_forward(&self.values, cols, &bias.values))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(DasError::Dimension {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Tensor::new(self.shape.clone(), values)
    }

    pub fn relu(&self) -> Tensor {
        Tensor::new(self.shape.clone(), kernel::relu_forward(&self.values)).expect("same shape")
    }

    pub fn sigmoid(&self) -> Tensor {
        let values = self.values.iter().map(|&v| sigmoid(v)).collect();
        Tensor::new(self.shape.clone(), values).expect("same shape")
    }

    /// Euclidean norm of every row.
    pub fn row_norms(&self) -> Vec<f64> {
        let cols = self.shape[self.shape.len() - 1];
        self.values
            .chunks_exact(cols)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Rows selected by `indices`, in that order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2("gather_rows")?;
        let mut values = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(DasError::Index {
                    what: "rows",
                    index: i,
                    bound: rows,
                });
            }
            values.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), cols, values)
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (rows, classes) = logits.dims2("softmax_cross_entropy")?;
    check_labels(rows, classes, labels)?;
    Ok(kernel::softmax_xent_forward(&logits.values, classes, labels).1)
}

pub(crate) fn check_labels(rows: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != rows {
        return Err(DasError::Dimension {
            op: "softmax_cross_entropy",
            left: vec![rows, classes],
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(DasError::Index {
            what: "class labels",
            index: bad,
            bound: classes,
        });
    }
    Ok(())
}

/// A tensor owned by a model; frozen parameters never receive gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub tensor: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(mut tensor: Tensor, frozen: bool) -> Self {
        tensor.requires_grad = true;
        tensor.grad = None;
        Parameter { tensor, frozen }
    }

    pub fn accumulate_grad(&mut self, grad: &[f64]) {
        if self.frozen {
            return;
        }
        debug_assert_eq!(grad.len(), self.tensor.numel());
        match &mut self.tensor.grad {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => self.tensor.grad = Some(grad.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensor.grad = None;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.tensor.grad()
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.values()
    }
}

/// Role of a parameter inside a network; optimizers may use a learning rate per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Embed,
    Block,
    Adapter,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    group: ParamGroup,
    param: Parameter,
}

/// Named parameter arena.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        param: Parameter,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DasError::usage(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, group, param });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0].param
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0].param
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ParamGroup, &Parameter)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.group, &e.param))
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.param.zero_grad());
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for e in &mut self.entries {
            if e.group == group {
                e.param.frozen = frozen;
                e.param.zero_grad();
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.param.frozen)
            .map(|e| e.param.tensor.numel())
            .sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.param.frozen)
            .map(|e| e.param.tensor.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.param.tensor.numel()).sum()
    }

    /// Concatenated bytes of all frozen parameters, for freeze audits.
    pub fn frozen_fingerprint(&self) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|e| e.param.frozen)
            .flat_map(|e| e.param.tensor.values.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

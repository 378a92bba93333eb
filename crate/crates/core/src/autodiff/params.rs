use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Multiplier on the optimizer learning rate.
    pub lr_scale: f64,
}

/// Named parameter tensors, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

/// Handles to one batch-norm layer's tensors.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; panics on a duplicate name (a programming error).
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad, trainable, lr_scale: 1.0 });
        id
    }

    pub fn add_batch_norm(&mut self, prefix: &str, channels: usize) -> BatchNormParams {
        BatchNormParams {
            gamma: self.add(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: self.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: self.add(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: self.add(format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0), false),
        }
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn to_checkpoint(&self) -> String {
        let file = CheckpointFile {
            version: 1,
            params: self
                .params
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                    values: p.value.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, AutodiffError> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
        if file.version != 1 {
            return Err(AutodiffError::Checkpoint(format!("unknown version {}", file.version)));
        }
        let mut store = Self::new();
        for entry in file.params {
            if store.by_name.contains_key(&entry.name) {
                return Err(AutodiffError::Checkpoint(format!("duplicate parameter {}", entry.name)));
            }
            let value = Tensor::new(entry.shape, entry.values)?;
            store.add(entry.name, value, entry.trainable);
        }
        Ok(store)
    }

    /// Copies values for every name present in both stores with equal shape.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                let src = other.value(id);
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    values: Vec<f64>,
}

//! Named parameter tensors of one network.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, LayerKind, LayerSpec};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What a tensor does inside its layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
    Scale,
    Shift,
    Query,
    Key,
    Value,
    Output,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
            Role::Scale => "scale",
            Role::Shift => "shift",
            Role::Query => "query",
            Role::Key => "key",
            Role::Value => "value",
            Role::Output => "output",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "weight" => Role::Weight,
            "bias" => Role::Bias,
            "scale" => Role::Scale,
            "shift" => Role::Shift,
            "query" => Role::Query,
            "key" => Role::Key,
            "value" => Role::Value,
            "output" => Role::Output,
            other => return Err(Error::structural(format!("unknown tensor role `{other}`"))),
        })
    }
}

/// `(layer name, role)`; rendered as `layer.role` in containers.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: String,
    pub role: Role,
}

impl ParamKey {
    pub fn new(layer: impl Into<String>, role: Role) -> Self {
        Self {
            layer: layer.into(),
            role,
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.role)
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (layer, role) = s
            .rsplit_once('.')
            .ok_or_else(|| Error::structural(format!("malformed parameter name `{s}`")))?;
        Ok(Self::new(layer, role.parse()?))
    }
}

/// Tensor shapes a layer owns, in a fixed role order.
pub fn layer_param_shapes(layer: &LayerSpec) -> Vec<(Role, Vec<usize>)> {
    let mut out = Vec::new();
    match &layer.kind {
        LayerKind::Conv {
            kernel_size: k,
            in_channels,
            out_channels,
            ..
        } => {
            out.push((Role::Weight, vec![*out_channels, *in_channels, *k, *k]));
            if layer.has_bias {
                out.push((Role::Bias, vec![*out_channels]));
            }
        }
        LayerKind::Fc { n_input, n_output } => {
            out.push((Role::Weight, vec![*n_output, *n_input]));
            if layer.has_bias {
                out.push((Role::Bias, vec![*n_output]));
            }
        }
        LayerKind::Attention {
            heads,
            model_width,
            key_dim,
            value_dim,
        } => {
            out.push((Role::Query, vec![*heads, *model_width, *key_dim]));
            out.push((Role::Key, vec![*heads, *model_width, *key_dim]));
            out.push((Role::Value, vec![*heads, *model_width, *value_dim]));
            out.push((Role::Output, vec![heads * value_dim, *model_width]));
        }
        LayerKind::Norm { channels } => {
            out.push((Role::Scale, vec![*channels]));
            out.push((Role::Shift, vec![*channels]));
        }
    }
    out
}

/// All parameter tensors of one network.
#[derive(Clone, Debug)]
pub struct WeightSet<T> {
    arch: Arc<ArchSpec>,
    tensors: BTreeMap<ParamKey, Tensor<T>>,
}

impl<T: Scalar> PartialEq for WeightSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.tensors == other.tensors
    }
}

impl<T: Scalar> WeightSet<T> {
    /// Checks that `tensors` holds exactly the entries `arch` demands.
    pub fn new(arch: Arc<ArchSpec>, tensors: BTreeMap<ParamKey, Tensor<T>>) -> Result<Self> {
        let ws = Self { arch, tensors };
        ws.validate()?;
        Ok(ws)
    }

    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for layer in &self.arch.layers {
            for (role, shape) in layer_param_shapes(layer) {
                expected += 1;
                let key = ParamKey::new(&layer.name, role);
                let t = self.tensors.get(&key).ok_or_else(|| {
                    Error::structural(format!("layer `{}`: missing {key}", layer.name))
                })?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::structural(format!(
                        "layer `{}`: {key} has shape {:?}, expected {:?}",
                        layer.name,
                        t.shape(),
                        shape
                    )));
                }
                if !t.all_finite() {
                    return Err(Error::NonFinite(format!("layer `{}`: {key}", layer.name)));
                }
            }
        }
        if expected != self.tensors.len() {
            return Err(Error::structural(format!(
                "weight set has {} tensors, architecture needs {expected}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn zeros(arch: Arc<ArchSpec>) -> Self {
        let mut tensors = BTreeMap::new();
        for layer in &arch.layers {
            for (role, shape) in layer_param_shapes(layer) {
                tensors.insert(ParamKey::new(&layer.name, role), Tensor::zeros(&shape));
            }
        }
        Self { arch, tensors }
    }

    /// He-normal weights, zero biases, unit scales.
    pub fn init<R: Rng + ?Sized>(arch: Arc<ArchSpec>, rng: &mut R) -> Self {
        let mut tensors = BTreeMap::new();
        for layer in &arch.layers {
            for (role, shape) in layer_param_shapes(layer) {
                let t = match role {
                    Role::Weight => {
                        let fan_in: usize = shape[1..].iter().product();
                        Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), rng)
                    }
                    Role::Query | Role::Key | Role::Value => {
                        Tensor::randn(&shape, (1.0 / shape[1] as f64).sqrt(), rng)
                    }
                    Role::Output => Tensor::randn(&shape, (1.0 / shape[0] as f64).sqrt(), rng),
                    Role::Scale => Tensor::full(&shape, T::one()),
                    Role::Bias | Role::Shift => Tensor::zeros(&shape),
                };
                tensors.insert(ParamKey::new(&layer.name, role), t);
            }
        }
        Self { arch, tensors }
    }

    pub fn arch(&self) -> &Arc<ArchSpec> {
        &self.arch
    }

    pub fn get(&self, layer: &str, role: Role) -> Option<&Tensor<T>> {
        self.tensors.get(&ParamKey::new(layer, role))
    }

    pub fn tensor(&self, key: &ParamKey) -> Result<&Tensor<T>> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::structural(format!("missing tensor {key}")))
    }

    pub fn tensor_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(key)
    }

    /// Replaces one tensor, keeping its shape contract.
    pub fn set(&mut self, key: ParamKey, value: Tensor<T>) -> Result<()> {
        let cur = self.tensor(&key)?;
        if cur.shape() != value.shape() {
            return Err(Error::structural(format!(
                "{key}: shape {:?} does not match {:?}",
                value.shape(),
                cur.shape()
            )));
        }
        self.tensors.insert(key, value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// All scalars in key order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        WeightSet {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn to_params(&self, g: &Graph<T>) -> WeightVars {
        WeightVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Registers every tensor as a constant.
    pub fn to_constants(&self, g: &Graph<T>) -> WeightVars {
        WeightVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.constant(t.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a network's parameters.
#[derive(Clone, Debug, Default)]
pub struct WeightVars {
    vars: BTreeMap<ParamKey, Var>,
}

impl WeightVars {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ParamKey, v: Var) {
        self.vars.insert(key, v);
    }

    pub fn get(&self, layer: &str, role: Role) -> Result<Var> {
        self.vars
            .get(&ParamKey::new(layer, role))
            .copied()
            .ok_or_else(|| Error::structural(format!("layer `{layer}`: no {role} tensor supplied")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Reads current values back into a weight set.
    pub fn snapshot<T: Scalar>(&self, g: &Graph<T>, arch: Arc<ArchSpec>) -> Result<WeightSet<T>> {
        let tensors = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), g.value(*v).clone()))
            .collect();
        WeightSet::new(arch, tensors)
    }
}

/// Labelled inputs `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 4 {
            return Err(Error::structural(format!(
                "batch inputs must be [B,C,H,W], got {:?}",
                inputs.shape()
            )));
        }
        if inputs.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::structural(format!(
                "batch of {} inputs with {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks labels against a class count.
    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= num_classes) {
            Some(y) => Err(Error::structural(format!(
                "label {y} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }
}

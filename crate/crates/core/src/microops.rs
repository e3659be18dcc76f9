//! Operation-level view of a model.
//!
//! PReLU layers are split into the primitive arithmetic of the TensorFlow
//! graph so faults can be aimed at individual operation kinds:
//!
//! ```text
//!   relu = ReLU(x)          abs = Abs(x)
//!                           sub = Sub(x, abs)
//!                           mul = Mul(alpha, sub)
//!                           half = ConstMul(mul, 0.5)
//!   out = Add(relu, half)
//! ```
//!
//! A standalone ReLU layer becomes a single ReLU op. Every other layer is
//! kept as one opaque op that cannot be targeted.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::layers::{broadcast_offsets, forward_layer, relu_scalar, LayerKind};
use crate::model::{Model, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{element_count, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MicroOpKind {
    Add,
    Sub,
    Mul,
    #[serde(rename = "ReLU")]
    Relu,
    Abs,
    ConstMul,
}

impl MicroOpKind {
    pub const ALL: [MicroOpKind; 6] = [
        MicroOpKind::Add,
        MicroOpKind::Sub,
        MicroOpKind::Mul,
        MicroOpKind::Relu,
        MicroOpKind::Abs,
        MicroOpKind::ConstMul,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MicroOpKind::Add => "Add",
            MicroOpKind::Sub => "Sub",
            MicroOpKind::Mul => "Mul",
            MicroOpKind::Relu => "ReLU",
            MicroOpKind::Abs => "Abs",
            MicroOpKind::ConstMul => "ConstMul",
        }
    }
}

impl fmt::Display for MicroOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MicroOpKind {
    type Err = String;

    /// Case-insensitive.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown operation kind `{s}` (expected one of Add, Sub, Mul, ReLU, Abs, ConstMul)"))
    }
}

/// Where an operand comes from, relative to the enclosing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    LayerInput,
    /// Output of an earlier op in the same layer block.
    Local(usize),
    /// The PReLU slope parameter of the layer.
    Alpha,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MicroOp<T> {
    /// A whole layer evaluated as one step.
    Opaque,
    Relu(Operand),
    Abs(Operand),
    Sub(Operand, Operand),
    Mul(Operand, Operand),
    ConstMul(Operand, T),
    Add(Operand, Operand),
}

impl<T> MicroOp<T> {
    pub fn kind(&self) -> Option<MicroOpKind> {
        Some(match self {
            MicroOp::Opaque => return None,
            MicroOp::Relu(_) => MicroOpKind::Relu,
            MicroOp::Abs(_) => MicroOpKind::Abs,
            MicroOp::Sub(..) => MicroOpKind::Sub,
            MicroOp::Mul(..) => MicroOpKind::Mul,
            MicroOp::ConstMul(..) => MicroOpKind::ConstMul,
            MicroOp::Add(..) => MicroOpKind::Add,
        })
    }
}

/// The ops standing in for one layer. The block's output is its last op.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock<T> {
    pub layer: usize,
    pub ops: Vec<MicroOp<T>>,
    /// Global id of `ops[0]`; ids increase by one per op across the model.
    pub first_site: usize,
    /// For PReLU blocks, the alpha offset paired with each input element.
    alpha_offsets: Option<Vec<usize>>,
}

/// A targetable op instance: executed once per inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub id: usize,
    pub kind: MicroOpKind,
    pub layer: usize,
    /// Element count of the op's output tensor.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroOpModel<T> {
    model: Model<T>,
    blocks: Vec<LayerBlock<T>>,
    sites: Vec<Site>,
}

/// Expands every PReLU (and ReLU) layer of `model` into primitive ops.
pub fn expand_prelu<T: Scalar>(model: &Model<T>) -> MicroOpModel<T> {
    use Operand::*;
    let half = T::from_f64(0.5).unwrap();
    let mut blocks = Vec::with_capacity(model.layer_count());
    let mut sites = Vec::new();
    let mut next_site = 0;
    for (index, layer) in model.layers().iter().enumerate() {
        let input_shape = model.layer_input_shape(index).expect("index in range");
        let (ops, alpha_offsets) = match &layer.kind {
            LayerKind::PRelu { alpha } => (
                vec![
                    MicroOp::Relu(LayerInput),
                    MicroOp::Abs(LayerInput),
                    MicroOp::Sub(LayerInput, Local(1)),
                    MicroOp::Mul(Alpha, Local(2)),
                    MicroOp::ConstMul(Local(3), half),
                    MicroOp::Add(Local(0), Local(4)),
                ],
                Some(broadcast_offsets(input_shape, alpha.shape()).expect("validated by Model::new")),
            ),
            LayerKind::Relu => (vec![MicroOp::Relu(LayerInput)], None),
            _ => (vec![MicroOp::Opaque], None),
        };
        let len = element_count(input_shape);
        for (i, op) in ops.iter().enumerate() {
            if let Some(kind) = op.kind() {
                sites.push(Site {
                    id: next_site + i,
                    kind,
                    layer: index,
                    len,
                });
            }
        }
        blocks.push(LayerBlock {
            layer: index,
            first_site: next_site,
            ops,
            alpha_offsets,
        });
        next_site += blocks.last().unwrap().ops.len();
    }
    MicroOpModel {
        model: model.clone(),
        blocks,
        sites,
    }
}

impl<T: Scalar> MicroOpModel<T> {
    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn blocks(&self) -> &[LayerBlock<T>] {
        &self.blocks
    }

    /// Total op count, opaque ops included.
    pub fn op_count(&self) -> usize {
        self.blocks.iter().map(|b| b.ops.len()).sum()
    }

    /// Every targetable op instance, in execution order.
    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    /// Number of executions per inference of ops whose kind is in `kinds`.
    pub fn count_kind(&self, kinds: &BTreeSet<MicroOpKind>) -> usize {
        self.sites.iter().filter(|s| kinds.contains(&s.kind)).count()
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.forward_with(input, |_, _| {})
    }

    /// Evaluates the op graph, calling `hook` on the output of every
    /// primitive op before later ops read it.
    pub fn forward_with<F>(&self, input: &Tensor<T>, mut hook: F) -> Result<Tensor<T>, ModelError>
    where
        F: FnMut(&Site, &mut Tensor<T>),
    {
        if input.shape() != self.model.input_shape() {
            return Err(ModelError::ModelInput {
                expected: self.model.input_shape().to_vec(),
                found: input.shape().to_vec(),
            });
        }
        let mut x = input.clone();
        let mut site_cursor = 0;
        for block in &self.blocks {
            let layer = &self.model.layers()[block.layer];
            if block.ops == [MicroOp::Opaque] {
                x = forward_layer(layer, &x)?;
                continue;
            }
            let alpha = match &layer.kind {
                LayerKind::PRelu { alpha } => Some(alpha),
                _ => None,
            };
            let mut values: Vec<Tensor<T>> = Vec::with_capacity(block.ops.len());
            for op in &block.ops {
                let mut out = self.eval_op(op, &x, &values, alpha, block.alpha_offsets.as_deref());
                let site = &self.sites[site_cursor];
                site_cursor += 1;
                hook(site, &mut out);
                values.push(out);
            }
            x = values.pop().expect("non-empty block");
        }
        Ok(x)
    }

    fn eval_op(
        &self,
        op: &MicroOp<T>,
        input: &Tensor<T>,
        values: &[Tensor<T>],
        alpha: Option<&Tensor<T>>,
        alpha_offsets: Option<&[usize]>,
    ) -> Tensor<T> {
        let fetch = |operand: Operand| -> &[T] {
            match operand {
                Operand::LayerInput => input.data(),
                Operand::Local(i) => values[i].data(),
                Operand::Alpha => unreachable!("alpha is only read through broadcast"),
            }
        };
        let data: Vec<T> = match *op {
            MicroOp::Opaque => unreachable!("opaque blocks are evaluated as layers"),
            MicroOp::Relu(a) => fetch(a).iter().map(|&v| relu_scalar(v)).collect(),
            MicroOp::Abs(a) => fetch(a).iter().map(|v| v.abs()).collect(),
            MicroOp::Sub(a, b) => fetch(a).iter().zip(fetch(b)).map(|(&l, &r)| l - r).collect(),
            MicroOp::Add(a, b) => fetch(a).iter().zip(fetch(b)).map(|(&l, &r)| l + r).collect(),
            MicroOp::ConstMul(a, c) => fetch(a).iter().map(|&v| v * c).collect(),
            MicroOp::Mul(Operand::Alpha, b) => {
                let alpha = alpha.expect("Mul by alpha outside a PReLU block").data();
                let offsets = alpha_offsets.expect("alpha offsets");
                fetch(b).iter().zip(offsets).map(|(&v, &o)| alpha[o] * v).collect()
            }
            MicroOp::Mul(a, b) => fetch(a).iter().zip(fetch(b)).map(|(&l, &r)| l * r).collect(),
        };
        Tensor::new(input.shape().to_vec(), data).expect("elementwise ops keep shape")
    }
}

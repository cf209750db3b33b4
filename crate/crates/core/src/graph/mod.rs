//! Dataflow IR for encoder inference and its INT8 lowering pipeline.
//!
//! A [`Graph`] is a topologically ordered list of [`Node`]s. Every node
//! produces one value, named by the node id; graph inputs live in the same
//! namespace. Weights are referenced by name and resolved at execution time
//! through a [`WeightSource`], so one weight store can back many graphs.
//!
//! The pipeline is: f32 graph, then [`lower_to_int8`] (each GEMM wrapped in
//! Quantize / Dequantize), then [`optimize`] (redundant quantization
//! removed, epilogues fused into the GEMM, dead nodes dropped).

mod exec;
mod lower;
mod ops;
mod optimize;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{BlockSparseWeight, DenseI8Weight, QuantWeightRef};
use crate::pruner::BlockMask;
use crate::tensor::{DynTensor, QuantParams, Tensor};

pub use exec::{collect_calibration, execute, execute_with, ExecOptions, ExecStats, NamedTensors};
pub use lower::lower_to_int8;
pub use optimize::{dead_code_elimination, eliminate_redundant_quantization, fuse_post_ops, optimize};

/// A stored model weight.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    /// Plain tensor of any dtype (f32 GEMM weights, biases, norms).
    Dense(DynTensor),
    /// f32 weight whose zero blocks follow `mask`.
    Pruned { weight: Tensor<f32>, mask: BlockMask },
    QuantDense(DenseI8Weight),
    Sparse(BlockSparseWeight),
}

impl Weight {
    pub fn payload_bytes(&self) -> usize {
        match self {
            Weight::Dense(t) => t.byte_len(),
            Weight::Pruned { weight, mask } => weight.len() * 4 + mask.total_blocks().div_ceil(8),
            Weight::QuantDense(w) => w.data().len() + w.qparams().scales().len() * 4,
            Weight::Sparse(w) => w.byte_size(),
        }
    }

    pub fn as_f32(&self) -> Option<&Tensor<f32>> {
        match self {
            Weight::Dense(DynTensor::F32(t)) => Some(t),
            Weight::Pruned { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn as_quant(&self) -> Option<QuantWeightRef<'_>> {
        match self {
            Weight::QuantDense(w) => Some(QuantWeightRef::Dense(w)),
            Weight::Sparse(w) => Some(QuantWeightRef::Sparse(w)),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Weight::Dense(_) => "dense",
            Weight::Pruned { .. } => "pruned",
            Weight::QuantDense(_) => "quant_dense",
            Weight::Sparse(_) => "sparse",
        }
    }
}

/// Name-to-weight lookup used by the executor.
pub trait WeightSource: Sync {
    fn weight(&self, name: &str) -> Option<&Weight>;
}

impl WeightSource for BTreeMap<String, Weight> {
    fn weight(&self, name: &str) -> Option<&Weight> {
        self.get(name)
    }
}

/// Step of a GEMM epilogue, applied in order to the GEMM result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Epilogue {
    Dequantize,
    BiasAdd { bias: String },
    Gelu,
    Relu,
    Reshape { shape: Vec<i64> },
    LayerNorm { gamma: String, beta: String, eps: f32 },
    Quantize { qparams: QuantParams },
}

impl Epilogue {
    pub fn name(&self) -> &'static str {
        match self {
            Epilogue::Dequantize => "dequantize",
            Epilogue::BiasAdd { .. } => "bias_add",
            Epilogue::Gelu => "gelu",
            Epilogue::Relu => "relu",
            Epilogue::Reshape { .. } => "reshape",
            Epilogue::LayerNorm { .. } => "layernorm",
            Epilogue::Quantize { .. } => "quantize",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    /// `y[.., m] = sum_k x[.., k] * W[m][k]`; f32 or INT8 by weight type.
    InnerProduct {
        weight: String,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        epilogue: Vec<Epilogue>,
        /// The f32 node this INT8 node was lowered from.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<Box<Node>>,
    },
    /// Batched `[.., M, K] x [.., K, N]`; INT8 when both inputs are quantized.
    MatMul {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        epilogue: Vec<Epilogue>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<Box<Node>>,
    },
    BiasAdd { bias: String },
    LayerNorm { gamma: String, beta: String, eps: f32 },
    Softmax,
    Gelu,
    Relu,
    /// Target shape; `0` copies the input extent, `-1` is inferred.
    Reshape { shape: Vec<i64> },
    Quantize { qparams: QuantParams },
    Dequantize,
    Add,
    Transpose { perm: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    InnerProduct,
    MatMul,
    BiasAdd,
    LayerNorm,
    Softmax,
    Gelu,
    Relu,
    Reshape,
    Quantize,
    Dequantize,
    Add,
    Transpose,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::InnerProduct { .. } => OpKind::InnerProduct,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BiasAdd { .. } => OpKind::BiasAdd,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax => OpKind::Softmax,
            Op::Gelu => OpKind::Gelu,
            Op::Relu => OpKind::Relu,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Quantize { .. } => OpKind::Quantize,
            Op::Dequantize => OpKind::Dequantize,
            Op::Add => OpKind::Add,
            Op::Transpose { .. } => OpKind::Transpose,
        }
    }

    pub fn inner_product(weight: impl Into<String>) -> Self {
        Op::InnerProduct {
            weight: weight.into(),
            epilogue: Vec::new(),
            source: None,
        }
    }

    pub fn matmul() -> Self {
        Op::MatMul {
            epilogue: Vec::new(),
            source: None,
        }
    }

    pub fn epilogue(&self) -> &[Epilogue] {
        match self {
            Op::InnerProduct { epilogue, .. } | Op::MatMul { epilogue, .. } => epilogue,
            _ => &[],
        }
    }

    /// Weight names this op reads.
    pub fn weight_refs(&self) -> Vec<&str> {
        fn epi_refs<'a>(refs: &mut Vec<&'a str>, e: &'a Epilogue) {
            match e {
                Epilogue::BiasAdd { bias } => refs.push(bias),
                Epilogue::LayerNorm { gamma, beta, .. } => {
                    refs.push(gamma);
                    refs.push(beta);
                }
                _ => {}
            }
        }
        let mut refs = Vec::new();
        match self {
            Op::InnerProduct { weight, epilogue, .. } => {
                refs.push(weight.as_str());
                epilogue.iter().for_each(|e| epi_refs(&mut refs, e));
            }
            Op::MatMul { epilogue, .. } => epilogue.iter().for_each(|e| epi_refs(&mut refs, e)),
            Op::BiasAdd { bias } => refs.push(bias),
            Op::LayerNorm { gamma, beta, .. } => {
                refs.push(gamma);
                refs.push(beta);
            }
            _ => {}
        }
        refs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    #[serde(flatten)]
    pub op: Op,
    pub inputs: Vec<String>,
}

impl Node {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

/// Named graph input; `None` extents are dynamic (batch, sequence).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInput {
    pub name: String,
    pub shape: Vec<Option<usize>>,
}

/// What a value holds, inferred statically from the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    F32,
    Quantized,
    Accumulator,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub inputs: Vec<GraphInput>,
    pub outputs: Vec<String>,
    pub weights: BTreeMap<String, Weight>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_input(&mut self, name: impl Into<String>, shape: Vec<Option<usize>>) -> String {
        let name = name.into();
        self.inputs.push(GraphInput {
            name: name.clone(),
            shape,
        });
        name
    }

    /// Appends a node and returns its id.
    pub fn add(&mut self, id: impl Into<String>, op: Op, inputs: &[&str]) -> String {
        let node = Node::new(id, op, inputs);
        let id = node.id.clone();
        self.nodes.push(node);
        id
    }

    pub fn add_weight(&mut self, name: impl Into<String>, weight: Weight) -> String {
        let name = name.into();
        self.weights.insert(name.clone(), weight);
        name
    }

    pub fn set_outputs(&mut self, outputs: &[&str]) {
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// True when nodes, inputs and outputs agree (weights ignored).
    pub fn structure_eq(&self, other: &Graph) -> bool {
        self.nodes == other.nodes && self.inputs == other.inputs && self.outputs == other.outputs
    }

    /// Ids of every consumer of `value`, in node order.
    pub fn consumers(&self, value: &str) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.iter().any(|i| i == value))
            .map(|(i, _)| i)
            .collect()
    }

    pub(crate) fn use_counts(&self) -> HashMap<&str, usize> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for n in &self.nodes {
            for i in &n.inputs {
                *counts.entry(i.as_str()).or_default() += 1;
            }
        }
        for o in &self.outputs {
            *counts.entry(o.as_str()).or_default() += 1;
        }
        counts
    }

    pub(crate) fn replace_uses(&mut self, old: &str, new: &str) {
        for n in &mut self.nodes {
            for i in &mut n.inputs {
                if i == old {
                    *i = new.to_string();
                }
            }
        }
        for o in &mut self.outputs {
            if o == old {
                *o = new.to_string();
            }
        }
    }

    /// Checks ids are unique and every reference points backwards.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for input in &self.inputs {
            if !seen.insert(&input.name) {
                return Err(Error::InvalidGraph(format!("duplicate name `{}`", input.name)));
            }
        }
        for n in &self.nodes {
            for i in &n.inputs {
                if !seen.contains(i.as_str()) {
                    return Err(Error::InvalidGraph(format!(
                        "node `{}` reads `{i}` before it is defined",
                        n.id
                    )));
                }
            }
            let arity = match n.kind() {
                OpKind::MatMul | OpKind::Add => 2,
                _ => 1,
            };
            if n.inputs.len() != arity {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` ({}) takes {arity} inputs, has {}",
                    n.id,
                    n.kind(),
                    n.inputs.len()
                )));
            }
            if !seen.insert(&n.id) {
                return Err(Error::InvalidGraph(format!("duplicate name `{}`", n.id)));
            }
        }
        for o in &self.outputs {
            if !seen.contains(o.as_str()) {
                return Err(Error::InvalidGraph(format!("output `{o}` is undefined")));
            }
        }
        Ok(())
    }

    /// Every weight name referenced by a node (fallback sources included).
    pub fn weight_refs(&self) -> Vec<String> {
        let mut refs = Vec::new();
        let push_node = |n: &Node, refs: &mut Vec<String>| {
            refs.extend(n.op.weight_refs().into_iter().map(str::to_string));
        };
        for n in &self.nodes {
            push_node(n, &mut refs);
            if let Op::InnerProduct { source: Some(src), .. } | Op::MatMul { source: Some(src), .. } = &n.op {
                push_node(src, &mut refs);
            }
        }
        refs.sort();
        refs.dedup();
        refs
    }

    /// Drops weights no node refers to.
    pub fn prune_unused_weights(&mut self) {
        let used: HashSet<String> = self.weight_refs().into_iter().collect();
        self.weights.retain(|k, _| used.contains(k));
    }

    /// Value kind of every input and node output.
    pub fn value_kinds(&self, weights: &dyn WeightSource) -> HashMap<String, ValueKind> {
        let mut kinds: HashMap<String, ValueKind> =
            self.inputs.iter().map(|i| (i.name.clone(), ValueKind::F32)).collect();
        for n in &self.nodes {
            let input_kind = |i: usize| n.inputs.get(i).and_then(|v| kinds.get(v)).copied();
            let base = match &n.op {
                Op::InnerProduct { weight, .. } => {
                    if weights.weight(weight).and_then(Weight::as_quant).is_some() {
                        ValueKind::Accumulator
                    } else {
                        ValueKind::F32
                    }
                }
                Op::MatMul { .. } => {
                    if input_kind(0) == Some(ValueKind::Quantized) && input_kind(1) == Some(ValueKind::Quantized) {
                        ValueKind::Accumulator
                    } else {
                        ValueKind::F32
                    }
                }
                Op::Quantize { .. } => ValueKind::Quantized,
                Op::Reshape { .. } | Op::Transpose { .. } => input_kind(0).unwrap_or(ValueKind::F32),
                _ => ValueKind::F32,
            };
            let kind = n.op.epilogue().iter().fold(base, |k, e| match e {
                Epilogue::Quantize { .. } => ValueKind::Quantized,
                Epilogue::Reshape { .. } => k,
                _ => ValueKind::F32,
            });
            kinds.insert(n.id.clone(), kind);
        }
        kinds
    }

    /// Ids under which each lowered GEMM can be reverted to f32.
    ///
    /// These are the ids of the Dequantize nodes that close a lowered GEMM,
    /// which are also the ids of the original f32 GEMM nodes.
    pub fn quantized_gemm_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.kind() == OpKind::Dequantize)
            .filter(|n| {
                self.node(&n.inputs[0])
                    .is_some_and(|g| matches!(&g.op, Op::InnerProduct { source: Some(_), .. } | Op::MatMul { source: Some(_), .. }))
            })
            .map(|n| n.id.clone())
            .collect()
    }

    /// Replaces the lowered GEMM closed by Dequantize node `id` with its
    /// original f32 node and removes the now-dead quantization nodes.
    pub fn revert_to_f32(&self, id: &str) -> Result<Graph> {
        let pos = self
            .position(id)
            .ok_or_else(|| Error::InvalidGraph(format!("no node `{id}`")))?;
        let gemm_id = &self.nodes[pos].inputs[0];
        let source = match self.node(gemm_id).map(|g| &g.op) {
            Some(Op::InnerProduct { source: Some(src), .. }) | Some(Op::MatMul { source: Some(src), .. })
                if self.nodes[pos].kind() == OpKind::Dequantize =>
            {
                src.as_ref().clone()
            }
            _ => {
                return Err(Error::InvalidGraph(format!(
                    "`{id}` does not close a lowered GEMM"
                )))
            }
        };
        let mut g = self.clone();
        g.nodes[pos] = Node {
            id: id.to_string(),
            ..source
        };
        dead_code_elimination(&mut g);
        g.validate()?;
        Ok(g)
    }

    /// Drops the f32 revert targets of lowered GEMMs and any weight that
    /// only they referenced.
    pub fn strip_fallbacks(&mut self) {
        for n in &mut self.nodes {
            if let Op::InnerProduct { source, .. } | Op::MatMul { source, .. } = &mut n.op {
                *source = None;
            }
        }
        self.prune_unused_weights();
    }

    /// One line per node: `id = Kind(inputs) [fused epilogue]`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for input in &self.inputs {
            let dims: Vec<String> = input
                .shape
                .iter()
                .map(|d| d.map_or("?".to_string(), |d| d.to_string()))
                .collect();
            let _ = writeln!(out, "input {} [{}]", input.name, dims.join(", "));
        }
        for n in &self.nodes {
            let _ = write!(out, "{} = {}({})", n.id, n.kind(), n.inputs.join(", "));
            let epi = n.op.epilogue();
            if !epi.is_empty() {
                let names: Vec<&str> = epi.iter().map(Epilogue::name).collect();
                let _ = write!(out, " [{}]", names.join(", "));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "output {}", self.outputs.join(", "));
        out
    }
}

impl fmt::Display for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Graph {
        let mut g = Graph::new();
        g.add_input("x", vec![None, Some(4)]);
        g.add("ip", Op::inner_product("w"), &["x"]);
        g.add("b", Op::BiasAdd { bias: "bias".into() }, &["ip"]);
        g.add("act", Op::Gelu, &["b"]);
        g.set_outputs(&["act"]);
        g
    }

    #[test]
    fn validate_accepts_topological_graph() {
        chain().validate().unwrap();
    }

    #[test]
    fn validate_rejects_forward_reference() {
        let mut g = chain();
        g.nodes.swap(0, 1);
        assert!(matches!(g.validate(), Err(Error::InvalidGraph(_))));
        let mut g = chain();
        g.outputs.push("nope".into());
        assert!(g.validate().is_err());
        let mut g = chain();
        g.nodes[2].inputs.push("x".into());
        assert!(g.validate().is_err());
    }

    #[test]
    fn dump_format() {
        let mut g = chain();
        if let Op::InnerProduct { epilogue, .. } = &mut g.nodes[0].op {
            epilogue.push(Epilogue::Relu);
        }
        assert_eq!(
            g.dump(),
            "input x [?, 4]\nip = InnerProduct(x) [relu]\nb = BiasAdd(ip)\nact = Gelu(b)\noutput act\n"
        );
    }

    #[test]
    fn weight_refs_are_collected() {
        assert_eq!(chain().weight_refs(), vec!["bias".to_string(), "w".to_string()]);
    }

    #[test]
    fn node_json_shape() {
        let n = Node::new("b", Op::BiasAdd { bias: "bias".into() }, &["ip"]);
        let json = serde_json::to_string(&n).unwrap();
        assert_eq!(json, r#"{"id":"b","kind":"bias_add","bias":"bias","inputs":["ip"]}"#);
        let back: Node = serde_json::from_str(&json).unwrap();
        assert_eq!(back, n);
    }
}

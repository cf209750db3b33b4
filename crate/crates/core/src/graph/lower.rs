//! f32 to INT8 lowering.

use std::collections::HashMap;

use super::{Graph, Node, Op, Weight};
use crate::error::{Error, Result};
use crate::kernels::{compress_weight, DenseI8Weight};
use crate::quantizer::{derive_qparams, quantize_as, CalibrationStats, QuantScheme};
use crate::tensor::Tensor;

/// Symmetric per-output-channel `i8` version of an f32 GEMM weight.
///
/// Pruned weights become block-sparse; dense ones keep a dense layout.
pub fn quantize_weight(w: &Weight) -> Result<Weight> {
    let f = w
        .as_f32()
        .ok_or_else(|| Error::Shape(format!("cannot quantize a {} weight", w.kind_name())))?;
    f.dims2()?;
    let mut stats = CalibrationStats::per_channel(0);
    stats.observe(f)?;
    let qp = derive_qparams(&stats, QuantScheme::SymmetricI8)?;
    let q: Tensor<i8> = quantize_as(f, &qp)?;
    Ok(match w {
        Weight::Pruned { mask, .. } => Weight::Sparse(compress_weight(&q, mask, &qp)?),
        _ => Weight::QuantDense(DenseI8Weight::new(q, qp)?),
    })
}

fn activation_qparams(
    stats: &HashMap<String, CalibrationStats>,
    edge: &str,
    scheme: QuantScheme,
) -> Result<crate::tensor::QuantParams> {
    let s = stats
        .get(edge)
        .ok_or_else(|| Error::CalibrationCoverage(edge.to_string()))?;
    derive_qparams(s, scheme)
}

/// Wraps every f32 GEMM in Quantize / INT8 GEMM / Dequantize.
///
/// A lowered node `id` becomes `{id}.q` (or `{id}.qa` and `{id}.qb` for a
/// matmul), `{id}.int8`, and a Dequantize that keeps the id `id`, so all
/// consumers are untouched. The INT8 GEMM remembers the original node so
/// it can be reverted. Weights are quantized into `{name}.int8`; the f32
/// originals stay in the graph as revert targets.
pub fn lower_to_int8(g: &Graph, stats: &HashMap<String, CalibrationStats>) -> Result<Graph> {
    g.validate()?;
    let kinds = g.value_kinds(&g.weights);
    let mut out = Graph {
        nodes: Vec::with_capacity(g.nodes.len() * 2),
        inputs: g.inputs.clone(),
        outputs: g.outputs.clone(),
        weights: g.weights.clone(),
    };
    for node in &g.nodes {
        if !node.op.epilogue().is_empty() {
            return Err(Error::InvalidGraph(format!(
                "node `{}` already carries a fused epilogue; lower before optimizing",
                node.id
            )));
        }
        let id = &node.id;
        let is_f32 = |v: &String| kinds.get(v) == Some(&super::ValueKind::F32);
        match &node.op {
            Op::InnerProduct { weight, .. } => {
                let w = g.weights.get(weight).ok_or_else(|| Error::Binding(weight.clone()))?;
                if w.as_f32().is_none() || !is_f32(&node.inputs[0]) {
                    out.nodes.push(node.clone());
                    continue;
                }
                let qname = format!("{weight}.int8");
                if !out.weights.contains_key(&qname) {
                    out.weights.insert(qname.clone(), quantize_weight(w)?);
                }
                let qp = activation_qparams(stats, &node.inputs[0], QuantScheme::AsymmetricU8)?;
                let q_id = format!("{id}.q");
                let gemm_id = format!("{id}.int8");
                out.add(&q_id, Op::Quantize { qparams: qp }, &[&node.inputs[0]]);
                out.nodes.push(Node {
                    id: gemm_id.clone(),
                    op: Op::InnerProduct {
                        weight: qname,
                        epilogue: Vec::new(),
                        source: Some(Box::new(node.clone())),
                    },
                    inputs: vec![q_id],
                });
                out.add(id, Op::Dequantize, &[&gemm_id]);
            }
            Op::MatMul { .. } if node.inputs.iter().all(is_f32) => {
                let qa = activation_qparams(stats, &node.inputs[0], QuantScheme::SymmetricI8)?;
                let qb = activation_qparams(stats, &node.inputs[1], QuantScheme::AsymmetricU8)?;
                let (qa_id, qb_id, gemm_id) = (format!("{id}.qa"), format!("{id}.qb"), format!("{id}.int8"));
                out.add(&qa_id, Op::Quantize { qparams: qa }, &[&node.inputs[0]]);
                out.add(&qb_id, Op::Quantize { qparams: qb }, &[&node.inputs[1]]);
                out.nodes.push(Node {
                    id: gemm_id.clone(),
                    op: Op::MatMul {
                        epilogue: Vec::new(),
                        source: Some(Box::new(node.clone())),
                    },
                    inputs: vec![qa_id, qb_id],
                });
                out.add(id, Op::Dequantize, &[&gemm_id]);
            }
            _ => out.nodes.push(node.clone()),
        }
    }
    out.validate()?;
    Ok(out)
}

//! Graph rewrites applied after lowering.

use std::collections::HashSet;

use super::{Epilogue, Graph, Op, ValueKind};
use crate::error::Result;
use crate::tensor::QuantParams;

/// Quantization parameters statically attached to the value `id`.
fn static_qparams<'a>(g: &'a Graph, id: &str) -> Option<&'a QuantParams> {
    let node = g.node(id)?;
    match (&node.op, node.op.epilogue().last()) {
        (Op::Quantize { qparams }, _) => Some(qparams),
        (_, Some(Epilogue::Quantize { qparams })) => Some(qparams),
        _ => None,
    }
}

/// Removes `Quantize(Dequantize(x))` round trips whose parameters match
/// those of `x`, and merges Quantize nodes that read the same value with
/// the same parameters. Graph outputs keep their names, so a Quantize that
/// is itself an output stays. Returns whether anything changed.
pub fn eliminate_redundant_quantization(g: &mut Graph) -> bool {
    let mut changed = false;
    loop {
        let mut rewrite: Option<(String, String)> = None;
        for (i, node) in g.nodes.iter().enumerate() {
            let Op::Quantize { qparams } = &node.op else { continue };
            if g.outputs.contains(&node.id) {
                continue;
            }
            let src = &node.inputs[0];
            if let Some(dq) = g.node(src).filter(|d| d.kind() == super::OpKind::Dequantize) {
                if static_qparams(g, &dq.inputs[0]) == Some(qparams) {
                    rewrite = Some((node.id.clone(), dq.inputs[0].clone()));
                    break;
                }
            }
            let twin = g.nodes[..i].iter().find(|other| {
                matches!(&other.op, Op::Quantize { qparams: q } if q == qparams) && other.inputs == node.inputs
            });
            if let Some(twin) = twin {
                rewrite = Some((node.id.clone(), twin.id.clone()));
                break;
            }
        }
        let Some((old, new)) = rewrite else { break };
        g.replace_uses(&old, &new);
        g.nodes.retain(|n| n.id != old);
        changed = true;
    }
    changed
}

fn fusable(step: &Epilogue, kind: ValueKind) -> bool {
    match step {
        Epilogue::Dequantize => kind != ValueKind::F32,
        Epilogue::Reshape { .. } => true,
        _ => kind == ValueKind::F32,
    }
}

fn as_epilogue(op: &Op) -> Option<Epilogue> {
    Some(match op {
        Op::Dequantize => Epilogue::Dequantize,
        Op::BiasAdd { bias } => Epilogue::BiasAdd { bias: bias.clone() },
        Op::Gelu => Epilogue::Gelu,
        Op::Relu => Epilogue::Relu,
        Op::Reshape { shape } => Epilogue::Reshape { shape: shape.clone() },
        Op::LayerNorm { gamma, beta, eps } => Epilogue::LayerNorm {
            gamma: gamma.clone(),
            beta: beta.clone(),
            eps: *eps,
        },
        Op::Quantize { qparams } => Epilogue::Quantize { qparams: qparams.clone() },
        _ => return None,
    })
}

/// Folds the sole consumer of each GEMM into the GEMM's epilogue when the
/// consumer accepts the GEMM's current value kind. The fused node takes
/// the consumer's id and position. Returns whether anything changed.
pub fn fuse_post_ops(g: &mut Graph) -> bool {
    let mut changed = false;
    loop {
        let kinds = g.value_kinds(&g.weights);
        let uses = g.use_counts();
        let mut fusion: Option<(usize, usize, Epilogue)> = None;
        for (gi, gemm) in g.nodes.iter().enumerate() {
            if !matches!(gemm.op, Op::InnerProduct { .. } | Op::MatMul { .. }) {
                continue;
            }
            if uses.get(gemm.id.as_str()) != Some(&1) {
                continue;
            }
            let Some(&ci) = g.consumers(&gemm.id).first() else { continue };
            let Some(step) = as_epilogue(&g.nodes[ci].op) else { continue };
            if fusable(&step, kinds[&gemm.id]) {
                fusion = Some((gi, ci, step));
                break;
            }
        }
        let Some((gi, ci, step)) = fusion else { break };
        let mut fused = g.nodes[gi].clone();
        fused.id = g.nodes[ci].id.clone();
        if let Op::InnerProduct { epilogue, .. } | Op::MatMul { epilogue, .. } = &mut fused.op {
            epilogue.push(step);
        }
        g.nodes[ci] = fused;
        g.nodes.remove(gi);
        changed = true;
    }
    changed
}

/// Drops nodes that no graph output depends on. Returns whether anything
/// changed.
pub fn dead_code_elimination(g: &mut Graph) -> bool {
    let mut live: HashSet<String> = g.outputs.iter().cloned().collect();
    for n in g.nodes.iter().rev() {
        if live.contains(&n.id) {
            live.extend(n.inputs.iter().cloned());
        }
    }
    let before = g.nodes.len();
    g.nodes.retain(|n| live.contains(&n.id));
    g.nodes.len() != before
}

/// Runs every pass to a fixed point, validating after each one.
pub fn optimize(g: &Graph) -> Result<Graph> {
    let mut g = g.clone();
    g.validate()?;
    loop {
        let a = eliminate_redundant_quantization(&mut g);
        g.validate()?;
        let b = fuse_post_ops(&mut g);
        g.validate()?;
        let c = dead_code_elimination(&mut g);
        g.validate()?;
        if !(a || b || c) {
            return Ok(g);
        }
    }
}

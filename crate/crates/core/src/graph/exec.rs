//! Topological graph evaluation over arena-backed buffers.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ops;
use super::{Epilogue, Graph, Op, WeightSource};
use crate::error::{Error, Result};
use crate::quantizer::CalibrationStats;
use crate::runtime::{Arena, BufferHandle};
use crate::tensor::{DynTensor, Granularity, QuantParams, QuantTarget, Tensor};

pub type NamedTensors = BTreeMap<String, DynTensor>;

/// Work counters of one execution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecStats {
    /// Multiply-accumulates of INT8 GEMMs against stored weights.
    pub weight_macs: u64,
    /// Multiply-accumulates of INT8 activation-by-activation matmuls.
    pub activation_macs: u64,
    pub int8_gemm_calls: u64,
    pub f32_gemm_calls: u64,
}

type Observer<'a> = dyn FnMut(&str, &[usize], &[f32]) + 'a;

#[derive(Default)]
pub struct ExecOptions<'a> {
    /// Called with every f32 value (graph inputs and node outputs).
    pub observer: Option<&'a mut Observer<'a>>,
}

#[derive(Debug, Clone)]
enum Meta {
    F32,
    Quant(QuantParams),
    /// i32 accumulators and the scale of one unit per last-axis channel
    /// (or a single scale).
    Acc(Vec<f32>),
}

#[derive(Debug, Clone)]
struct Value {
    buf: BufferHandle,
    shape: Vec<usize>,
    meta: Meta,
}

impl Value {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }

    fn elem_size(&self) -> usize {
        match self.meta {
            Meta::Quant(_) => 1,
            _ => 4,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self.meta {
            Meta::F32 => "f32",
            Meta::Quant(_) => "quantized",
            Meta::Acc(_) => "accumulator",
        }
    }
}

struct Exec<'g, 'o> {
    graph: &'g Graph,
    weights: &'g dyn WeightSource,
    arena: &'g mut Arena,
    values: HashMap<&'g str, Value>,
    stats: ExecStats,
    observer: Option<&'o mut Observer<'o>>,
}

/// Executes `g` with its own weights.
pub fn execute(g: &Graph, inputs: &NamedTensors, arena: &mut Arena) -> Result<NamedTensors> {
    execute_with(g, &g.weights, inputs, arena, ExecOptions::default()).map(|(out, _)| out)
}

/// Executes `g`, resolving weights through `weights`.
pub fn execute_with<'o>(
    g: &Graph,
    weights: &dyn WeightSource,
    inputs: &NamedTensors,
    arena: &mut Arena,
    opts: ExecOptions<'o>,
) -> Result<(NamedTensors, ExecStats)> {
    let mut exec = Exec {
        graph: g,
        weights,
        arena,
        values: HashMap::new(),
        stats: ExecStats::default(),
        observer: opts.observer,
    };
    let result = exec.run(inputs);
    // release everything still live, also on error
    let live: Vec<BufferHandle> = exec.values.drain().map(|(_, v)| v.buf).collect();
    for buf in live {
        exec.arena.free(buf)?;
    }
    result.map(|out| (out, exec.stats))
}

/// Runs the f32 graph over `batches` and records min/max for every f32 edge.
pub fn collect_calibration<I>(g: &Graph, batches: I) -> Result<HashMap<String, CalibrationStats>>
where
    I: IntoIterator<Item = NamedTensors>,
{
    let mut stats: HashMap<String, CalibrationStats> = HashMap::new();
    let mut arena = Arena::new();
    for inputs in batches {
        let mut observe = |name: &str, _shape: &[usize], data: &[f32]| {
            let entry = stats.entry(name.to_string()).or_default();
            // per-tensor slices cannot fail
            let _ = entry.observe_slice(data);
        };
        let opts = ExecOptions {
            observer: Some(&mut observe),
        };
        execute_with(g, &g.weights, &inputs, &mut arena, opts)?;
    }
    Ok(stats)
}

impl<'g, 'o> Exec<'g, 'o> {
    fn run(&mut self, inputs: &NamedTensors) -> Result<NamedTensors> {
        let g = self.graph;
        let outputs: HashSet<&str> = g.outputs.iter().map(String::as_str).collect();
        let mut last_use: HashMap<&str, usize> = HashMap::new();
        for (i, n) in g.nodes.iter().enumerate() {
            for v in &n.inputs {
                last_use.insert(v.as_str(), i);
            }
        }

        for decl in &g.inputs {
            let t = match inputs.get(&decl.name) {
                Some(DynTensor::F32(t)) => t,
                Some(other) => {
                    return Err(Error::exec(&decl.name, format!("input must be f32, got {}", other.dtype())))
                }
                None => return Err(Error::exec(&decl.name, "missing graph input")),
            };
            let matches = t.rank() == decl.shape.len()
                && decl.shape.iter().zip(t.shape()).all(|(d, &s)| d.is_none_or(|d| d == s));
            if !matches {
                return Err(Error::exec(
                    &decl.name,
                    format!("input shape {:?} does not match {:?}", t.shape(), decl.shape),
                ));
            }
            let buf = self.arena.alloc(t.len() * 4)?;
            self.arena.view_mut::<f32>(buf, t.len())?.copy_from_slice(t.data());
            let value = Value {
                buf,
                shape: t.shape().to_vec(),
                meta: Meta::F32,
            };
            self.observe(&decl.name, &value)?;
            self.values.insert(&decl.name, value);
            if !last_use.contains_key(decl.name.as_str()) && !outputs.contains(decl.name.as_str()) {
                self.release(&decl.name)?;
            }
        }

        for (i, node) in g.nodes.iter().enumerate() {
            let value = self
                .run_node(node)
                .map_err(|e| match e {
                    Error::Execution { .. } => e,
                    other => Error::exec(&node.id, other.to_string()),
                })?;
            self.observe(&node.id, &value)?;
            self.values.insert(&node.id, value);
            let mut seen = HashSet::new();
            for v in &node.inputs {
                if seen.insert(v.as_str()) && last_use.get(v.as_str()) == Some(&i) && !outputs.contains(v.as_str()) {
                    self.release(v)?;
                }
            }
            if !last_use.contains_key(node.id.as_str()) && !outputs.contains(node.id.as_str()) {
                self.release(&node.id)?;
            }
        }

        let mut out = NamedTensors::new();
        for name in &g.outputs {
            let v = self
                .values
                .get(name.as_str())
                .ok_or_else(|| Error::exec(name, "output was not produced"))?;
            out.insert(name.clone(), self.to_tensor(v)?);
        }
        Ok(out)
    }

    fn observe(&mut self, name: &str, v: &Value) -> Result<()> {
        if let (Some(obs), Meta::F32) = (self.observer.as_mut(), &v.meta) {
            let data = self.arena.view::<f32>(v.buf, v.len())?;
            obs(name, &v.shape, data);
        }
        Ok(())
    }

    fn release(&mut self, name: &str) -> Result<()> {
        if let Some(v) = self.values.remove(name) {
            self.arena.free(v.buf)?;
        }
        Ok(())
    }

    fn to_tensor(&self, v: &Value) -> Result<DynTensor> {
        let n = v.len();
        let shape = v.shape.clone();
        Ok(match &v.meta {
            Meta::F32 => Tensor::new(shape, self.arena.view::<f32>(v.buf, n)?.to_vec())?.into(),
            Meta::Acc(_) => Tensor::new(shape, self.arena.view::<i32>(v.buf, n)?.to_vec())?.into(),
            Meta::Quant(qp) => match qp.target() {
                QuantTarget::I8 => Tensor::new(shape, self.arena.view::<i8>(v.buf, n)?.to_vec())?.into(),
                QuantTarget::U8 => Tensor::new(shape, self.arena.view::<u8>(v.buf, n)?.to_vec())?.into(),
            },
        })
    }

    fn input(&self, name: &str) -> Result<&Value> {
        self.values
            .get(name)
            .ok_or_else(|| Error::InvalidGraph(format!("value `{name}` is not available")))
    }

    fn f32_weight(&self, name: &str) -> Result<&'g [f32]> {
        let w = self.weights.weight(name).ok_or_else(|| Error::Binding(name.to_string()))?;
        w.as_f32()
            .map(|t| t.data())
            .ok_or_else(|| Error::Shape(format!("weight `{name}` is not f32")))
    }

    fn expect_f32(v: &Value, what: &str) -> Result<()> {
        match v.meta {
            Meta::F32 => Ok(()),
            _ => Err(Error::Shape(format!("{what} needs an f32 input, got {}", v.kind_name()))),
        }
    }

    fn last_dim(v: &Value) -> usize {
        *v.shape.last().unwrap()
    }

    /// Allocates a new value and copies `src` into it.
    fn copy_value(&mut self, src: &Value, shape: Vec<usize>) -> Result<Value> {
        let bytes = src.len() * src.elem_size();
        let buf = self.arena.alloc(bytes)?;
        let mut out = self.arena.checkout(buf)?;
        out.as_mut::<u8>(bytes)?
            .copy_from_slice(self.arena.view::<u8>(src.buf, bytes)?);
        self.arena.restore(out)?;
        Ok(Value {
            buf,
            shape,
            meta: src.meta.clone(),
        })
    }

    fn run_node(&mut self, node: &'g super::Node) -> Result<Value> {
        let value = match &node.op {
            Op::InnerProduct { weight, .. } => self.inner_product(node, weight)?,
            Op::MatMul { .. } => self.matmul(node)?,
            Op::Add => {
                let (a, b) = (self.input(&node.inputs[0])?.clone(), self.input(&node.inputs[1])?.clone());
                Self::expect_f32(&a, "Add")?;
                Self::expect_f32(&b, "Add")?;
                if a.shape != b.shape {
                    return Err(Error::Shape(format!("Add of {:?} and {:?}", a.shape, b.shape)));
                }
                let n = a.len();
                let buf = self.arena.alloc(n * 4)?;
                let mut out = self.arena.checkout(buf)?;
                ops::add(
                    self.arena.view::<f32>(a.buf, n)?,
                    self.arena.view::<f32>(b.buf, n)?,
                    out.as_mut::<f32>(n)?,
                );
                self.arena.restore(out)?;
                Value {
                    buf,
                    shape: a.shape,
                    meta: Meta::F32,
                }
            }
            Op::Transpose { perm } => {
                let src = self.input(&node.inputs[0])?.clone();
                let shape = ops::transposed_shape(&src.shape, perm)?;
                let n = src.len();
                let buf = self.arena.alloc(n * src.elem_size())?;
                let mut out = self.arena.checkout(buf)?;
                if src.elem_size() == 1 {
                    ops::transpose(self.arena.view::<u8>(src.buf, n)?, &src.shape, perm, out.as_mut::<u8>(n)?);
                } else {
                    ops::transpose(self.arena.view::<u32>(src.buf, n)?, &src.shape, perm, out.as_mut::<u32>(n)?);
                }
                self.arena.restore(out)?;
                Value {
                    buf,
                    shape,
                    meta: src.meta,
                }
            }
            Op::Softmax => {
                let src = self.input(&node.inputs[0])?.clone();
                Self::expect_f32(&src, "Softmax")?;
                let v = self.copy_value(&src, src.shape.clone())?;
                let (n, last) = (v.len(), Self::last_dim(&v));
                ops::softmax_inplace(self.arena.view_mut::<f32>(v.buf, n)?, last);
                v
            }
            Op::BiasAdd { bias } => self.unary_epilogue(node, Epilogue::BiasAdd { bias: bias.clone() })?,
            Op::LayerNorm { gamma, beta, eps } => self.unary_epilogue(
                node,
                Epilogue::LayerNorm {
                    gamma: gamma.clone(),
                    beta: beta.clone(),
                    eps: *eps,
                },
            )?,
            Op::Gelu => self.unary_epilogue(node, Epilogue::Gelu)?,
            Op::Relu => self.unary_epilogue(node, Epilogue::Relu)?,
            Op::Reshape { shape } => self.unary_epilogue(node, Epilogue::Reshape { shape: shape.clone() })?,
            Op::Dequantize => self.unary_epilogue(node, Epilogue::Dequantize)?,
            Op::Quantize { qparams } => {
                let src = self.input(&node.inputs[0])?.clone();
                self.quantize(&src, qparams)?
            }
        };
        let mut value = value;
        for step in node.op.epilogue() {
            value = self.apply_epilogue(value, step)?;
        }
        Ok(value)
    }

    /// Standalone unary node: copy the input, then run the epilogue step in place.
    fn unary_epilogue(&mut self, node: &super::Node, step: Epilogue) -> Result<Value> {
        let src = self.input(&node.inputs[0])?.clone();
        let copy = self.copy_value(&src, src.shape.clone())?;
        match self.apply_epilogue(copy.clone(), &step) {
            Ok(v) => Ok(v),
            Err(e) => {
                self.arena.free(copy.buf)?;
                Err(e)
            }
        }
    }

    fn quantize(&mut self, src: &Value, qp: &QuantParams) -> Result<Value> {
        Self::expect_f32(src, "Quantize")?;
        if qp.granularity() != Granularity::PerTensor {
            return Err(Error::QuantParams("activation quantization must be per-tensor".into()));
        }
        let n = src.len();
        let buf = self.arena.alloc(n)?;
        let mut out = self.arena.checkout(buf)?;
        let data = self.arena.view::<f32>(src.buf, n)?;
        match qp.target() {
            QuantTarget::I8 => ops::quantize_f32(data, qp, out.as_mut::<i8>(n)?),
            QuantTarget::U8 => ops::quantize_f32(data, qp, out.as_mut::<u8>(n)?),
        }
        self.arena.restore(out)?;
        Ok(Value {
            buf,
            shape: src.shape.clone(),
            meta: Meta::Quant(qp.clone()),
        })
    }

    /// Applies one epilogue step to an owned value, in place where the
    /// element size allows it.
    fn apply_epilogue(&mut self, mut v: Value, step: &Epilogue) -> Result<Value> {
        let n = v.len();
        match step {
            Epilogue::Reshape { shape } => {
                v.shape = ops::reshape_target(&v.shape, shape)?;
                Ok(v)
            }
            Epilogue::Quantize { qparams } => {
                let q = self.quantize(&v, qparams);
                self.arena.free(v.buf)?;
                q
            }
            Epilogue::Dequantize => match v.meta.clone() {
                Meta::Acc(scales) => {
                    let last = Self::last_dim(&v);
                    if scales.len() != 1 && scales.len() != last {
                        return Err(Error::Shape(format!("{} scales for last axis {last}", scales.len())));
                    }
                    ops::dequantize_acc_inplace(self.arena.view_mut::<i32>(v.buf, n)?, &scales);
                    v.meta = Meta::F32;
                    Ok(v)
                }
                Meta::Quant(qp) => {
                    let buf = self.arena.alloc(n * 4)?;
                    let mut out = self.arena.checkout(buf)?;
                    match qp.target() {
                        QuantTarget::I8 => ops::dequantize_q(self.arena.view::<i8>(v.buf, n)?, &qp, out.as_mut(n)?),
                        QuantTarget::U8 => ops::dequantize_q(self.arena.view::<u8>(v.buf, n)?, &qp, out.as_mut(n)?),
                    }
                    self.arena.restore(out)?;
                    self.arena.free(v.buf)?;
                    Ok(Value {
                        buf,
                        shape: v.shape,
                        meta: Meta::F32,
                    })
                }
                Meta::F32 => Err(Error::Shape("Dequantize of an f32 value".into())),
            },
            Epilogue::BiasAdd { bias } => {
                Self::expect_f32(&v, "BiasAdd")?;
                let bias = self.f32_weight(bias)?;
                if bias.len() != Self::last_dim(&v) {
                    return Err(Error::Shape(format!("bias of {} for last axis {}", bias.len(), Self::last_dim(&v))));
                }
                ops::bias_add_inplace(self.arena.view_mut::<f32>(v.buf, n)?, bias);
                Ok(v)
            }
            Epilogue::Gelu => {
                Self::expect_f32(&v, "Gelu")?;
                ops::gelu_inplace(self.arena.view_mut::<f32>(v.buf, n)?);
                Ok(v)
            }
            Epilogue::Relu => {
                Self::expect_f32(&v, "Relu")?;
                ops::relu_inplace(self.arena.view_mut::<f32>(v.buf, n)?);
                Ok(v)
            }
            Epilogue::LayerNorm { gamma, beta, eps } => {
                Self::expect_f32(&v, "LayerNorm")?;
                let (gamma, beta) = (self.f32_weight(gamma)?, self.f32_weight(beta)?);
                let last = Self::last_dim(&v);
                if gamma.len() != last || beta.len() != last {
                    return Err(Error::Shape(format!("layer norm parameters do not match last axis {last}")));
                }
                ops::layer_norm_inplace(self.arena.view_mut::<f32>(v.buf, n)?, gamma, beta, *eps);
                Ok(v)
            }
        }
    }

    fn inner_product(&mut self, node: &super::Node, weight: &str) -> Result<Value> {
        let x = self.input(&node.inputs[0])?.clone();
        let w = self.weights.weight(weight).ok_or_else(|| Error::Binding(weight.to_string()))?;
        let k = Self::last_dim(&x);
        let rows = x.len() / k;
        if let Some(wf) = w.as_f32() {
            Self::expect_f32(&x, "f32 InnerProduct")?;
            let (m, wk) = wf.dims2()?;
            if wk != k {
                return Err(Error::Shape(format!("input last axis {k} vs weight {m}x{wk}")));
            }
            let mut shape = x.shape.clone();
            *shape.last_mut().unwrap() = m;
            let buf = self.arena.alloc(rows * m * 4)?;
            let mut out = self.arena.checkout(buf)?;
            ops::inner_product_f32(self.arena.view::<f32>(x.buf, rows * k)?, wf.data(), k, m, out.as_mut(rows * m)?);
            self.arena.restore(out)?;
            self.stats.f32_gemm_calls += 1;
            return Ok(Value {
                buf,
                shape,
                meta: Meta::F32,
            });
        }
        let wq = w
            .as_quant()
            .ok_or_else(|| Error::Shape(format!("weight `{weight}` cannot feed an InnerProduct")))?;
        let qp_x = match &x.meta {
            Meta::Quant(qp) if qp.target() == QuantTarget::U8 => qp.clone(),
            _ => return Err(Error::Shape(format!("INT8 InnerProduct needs a u8 input, got {}", x.kind_name()))),
        };
        let (m, wk) = (wq.rows(), wq.cols());
        if wk != k {
            return Err(Error::Shape(format!("input last axis {k} vs weight {m}x{wk}")));
        }
        // kernel layout: input k x rows, accumulators m x rows
        let xt = self.arena.alloc(k * rows)?;
        let acc = self.arena.alloc(m * rows * 4)?;
        let mut xt_buf = self.arena.checkout(xt)?;
        ops::transpose2(self.arena.view::<u8>(x.buf, rows * k)?, rows, k, xt_buf.as_mut::<u8>(rows * k)?);
        let mut acc_buf = self.arena.checkout(acc)?;
        let kstats = wq.gemm_into(xt_buf.as_mut::<u8>(rows * k)?, rows, acc_buf.as_mut::<i32>(m * rows)?)?;
        self.arena.restore(xt_buf)?;
        self.arena.free(xt)?;

        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = m;
        let buf = self.arena.alloc(rows * m * 4)?;
        let mut out = self.arena.checkout(buf)?;
        {
            let acc = acc_buf.as_mut::<i32>(m * rows)?;
            let out = out.as_mut::<i32>(rows * m)?;
            let zp = qp_x.zero_point();
            let sums = wq.row_sums();
            for (mm, (acc_row, &rs)) in acc.chunks_exact(rows).zip(sums).enumerate() {
                let corr = zp.wrapping_mul(rs);
                for (r, &a) in acc_row.iter().enumerate() {
                    out[r * m + mm] = a.wrapping_sub(corr);
                }
            }
        }
        self.arena.restore(out)?;
        self.arena.restore(acc_buf)?;
        self.arena.free(acc)?;

        let s_x = qp_x.scale(0);
        let scales = (0..m).map(|c| wq.qparams().scale(c) * s_x).collect();
        self.stats.weight_macs += kstats.macs;
        self.stats.int8_gemm_calls += 1;
        Ok(Value {
            buf,
            shape,
            meta: Meta::Acc(scales),
        })
    }

    fn matmul(&mut self, node: &super::Node) -> Result<Value> {
        let a = self.input(&node.inputs[0])?.clone();
        let b = self.input(&node.inputs[1])?.clone();
        let (ra, rb) = (a.shape.len(), b.shape.len());
        if ra < 2 || ra != rb || a.shape[..ra - 2] != b.shape[..rb - 2] || a.shape[ra - 1] != b.shape[rb - 2] {
            return Err(Error::Shape(format!("MatMul of {:?} and {:?}", a.shape, b.shape)));
        }
        let (m, k, n) = (a.shape[ra - 2], a.shape[ra - 1], b.shape[rb - 1]);
        let batch: usize = a.shape[..ra - 2].iter().product();
        let mut shape = a.shape.clone();
        shape[ra - 1] = n;
        let total = batch * m * n;
        let buf = self.arena.alloc(total * 4)?;
        let mut out = self.arena.checkout(buf)?;
        let meta = match (&a.meta, &b.meta) {
            (Meta::F32, Meta::F32) => {
                ops::matmul_f32(
                    self.arena.view::<f32>(a.buf, a.len())?,
                    self.arena.view::<f32>(b.buf, b.len())?,
                    batch,
                    m,
                    k,
                    n,
                    out.as_mut(total)?,
                );
                self.stats.f32_gemm_calls += 1;
                Meta::F32
            }
            (Meta::Quant(qa), Meta::Quant(qb)) => {
                let y = out.as_mut::<i32>(total)?;
                let (za, zb) = (qa.zero_point(), qb.zero_point());
                match (qa.target(), qb.target()) {
                    (QuantTarget::I8, QuantTarget::U8) => ops::matmul_quant(
                        self.arena.view::<i8>(a.buf, a.len())?, za,
                        self.arena.view::<u8>(b.buf, b.len())?, zb, batch, m, k, n, y,
                    ),
                    (QuantTarget::I8, QuantTarget::I8) => ops::matmul_quant(
                        self.arena.view::<i8>(a.buf, a.len())?, za,
                        self.arena.view::<i8>(b.buf, b.len())?, zb, batch, m, k, n, y,
                    ),
                    (QuantTarget::U8, QuantTarget::U8) => ops::matmul_quant(
                        self.arena.view::<u8>(a.buf, a.len())?, za,
                        self.arena.view::<u8>(b.buf, b.len())?, zb, batch, m, k, n, y,
                    ),
                    (QuantTarget::U8, QuantTarget::I8) => ops::matmul_quant(
                        self.arena.view::<u8>(a.buf, a.len())?, za,
                        self.arena.view::<i8>(b.buf, b.len())?, zb, batch, m, k, n, y,
                    ),
                }
                self.stats.activation_macs += (batch * m * k * n) as u64;
                self.stats.int8_gemm_calls += 1;
                Meta::Acc(vec![qa.scale(0) * qb.scale(0)])
            }
            _ => {
                self.arena.restore(out)?;
                self.arena.free(buf)?;
                return Err(Error::Shape(format!(
                    "MatMul of {} and {} values",
                    a.kind_name(),
                    b.kind_name()
                )));
            }
        };
        self.arena.restore(out)?;
        Ok(Value { buf, shape, meta })
    }
}

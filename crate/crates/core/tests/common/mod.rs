//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;

use blocksparse::graph::{collect_calibration, execute, lower_to_int8, optimize, Graph, NamedTensors, Op, Weight};
use blocksparse::kernels::{compress_weight, DenseI8Weight};
use blocksparse::model_io::{encoder_inputs, generate_inputs, generate_toy_encoder, prune_gemm_weights, ToyEncoderSpec};
use blocksparse::pruner::{prune_blockwise, PruneConfig};
use blocksparse::runtime::Arena;
use blocksparse::{DynTensor, QuantParams, QuantTarget, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `max |a - b| / max |b|`, the norm-relative error used for f32 outputs.
pub fn rel_err(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    let diff = a.max_abs_diff(b).unwrap();
    let scale = b.data().iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    dot / (na.sqrt() * nb.sqrt()).max(f64::MIN_POSITIVE)
}

pub fn f32_of(t: &DynTensor) -> &Tensor<f32> {
    match t {
        DynTensor::F32(t) => t,
        other => panic!("expected f32, got {}", other.dtype()),
    }
}

/// Compares two output maps: integer tensors exactly, f32 within `tol`
/// norm-relative. Returns the worst f32 error seen.
pub fn compare_outputs(a: &NamedTensors, b: &NamedTensors, tol: f64) -> Result<f64, String> {
    if a.keys().ne(b.keys()) {
        return Err("output names differ".into());
    }
    let mut worst = 0.0f64;
    for (name, x) in a {
        let y = &b[name];
        match (x, y) {
            (DynTensor::F32(x), DynTensor::F32(y)) => {
                let e = rel_err(x, y);
                worst = worst.max(e);
                if !(e <= tol) {
                    return Err(format!("`{name}`: relative error {e:e} > {tol:e}"));
                }
            }
            _ => {
                if x != y {
                    return Err(format!("`{name}`: integer outputs differ"));
                }
            }
        }
    }
    Ok(worst)
}

pub fn run(g: &Graph, inputs: &NamedTensors) -> NamedTensors {
    execute(g, inputs, &mut Arena::new()).unwrap_or_else(|e| panic!("{e}\n{}", g.dump()))
}

/// f32, default INT8 and optimized versions of one encoder.
pub struct Pipeline {
    pub spec: ToyEncoderSpec,
    pub f32: Graph,
    pub lowered: Graph,
    pub optimized: Graph,
}

pub fn encoder_pipeline(spec: ToyEncoderSpec, sparsity: Option<f64>, seed: u64) -> Pipeline {
    let mut f32 = generate_toy_encoder(&spec, seed).unwrap();
    if let Some(s) = sparsity {
        f32 = prune_gemm_weights(&f32, &PruneConfig::new(s).unwrap()).unwrap();
    }
    let calib = generate_inputs(&spec, 2, 4, seed ^ 0xca11).unwrap().map(encoder_inputs);
    let stats = collect_calibration(&f32, calib).unwrap();
    let lowered = lower_to_int8(&f32, &stats).unwrap();
    let optimized = optimize(&lowered).unwrap();
    Pipeline {
        spec,
        f32,
        lowered,
        optimized,
    }
}

pub fn encoder_input(spec: &ToyEncoderSpec, batch: usize, seed: u64) -> NamedTensors {
    encoder_inputs(generate_inputs(spec, batch, 1, seed).unwrap().next().unwrap())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Kind {
    F32,
    Quant,
}

#[derive(Clone, Debug)]
struct Val {
    name: String,
    shape: Vec<usize>,
    kind: Kind,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal) * std).unwrap()
}

/// Random graph over the op vocabulary, plus a matching input.
///
/// GEMMs take f32 inputs so the graph can be lowered; explicit
/// Quantize / Dequantize round trips and duplicate Quantize nodes give the
/// redundancy pass something to remove.
pub struct RandomGraph {
    pub graph: Graph,
    pub inputs: NamedTensors,
}

pub fn random_graph(seed: u64) -> RandomGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, s, k) = (rng.random_range(1..=2), rng.random_range(1..=5), 4 * rng.random_range(1..=4));
    let mut g = Graph::new();
    g.add_input("x", vec![None, Some(s), Some(k)]);
    let mut pool = vec![Val {
        name: "x".into(),
        shape: vec![b, s, k],
        kind: Kind::F32,
    }];
    let steps = rng.random_range(4..=14);
    let mut next = 0;
    let mut fresh = |prefix: &str| {
        next += 1;
        format!("{prefix}{next}")
    };

    for _ in 0..steps {
        let f32_vals: Vec<Val> = pool.iter().filter(|v| v.kind == Kind::F32).cloned().collect();
        // bias towards recent values so chains form
        let pick = |rng: &mut ChaCha8Rng, vals: &[Val]| -> Val {
            let n = vals.len();
            let i = if rng.random_bool(0.7) { n - 1 } else { rng.random_range(0..n) };
            vals[i].clone()
        };
        let v = pick(&mut rng, &f32_vals);
        let last = *v.shape.last().unwrap();
        match rng.random_range(0..12) {
            0..=2 => {
                let m = rng.random_range(1..=12);
                let w = normal(&mut rng, &[m, last], 1.0 / (last as f32).sqrt());
                let wname = fresh("w");
                let weight = if rng.random_bool(0.4) {
                    let sparsity = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0][rng.random_range(0..6)];
                    let (mask, pruned) = prune_blockwise(&w, &PruneConfig::new(sparsity).unwrap()).unwrap();
                    Weight::Pruned { weight: pruned, mask }
                } else {
                    Weight::Dense(w.into())
                };
                g.add_weight(&wname, weight);
                let id = g.add(fresh("ip"), Op::inner_product(wname), &[&v.name]);
                let mut shape = v.shape.clone();
                *shape.last_mut().unwrap() = m;
                pool.push(Val { name: id, shape, kind: Kind::F32 });
            }
            3 => {
                let bname = fresh("bias");
                g.add_weight(&bname, Weight::Dense(normal(&mut rng, &[last], 0.5).into()));
                let id = g.add(fresh("ba"), Op::BiasAdd { bias: bname }, &[&v.name]);
                pool.push(Val { name: id, ..v });
            }
            4 => {
                let op = [Op::Gelu, Op::Relu, Op::Softmax][rng.random_range(0..3)].clone();
                let id = g.add(fresh("act"), op, &[&v.name]);
                pool.push(Val { name: id, ..v });
            }
            5 => {
                let (gname, bname) = (fresh("gamma"), fresh("beta"));
                g.add_weight(&gname, Weight::Dense(normal(&mut rng, &[last], 1.0).into()));
                g.add_weight(&bname, Weight::Dense(normal(&mut rng, &[last], 0.2).into()));
                let op = Op::LayerNorm { gamma: gname, beta: bname, eps: 1e-5 };
                let id = g.add(fresh("ln"), op, &[&v.name]);
                pool.push(Val { name: id, ..v });
            }
            6 => {
                // any value kind: merge the last two axes or split the last one
                let v = pick(&mut rng, &pool);
                let r = v.shape.len();
                let (target, shape): (Vec<i64>, Vec<usize>) = if r >= 3 && rng.random_bool(0.5) {
                    let mut t = vec![0i64; r - 2];
                    t.push(-1);
                    let mut s = v.shape[..r - 2].to_vec();
                    s.push(v.shape[r - 2] * v.shape[r - 1]);
                    (t, s)
                } else if r < 4 && v.shape[r - 1] % 2 == 0 {
                    let mut t = vec![0i64; r - 1];
                    t.extend([2, -1]);
                    let mut s = v.shape[..r - 1].to_vec();
                    s.extend([2, v.shape[r - 1] / 2]);
                    (t, s)
                } else {
                    continue;
                };
                let id = g.add(fresh("rs"), Op::Reshape { shape: target }, &[&v.name]);
                pool.push(Val { name: id, shape, kind: v.kind });
            }
            7 => {
                let v = pick(&mut rng, &pool);
                let r = v.shape.len();
                if r < 2 {
                    continue;
                }
                let mut perm: Vec<usize> = (0..r).collect();
                perm.swap(r - 2, r - 1);
                let mut shape = v.shape.clone();
                shape.swap(r - 2, r - 1);
                let id = g.add(fresh("tr"), Op::Transpose { perm }, &[&v.name]);
                pool.push(Val { name: id, shape, kind: v.kind });
            }
            8 => {
                let other = f32_vals.iter().rev().find(|o| o.shape == v.shape && o.name != v.name).unwrap_or(&v).clone();
                let id = g.add(fresh("add"), Op::Add, &[&v.name, &other.name]);
                pool.push(Val { name: id, ..v });
            }
            9 => {
                let r = v.shape.len();
                if r < 2 {
                    continue;
                }
                let mut perm: Vec<usize> = (0..r).collect();
                perm.swap(r - 2, r - 1);
                let t = g.add(fresh("tr"), Op::Transpose { perm }, &[&v.name]);
                let id = g.add(fresh("mm"), Op::matmul(), &[&v.name, &t]);
                let mut shape = v.shape.clone();
                shape[r - 1] = v.shape[r - 2];
                pool.push(Val { name: id, shape, kind: Kind::F32 });
            }
            _ => {
                // Quantize -> Dequantize -> Quantize (same params) -> Dequantize,
                // plus a duplicate of the first Quantize
                let qp = if rng.random_bool(0.5) {
                    QuantParams::per_tensor(rng.random_range(0.005..0.05), rng.random_range(0..=255), QuantTarget::U8)
                } else {
                    QuantParams::per_tensor(rng.random_range(0.005..0.05), 0, QuantTarget::I8)
                }
                .unwrap();
                let q1 = g.add(fresh("q"), Op::Quantize { qparams: qp.clone() }, &[&v.name]);
                let d1 = g.add(fresh("dq"), Op::Dequantize, &[&q1]);
                let q2 = g.add(fresh("q"), Op::Quantize { qparams: qp.clone() }, &[&d1]);
                let d2 = g.add(fresh("dq"), Op::Dequantize, &[&q2]);
                let q3 = g.add(fresh("q"), Op::Quantize { qparams: qp }, &[&v.name]);
                pool.push(Val { name: q3, shape: v.shape.clone(), kind: Kind::Quant });
                pool.push(Val { name: d2, ..v });
            }
        }
    }

    let mut outputs = vec![pool.last().unwrap().name.clone()];
    for _ in 0..rng.random_range(0..=2) {
        let v = &pool[rng.random_range(0..pool.len())];
        if !outputs.contains(&v.name) {
            outputs.push(v.name.clone());
        }
    }
    g.outputs = outputs;
    g.validate().unwrap();
    let inputs = {
        let mut m = NamedTensors::new();
        m.insert("x".into(), normal(&mut rng, &[b, s, k], 1.0).into());
        m
    };
    RandomGraph { graph: g, inputs }
}

/// Lowers a random graph using statistics from its own input and two
/// perturbed copies.
pub fn lower_random(rg: &RandomGraph) -> Graph {
    let x = f32_of(&rg.inputs["x"]).clone();
    let batches = (0..3).map(|i| {
        let scaled = x.map(|v| v * (1.0 + 0.1 * i as f32));
        blocksparse::model_io::encoder_inputs(scaled)
    });
    let stats = collect_calibration(&rg.graph, batches).unwrap();
    lower_to_int8(&rg.graph, &stats).unwrap()
}

/// Mean cosine similarity of `g`'s outputs against reference outputs.
pub fn mean_cosine(g: &Graph, eval: &[NamedTensors], reference: &[NamedTensors]) -> blocksparse::Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for (x, want) in eval.iter().zip(reference) {
        let got = execute(g, x, &mut Arena::new())?;
        for (name, w) in want {
            total += cosine(f32_of(&got[name]).data(), f32_of(w).data());
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// A lowered encoder whose activation quantizer in front of `target` has
/// its scale multiplied by `factor`, plus evaluation data.
pub struct TuneCase {
    pub lowered: Graph,
    pub corrupted: Graph,
    pub target: String,
    pub eval: Vec<NamedTensors>,
    pub reference: Vec<NamedTensors>,
}

pub fn tune_case(spec: ToyEncoderSpec, target: &str, factor: f32, seed: u64) -> TuneCase {
    let p = encoder_pipeline(spec, None, seed);
    let eval: Vec<NamedTensors> = (0..3).map(|i| encoder_input(&spec, 2, seed + 1000 + i)).collect();
    let reference = eval.iter().map(|x| run(&p.f32, x)).collect();
    let mut corrupted = p.lowered.clone();
    let q = corrupted
        .nodes
        .iter_mut()
        .find(|n| n.id == format!("{target}.q"))
        .unwrap_or_else(|| panic!("no quantizer in front of `{target}`"));
    let Op::Quantize { qparams } = &mut q.op else { panic!("`{target}.q` is not a Quantize node") };
    *qparams = QuantParams::per_tensor(qparams.scale(0) * factor, qparams.zero_point(), qparams.target()).unwrap();
    TuneCase {
        lowered: p.lowered,
        corrupted,
        target: target.to_string(),
        eval,
        reference,
    }
}

/// A graph holding one weight of every dtype and encoding.
pub fn every_weight_kind() -> Graph {
    let mut g = Graph::new();
    g.add_input("x", vec![None, Some(6)]);
    g.add("ip", Op::inner_product("sparse"), &["x"]);
    g.set_outputs(&["ip"]);
    let f = Tensor::from_fn(&[10, 6], |i| ((i[0] * 6 + i[1]) as f32 * 0.61).sin()).unwrap();
    g.add_weight("f32", Weight::Dense(f.clone().into()));
    g.add_weight("f64", Weight::Dense(Tensor::from_fn(&[3, 2, 2], |i| i[0] as f64 * 1e-300 - i[2] as f64).unwrap().into()));
    g.add_weight("i8", Weight::Dense(Tensor::new(vec![4], vec![-128i8, -1, 0, 127]).unwrap().into()));
    g.add_weight("u8", Weight::Dense(Tensor::new(vec![3], vec![0u8, 128, 255]).unwrap().into()));
    g.add_weight("i32", Weight::Dense(Tensor::new(vec![2], vec![i32::MIN, i32::MAX]).unwrap().into()));
    // special floats survive bit for bit
    g.add_weight(
        "special",
        Weight::Dense(Tensor::new(vec![4], vec![-0.0f32, f32::INFINITY, f32::MIN_POSITIVE / 2.0, f32::NAN]).unwrap().into()),
    );
    let (mask, pruned) = prune_blockwise(&f, &PruneConfig::new(0.5).unwrap()).unwrap();
    g.add_weight("pruned", Weight::Pruned { weight: pruned.clone(), mask: mask.clone() });
    let qp = QuantParams::per_channel((1..=10).map(|i| i as f32 * 0.01).collect(), 0, QuantTarget::I8).unwrap();
    let q = Tensor::from_fn(&[10, 6], |i| (i[0] as i8 - 5) * (i[1] as i8 + 1)).unwrap();
    g.add_weight("quant_dense", Weight::QuantDense(DenseI8Weight::new(q, qp.clone()).unwrap()));
    let qs = Tensor::from_fn(&[10, 6], |i| if mask.is_kept(i[0] / 4, i[1]) { (i[0] + i[1]) as i8 - 7 } else { 0 }).unwrap();
    g.add_weight("sparse", Weight::Sparse(compress_weight(&qs, &mask, &qp).unwrap()));
    g
}

/// Bitwise weight equality (NaN payloads included).
pub fn same_bits(a: &BTreeMap<String, Weight>, b: &BTreeMap<String, Weight>) -> bool {
    let bytes = |w: &Weight| -> Vec<u8> {
        match w {
            Weight::Dense(t) => t.to_le_bytes(),
            Weight::Pruned { weight, mask } => [DynTensor::F32(weight.clone()).to_le_bytes(), mask.to_bitset()].concat(),
            Weight::QuantDense(q) => q.data().data().iter().map(|&v| v as u8).collect(),
            Weight::Sparse(s) => [s.mask().to_bitset(), s.packed_blocks().iter().map(|&v| v as u8).collect()].concat(),
        }
    };
    a.len() == b.len()
        && a.iter().zip(b).all(|((na, wa), (nb, wb))| {
            na == nb && wa.kind_name() == wb.kind_name() && bytes(wa) == bytes(wb)
        })
}

//! Reference computations written independently of the library kernels.

use blocksparse::kernels::{compress_weight, dense_gemm_i32, sparse_gemm_with_stats, BlockSparseWeight, PostOp, PostOpKind};
use blocksparse::pruner::{prune_blockwise, BlockMask, PruneConfig, BLOCK_SIZE};
use blocksparse::{DynTensor, QuantParams, QuantTarget, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SPARSITIES: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0];

/// `w x` with 64-bit accumulation, row-major triple loop.
pub fn naive_gemm(w: &Tensor<i8>, x: &Tensor<u8>) -> Vec<i64> {
    let (m, k) = (w.shape()[0], w.shape()[1]);
    let n = x.shape()[1];
    let mut out = vec![0i64; m * n];
    for i in 0..m {
        for kk in 0..k {
            let a = w.data()[i * k + kk] as i64;
            for j in 0..n {
                out[i * n + j] += a * x.data()[kk * n + j] as i64;
            }
        }
    }
    out
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Expected post-operator output.
///
/// Integer results are exact; float results are computed in f64 and
/// returned as such so callers can measure the kernel's rounding.
pub enum Expected {
    Int(Vec<i64>),
    Float(Vec<f64>),
}

pub fn post_op_oracle(acc: &[i64], w: &Tensor<i8>, weight_qp: &QuantParams, post: &PostOp) -> Expected {
    let (m, k) = (w.shape()[0], w.shape()[1]);
    let n = acc.len() / m;
    let zp = post.input_qparams.as_ref().map_or(0, |q| q.zero_point()) as i64;
    let sx = post.input_qparams.as_ref().map_or(1.0, |q| q.scale(0));
    let corrected = |i: usize| -> i64 {
        let r = i / n;
        let row_sum: i64 = w.data()[r * k..(r + 1) * k].iter().map(|&v| v as i64).sum();
        let bias = post.bias.as_ref().map_or(0, |b| b.data()[r] as i64);
        acc[i] - zp * row_sum + bias
    };
    let real = |i: usize| corrected(i) as f64 * (weight_qp.scale(i / n) as f64 * sx as f64);
    let all = 0..acc.len();
    match post.kind {
        PostOpKind::None => Expected::Int(acc.to_vec()),
        PostOpKind::BiasAdd => Expected::Int(all.map(corrected).collect()),
        PostOpKind::Dequantize => Expected::Float(all.map(real).collect()),
        PostOpKind::BiasAddGelu => Expected::Float(all.map(|i| gelu_f64(real(i))).collect()),
        PostOpKind::BiasAddRelu => Expected::Float(all.map(|i| real(i).max(0.0)).collect()),
        PostOpKind::Requantize => {
            let out = post.output_qparams.as_ref().unwrap();
            let (lo, hi) = match out.target() {
                QuantTarget::I8 => (-128, 127),
                QuantTarget::U8 => (0, 255),
            };
            let so = out.scale(0) as f64;
            Expected::Int(
                all.map(|i| ((real(i) / so).round_ties_even() as i64 + out.zero_point() as i64).clamp(lo, hi))
                    .collect(),
            )
        }
    }
}

fn widen(t: &DynTensor) -> Option<Vec<i64>> {
    Some(match t {
        DynTensor::I8(t) => t.data().iter().map(|&v| v as i64).collect(),
        DynTensor::U8(t) => t.data().iter().map(|&v| v as i64).collect(),
        DynTensor::I32(t) => t.data().iter().map(|&v| v as i64).collect(),
        _ => return None,
    })
}

/// One randomized sparse GEMM problem.
pub struct KernelCase {
    pub sparsity: f64,
    pub dense: Tensor<i8>,
    pub weight: BlockSparseWeight,
    pub input: Tensor<u8>,
    pub post: PostOp,
}

impl KernelCase {
    pub fn describe(&self) -> String {
        format!(
            "{}x{} x {}x{}, sparsity {}, {:?}",
            self.weight.rows(),
            self.weight.cols(),
            self.input.shape()[0],
            self.input.shape()[1],
            self.sparsity,
            self.post.kind
        )
    }
}

fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sparsity: f64) -> BlockMask {
    let scores = Tensor::from_fn(&[rows, cols], |_| rng.random::<f32>()).unwrap();
    prune_blockwise(&scores, &PruneConfig::new(sparsity).unwrap()).unwrap().0
}

pub fn random_kernel_case(rng: &mut ChaCha8Rng, max_mk: usize, max_n: usize) -> KernelCase {
    let (m, k, n) = (rng.random_range(1..=max_mk), rng.random_range(1..=max_mk), rng.random_range(1..=max_n));
    let sparsity = SPARSITIES[rng.random_range(0..SPARSITIES.len())];
    let mask = random_mask(rng, m, k, sparsity);
    let dense = Tensor::from_fn(&[m, k], |i| {
        if mask.is_kept(i[0] / BLOCK_SIZE, i[1]) {
            rng.random_range(-128..=127)
        } else {
            0
        }
    })
    .unwrap();
    let scales = (0..m).map(|_| rng.random_range(1e-3f32..5e-2)).collect();
    let wq = QuantParams::per_channel(scales, 0, QuantTarget::I8).unwrap();
    let weight = compress_weight(&dense, &mask, &wq).unwrap();
    let input = Tensor::from_fn(&[k, n], |_| rng.random()).unwrap();
    let xq = QuantParams::per_tensor(rng.random_range(1e-3f32..1e-1), rng.random_range(0..=255), QuantTarget::U8).unwrap();
    let bias = Tensor::from_fn(&[m], |_| rng.random_range(-100_000..=100_000)).unwrap();
    let post = match rng.random_range(0..6) {
        0 => PostOp::none(),
        1 => PostOp::bias_add(bias, rng.random_bool(0.5).then(|| xq.clone())),
        2 => PostOp::bias_add_gelu(bias, xq),
        3 => PostOp::bias_add_relu(bias, xq),
        4 => PostOp::dequantize(xq, rng.random_bool(0.5).then_some(bias)),
        _ => {
            // log-uniform output scale: some cases saturate, most do not
            let so = 10f32.powf(rng.random_range(-3.0..1.0));
            let out = if rng.random_bool(0.5) {
                QuantParams::per_tensor(so, rng.random_range(0..=255), QuantTarget::U8)
            } else {
                QuantParams::per_tensor(so, 0, QuantTarget::I8)
            }
            .unwrap();
            PostOp::requantize(xq, out, rng.random_bool(0.5).then_some(bias))
        }
    };
    KernelCase {
        sparsity,
        dense,
        weight,
        input,
        post,
    }
}

/// Checks one case: the dense reference GEMM against a 64-bit loop, the
/// sparse kernel against the dense GEMM plus the post-op oracle, and the
/// executed MAC count. Returns the f32 norm-relative error (0 for integer
/// outputs).
pub fn check_kernel_case(case: &KernelCase, f32_tol: f64) -> Result<f64, String> {
    let acc32 = dense_gemm_i32(&case.dense, &case.input).map_err(|e| e.to_string())?;
    let acc: Vec<i64> = acc32.data().iter().map(|&v| v as i64).collect();
    if acc != naive_gemm(&case.dense, &case.input) {
        return Err(format!("dense_gemm_i32 differs from the 64-bit loop: {}", case.describe()));
    }
    let (got, stats) =
        sparse_gemm_with_stats(&case.weight, &case.input, &case.post).map_err(|e| format!("{e}: {}", case.describe()))?;
    let n = case.input.shape()[1] as u64;
    let expect_macs = case.weight.mask().kept_count() as u64 * BLOCK_SIZE as u64 * n;
    if stats.macs != expect_macs {
        return Err(format!("{} MACs, expected {expect_macs}: {}", stats.macs, case.describe()));
    }
    if got.shape() != [case.weight.rows(), case.input.shape()[1]] {
        return Err(format!("output shape {:?}: {}", got.shape(), case.describe()));
    }
    match post_op_oracle(&acc, &case.dense, case.weight.qparams(), &case.post) {
        Expected::Int(expect) => match widen(&got) {
            Some(v) if v == expect => Ok(0.0),
            Some(_) => Err(format!("integer outputs differ: {}", case.describe())),
            None => Err(format!("expected an integer output, got {}: {}", got.dtype(), case.describe())),
        },
        Expected::Float(expect) => {
            let DynTensor::F32(got) = &got else {
                return Err(format!("expected f32, got {}: {}", got.dtype(), case.describe()));
            };
            let scale = expect.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let diff = got.data().iter().zip(&expect).fold(0.0f64, |m, (&a, b)| m.max((a as f64 - b).abs()));
            let err = if scale == 0.0 { diff } else { diff / scale };
            if err <= f32_tol {
                Ok(err)
            } else {
                Err(format!("relative error {err:e} > {f32_tol:e}: {}", case.describe()))
            }
        }
    }
}

pub fn kernel_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `(max |dequant(quant(x)) - x| - bound)` over a tensor, where the bound
/// is half a quantization step plus one ulp of the operand magnitude.
/// Non-positive means the round trip holds everywhere.
pub fn round_trip_excess(x: &[f32], back: &[f32], scale: f32) -> f64 {
    x.iter()
        .zip(back)
        .map(|(&a, &b)| {
            let ulp = (a.abs().max(b.abs()) as f64) * f32::EPSILON as f64;
            (a as f64 - b as f64).abs() - (scale as f64 / 2.0 + ulp)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

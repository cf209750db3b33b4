//! INT8 GEMM kernels: `u8` activations times `i8` weights with `i32`
//! accumulation.
//!
//! Weights are stored as panels of 4 output rows. A sparse weight keeps only
//! the 4x1 blocks that survived pruning, together with the input column each
//! block multiplies; a dense weight is the same structure with every block
//! present. The microkernel walks a panel 4 columns at a time, forming the
//! 4-element unsigned-by-signed dot products of [`quad_dot_accumulate`], and
//! sweeps the N dimension in tiles of [`TileConfig::N_BLOCK`] columns.
//! Post-operators run once per output element after accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruner::{BlockMask, BLOCK_SIZE};
use crate::quantizer::{quantize_scalar, QuantInt};
use crate::tensor::{DynTensor, Granularity, QuantParams, QuantTarget, Tensor};

/// Loop tiling of the microkernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig;

impl TileConfig {
    pub const M_BLOCK: usize = 4;
    pub const N_BLOCK: usize = 64;
    pub const K_BLOCK: usize = 4;
}

/// Largest inner dimension for which `i32` accumulation cannot overflow:
/// `2^16 * 128 * 255 < 2^31`.
pub const MAX_K: usize = 1 << 16;

/// `acc + sum(w[i] * x[i])`, the unsigned-by-signed byte dot product with
/// 32-bit accumulation. Wraps on overflow like the hardware instruction.
#[inline(always)]
pub fn quad_dot_accumulate(acc: i32, w: [i8; 4], x: [u8; 4]) -> i32 {
    let dot = w[0] as i32 * x[0] as i32
        + w[1] as i32 * x[1] as i32
        + w[2] as i32 * x[2] as i32
        + w[3] as i32 * x[3] as i32;
    acc.wrapping_add(dot)
}

/// Multiply-accumulate work done by one kernel call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    /// Scalar weight-by-input products actually executed.
    pub macs: u64,
}

impl std::ops::AddAssign for KernelStats {
    fn add_assign(&mut self, rhs: Self) {
        self.macs += rhs.macs;
    }
}

/// Panel storage shared by the sparse and dense weight forms.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Panels {
    rows: usize,
    cols: usize,
    /// Offsets into `col_idx` per block row; length `block_rows + 1`.
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    /// Four `i8` per kept block, rows of the block contiguous.
    blocks: Vec<i8>,
    /// Sum of each (unpadded) row, used for input zero-point correction.
    row_sums: Vec<i32>,
}

impl Panels {
    fn build(weight: &[i8], rows: usize, cols: usize, keep: impl Fn(usize, usize) -> bool) -> Self {
        let block_rows = rows.div_ceil(BLOCK_SIZE);
        let mut row_ptr = Vec::with_capacity(block_rows + 1);
        let mut col_idx = Vec::new();
        let mut blocks = Vec::new();
        row_ptr.push(0);
        for b in 0..block_rows {
            for c in 0..cols {
                if !keep(b, c) {
                    continue;
                }
                col_idx.push(c as u32);
                for i in 0..BLOCK_SIZE {
                    let r = b * BLOCK_SIZE + i;
                    blocks.push(if r < rows { weight[r * cols + c] } else { 0 });
                }
            }
            row_ptr.push(col_idx.len());
        }
        let row_sums = (0..rows)
            .map(|r| weight[r * cols..(r + 1) * cols].iter().map(|&w| w as i32).sum())
            .collect();
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            blocks,
            row_sums,
        }
    }

    fn block_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    fn kept_count(&self) -> usize {
        self.col_idx.len()
    }

    /// `out (rows x n) = W * input (cols x n)`, raw accumulators.
    fn gemm_into(&self, input: &[u8], n: usize, out: &mut [i32]) -> KernelStats {
        debug_assert_eq!(input.len(), self.cols * n);
        debug_assert_eq!(out.len(), self.rows * n);
        const NB: usize = TileConfig::N_BLOCK;
        const KB: usize = TileConfig::K_BLOCK;
        let mut macs = 0u64;
        let mut acc = [[0i32; NB]; BLOCK_SIZE];
        for b in 0..self.block_rows() {
            let span = self.row_ptr[b]..self.row_ptr[b + 1];
            let cols = &self.col_idx[span.clone()];
            let blocks = &self.blocks[span.start * BLOCK_SIZE..span.end * BLOCK_SIZE];
            let live_rows = (self.rows - b * BLOCK_SIZE).min(BLOCK_SIZE);
            for n0 in (0..n).step_by(NB) {
                let nt = (n - n0).min(NB);
                for row in acc.iter_mut() {
                    row[..nt].fill(0);
                }
                for (group, wgroup) in cols.chunks(KB).zip(blocks.chunks(KB * BLOCK_SIZE)) {
                    let g = group.len();
                    // Row i of the panel multiplies the i-th element of each block.
                    let mut w = [[0i8; KB]; BLOCK_SIZE];
                    for j in 0..g {
                        for (i, wi) in w.iter_mut().enumerate() {
                            wi[j] = wgroup[j * BLOCK_SIZE + i];
                        }
                    }
                    let zeros = [0u8; NB];
                    let src = |j: usize| -> &[u8] {
                        if j < g {
                            let c = group[j] as usize;
                            &input[c * n + n0..c * n + n0 + nt]
                        } else {
                            &zeros[..nt]
                        }
                    };
                    let (x0, x1, x2, x3) = (src(0), src(1), src(2), src(3));
                    for (i, acc_row) in acc.iter_mut().enumerate() {
                        let wi = w[i];
                        for t in 0..nt {
                            acc_row[t] = quad_dot_accumulate(acc_row[t], wi, [x0[t], x1[t], x2[t], x3[t]]);
                        }
                    }
                    macs += (g * BLOCK_SIZE * nt) as u64;
                }
                for (i, acc_row) in acc.iter().enumerate().take(live_rows) {
                    let r = b * BLOCK_SIZE + i;
                    out[r * n + n0..r * n + n0 + nt].copy_from_slice(&acc_row[..nt]);
                }
            }
        }
        KernelStats { macs }
    }
}

fn check_weight_qparams(qp: &QuantParams, rows: usize, cols: usize) -> Result<()> {
    if qp.target() != QuantTarget::I8 || qp.zero_point() != 0 {
        return Err(Error::QuantParams("weights need symmetric i8 parameters".into()));
    }
    match qp.granularity() {
        Granularity::PerTensor => Ok(()),
        Granularity::PerChannel { axis: 0 } => qp.check_shape(&[rows, cols]),
        Granularity::PerChannel { axis } => Err(Error::QuantParams(format!(
            "weight scales must run over the output axis, not axis {axis}"
        ))),
    }
}

/// Compressed block-sparse `i8` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseWeight {
    mask: BlockMask,
    qparams: QuantParams,
    panels: Panels,
}

impl BlockSparseWeight {
    /// Reassembles a weight from its mask and packed blocks.
    pub fn from_packed(mask: BlockMask, packed_blocks: Vec<i8>, qparams: QuantParams) -> Result<Self> {
        let (rows, cols) = (mask.rows(), mask.cols());
        check_weight_qparams(&qparams, rows, cols)?;
        if packed_blocks.len() != mask.kept_count() * BLOCK_SIZE {
            return Err(Error::Corrupt(format!(
                "{} packed values for {} kept blocks",
                packed_blocks.len(),
                mask.kept_count()
            )));
        }
        let mut dense = vec![0i8; rows * cols];
        let mut next = packed_blocks.chunks_exact(BLOCK_SIZE);
        for b in 0..mask.block_rows() {
            for c in mask.kept_cols(b) {
                let block = next.next().unwrap();
                for (i, &v) in block.iter().enumerate() {
                    let r = b * BLOCK_SIZE + i;
                    if r < rows {
                        dense[r * cols + c] = v;
                    } else if v != 0 {
                        return Err(Error::Corrupt("nonzero value in row padding".into()));
                    }
                }
            }
        }
        let panels = Panels::build(&dense, rows, cols, |b, c| mask.is_kept(b, c));
        debug_assert_eq!(panels.blocks, packed_blocks);
        Ok(Self { mask, qparams, panels })
    }

    pub fn mask(&self) -> &BlockMask {
        &self.mask
    }

    pub fn qparams(&self) -> &QuantParams {
        &self.qparams
    }

    pub fn rows(&self) -> usize {
        self.mask.rows()
    }

    pub fn cols(&self) -> usize {
        self.mask.cols()
    }

    /// Kept blocks, block-row-major then by column, four values each.
    pub fn packed_blocks(&self) -> &[i8] {
        &self.panels.blocks
    }

    pub fn decompress(&self) -> Tensor<i8> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut dense = vec![0i8; rows * cols];
        let p = &self.panels;
        for b in 0..p.block_rows() {
            for k in p.row_ptr[b]..p.row_ptr[b + 1] {
                let c = p.col_idx[k] as usize;
                for i in 0..BLOCK_SIZE {
                    let r = b * BLOCK_SIZE + i;
                    if r < rows {
                        dense[r * cols + c] = p.blocks[k * BLOCK_SIZE + i];
                    }
                }
            }
        }
        Tensor::new(vec![rows, cols], dense).expect("mask dims are positive")
    }

    /// Packed payload size in bytes (blocks plus one mask bit per block).
    pub fn byte_size(&self) -> usize {
        self.panels.blocks.len() + self.mask.total_blocks().div_ceil(8) + self.qparams.scales().len() * 4
    }

    pub(crate) fn panels(&self) -> &Panels {
        &self.panels
    }
}

/// Packs a pruned `i8` weight; fails if a pruned block holds a nonzero value.
pub fn compress_weight(pruned: &Tensor<i8>, mask: &BlockMask, qparams: &QuantParams) -> Result<BlockSparseWeight> {
    mask.check_pattern(pruned)?;
    let (rows, cols) = pruned.dims2()?;
    check_weight_qparams(qparams, rows, cols)?;
    let panels = Panels::build(pruned.data(), rows, cols, |b, c| mask.is_kept(b, c));
    Ok(BlockSparseWeight {
        mask: mask.clone(),
        qparams: qparams.clone(),
        panels,
    })
}

/// Dense `i8` weight pre-packed into 4-row panels.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseI8Weight {
    data: Tensor<i8>,
    qparams: QuantParams,
    panels: Panels,
}

impl DenseI8Weight {
    pub fn new(data: Tensor<i8>, qparams: QuantParams) -> Result<Self> {
        let (rows, cols) = data.dims2()?;
        check_weight_qparams(&qparams, rows, cols)?;
        let panels = Panels::build(data.data(), rows, cols, |_, _| true);
        Ok(Self { data, qparams, panels })
    }

    pub fn data(&self) -> &Tensor<i8> {
        &self.data
    }

    pub fn qparams(&self) -> &QuantParams {
        &self.qparams
    }

    pub fn rows(&self) -> usize {
        self.panels.rows
    }

    pub fn cols(&self) -> usize {
        self.panels.cols
    }

    pub(crate) fn panels(&self) -> &Panels {
        &self.panels
    }
}

/// Either integer weight form accepted by the GEMM entry points.
#[derive(Debug, Clone, Copy)]
pub enum QuantWeightRef<'a> {
    Dense(&'a DenseI8Weight),
    Sparse(&'a BlockSparseWeight),
}

impl<'a> QuantWeightRef<'a> {
    pub(crate) fn panels(self) -> &'a Panels {
        match self {
            QuantWeightRef::Dense(w) => w.panels(),
            QuantWeightRef::Sparse(w) => w.panels(),
        }
    }

    pub fn qparams(self) -> &'a QuantParams {
        match self {
            QuantWeightRef::Dense(w) => w.qparams(),
            QuantWeightRef::Sparse(w) => w.qparams(),
        }
    }

    pub fn rows(self) -> usize {
        self.panels().rows
    }

    pub fn cols(self) -> usize {
        self.panels().cols
    }

    pub fn row_sums(self) -> &'a [i32] {
        &self.panels().row_sums
    }

    pub fn kept_blocks(self) -> usize {
        self.panels().kept_count()
    }

    /// Raw `i32` accumulators for a `cols x n` input written to `out`.
    pub fn gemm_into(self, input: &[u8], n: usize, out: &mut [i32]) -> Result<KernelStats> {
        let p = self.panels();
        if input.len() != p.cols * n || out.len() != p.rows * n {
            return Err(Error::Shape(format!(
                "gemm of {}x{} weight with {} input / {} output elements at n={n}",
                p.rows,
                p.cols,
                input.len(),
                out.len()
            )));
        }
        if p.cols > MAX_K {
            return Err(Error::Shape(format!("inner dimension {} exceeds {MAX_K}", p.cols)));
        }
        Ok(p.gemm_into(input, n, out))
    }
}

/// `out[m][n] = sum_k weight[m][k] * input[k][n]` in exact `i32` arithmetic.
///
/// Exact for `K <= MAX_K`.
pub fn dense_gemm_i32(weight: &Tensor<i8>, input: &Tensor<u8>) -> Result<Tensor<i32>> {
    let (m, k) = weight.dims2()?;
    let (k2, n) = input.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!("weight {m}x{k} times input {k2}x{n}")));
    }
    if k > MAX_K {
        return Err(Error::Shape(format!("inner dimension {k} exceeds {MAX_K}")));
    }
    let panels = Panels::build(weight.data(), m, k, |_, _| true);
    let mut out = vec![0i32; m * n];
    panels.gemm_into(input.data(), n, &mut out);
    Tensor::new(vec![m, n], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostOpKind {
    /// Raw accumulators.
    None,
    BiasAdd,
    BiasAddGelu,
    BiasAddRelu,
    Dequantize,
    Requantize,
}

/// Epilogue applied to each accumulator once the k-loop has finished.
///
/// With input parameters present the accumulator is first corrected for the
/// input zero point (`acc - zp_x * row_sum`). Bias values are in accumulator
/// units (`scale_w * scale_x`). `BiasAddGelu`/`BiasAddRelu` and `Dequantize`
/// produce `f32`; `Requantize` produces the integer type of the output
/// parameters; the others keep `i32`.
#[derive(Debug, Clone, PartialEq)]
pub struct PostOp {
    pub kind: PostOpKind,
    pub bias: Option<Tensor<i32>>,
    pub input_qparams: Option<QuantParams>,
    pub output_qparams: Option<QuantParams>,
}

impl PostOp {
    pub fn none() -> Self {
        Self {
            kind: PostOpKind::None,
            bias: None,
            input_qparams: None,
            output_qparams: None,
        }
    }

    pub fn bias_add(bias: Tensor<i32>, input_qparams: Option<QuantParams>) -> Self {
        Self {
            kind: PostOpKind::BiasAdd,
            bias: Some(bias),
            input_qparams,
            output_qparams: None,
        }
    }

    pub fn bias_add_gelu(bias: Tensor<i32>, input_qparams: QuantParams) -> Self {
        Self {
            kind: PostOpKind::BiasAddGelu,
            bias: Some(bias),
            input_qparams: Some(input_qparams),
            output_qparams: None,
        }
    }

    pub fn bias_add_relu(bias: Tensor<i32>, input_qparams: QuantParams) -> Self {
        Self {
            kind: PostOpKind::BiasAddRelu,
            ..Self::bias_add_gelu(bias, input_qparams)
        }
    }

    pub fn dequantize(input_qparams: QuantParams, bias: Option<Tensor<i32>>) -> Self {
        Self {
            kind: PostOpKind::Dequantize,
            bias,
            input_qparams: Some(input_qparams),
            output_qparams: None,
        }
    }

    pub fn requantize(input_qparams: QuantParams, output_qparams: QuantParams, bias: Option<Tensor<i32>>) -> Self {
        Self {
            kind: PostOpKind::Requantize,
            bias,
            input_qparams: Some(input_qparams),
            output_qparams: Some(output_qparams),
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        let needs_bias = matches!(
            self.kind,
            PostOpKind::BiasAdd | PostOpKind::BiasAddGelu | PostOpKind::BiasAddRelu
        );
        if needs_bias && self.bias.is_none() {
            return Err(Error::MissingBias(format!("{:?}", self.kind)));
        }
        if self.kind == PostOpKind::None && self.bias.is_some() {
            return Err(Error::Config("bias given to a post-op without bias".into()));
        }
        if let Some(bias) = &self.bias {
            if bias.len() != m {
                return Err(Error::Shape(format!("bias of length {} for {m} output rows", bias.len())));
            }
        }
        let needs_scales = !matches!(self.kind, PostOpKind::None | PostOpKind::BiasAdd);
        if needs_scales && self.input_qparams.is_none() {
            return Err(Error::Config(format!("{:?} needs input quantization parameters", self.kind)));
        }
        if let Some(qp) = &self.input_qparams {
            if qp.granularity() != Granularity::PerTensor {
                return Err(Error::QuantParams("input parameters must be per-tensor".into()));
            }
        }
        if self.kind == PostOpKind::Requantize {
            match &self.output_qparams {
                Some(qp) if qp.granularity() == Granularity::PerTensor => {}
                Some(_) => return Err(Error::QuantParams("output parameters must be per-tensor".into())),
                None => return Err(Error::Config("requantize needs output parameters".into())),
            }
        }
        Ok(())
    }
}

/// tanh approximation of GELU, shared by the graph executor.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Applies `post` to raw accumulators of shape `m x n`.
pub fn apply_post_op(
    acc: &[i32],
    m: usize,
    n: usize,
    weight_qparams: &QuantParams,
    row_sums: &[i32],
    post: &PostOp,
) -> Result<DynTensor> {
    post.validate(m)?;
    if acc.len() != m * n || row_sums.len() != m {
        return Err(Error::Shape("accumulator size mismatch".into()));
    }
    let shape = vec![m, n];
    let zp_x = post.input_qparams.as_ref().map_or(0, |qp| qp.zero_point());
    let s_x = post.input_qparams.as_ref().map_or(1.0, |qp| qp.scale(0));
    let corrected = |r: usize, v: i32| -> i32 {
        let bias = post.bias.as_ref().map_or(0, |b| b.data()[r]);
        v.wrapping_sub(zp_x.wrapping_mul(row_sums[r])).wrapping_add(bias)
    };
    let map_rows = |f: &dyn Fn(usize, i32) -> f32| -> Vec<f32> {
        acc.iter().enumerate().map(|(i, &v)| f(i / n, v)).collect()
    };
    Ok(match post.kind {
        PostOpKind::None => Tensor::new(shape, acc.to_vec())?.into(),
        PostOpKind::BiasAdd => Tensor::new(
            shape,
            acc.iter().enumerate().map(|(i, &v)| corrected(i / n, v)).collect(),
        )?
        .into(),
        PostOpKind::Dequantize => {
            let data = map_rows(&|r, v| corrected(r, v) as f32 * (weight_qparams.scale(r) * s_x));
            Tensor::new(shape, data)?.into()
        }
        PostOpKind::BiasAddGelu => {
            let data = map_rows(&|r, v| gelu(corrected(r, v) as f32 * (weight_qparams.scale(r) * s_x)));
            Tensor::new(shape, data)?.into()
        }
        PostOpKind::BiasAddRelu => {
            let data = map_rows(&|r, v| (corrected(r, v) as f32 * (weight_qparams.scale(r) * s_x)).max(0.0));
            Tensor::new(shape, data)?.into()
        }
        PostOpKind::Requantize => {
            let out_qp = post.output_qparams.as_ref().unwrap();
            let s_out = out_qp.scale(0) as f64;
            let (lo, hi) = out_qp.target().range();
            let zp_out = out_qp.zero_point();
            let q: Vec<i32> = acc
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let r = i / n;
                    let real = corrected(r, v) as f64 * (weight_qparams.scale(r) as f64 * s_x as f64);
                    // scale of 1 on the real value divided by s_out
                    quantize_scalar(real / s_out, 1.0, zp_out, lo, hi)
                })
                .collect();
            match out_qp.target() {
                QuantTarget::I8 => Tensor::new(shape, q.into_iter().map(i8::from_clamped).collect())?.into(),
                QuantTarget::U8 => Tensor::new(shape, q.into_iter().map(u8::from_clamped).collect())?.into(),
            }
        }
    })
}

/// Block-sparse GEMM with a fused post-operator.
pub fn sparse_gemm(weight: &BlockSparseWeight, input: &Tensor<u8>, post: &PostOp) -> Result<DynTensor> {
    sparse_gemm_with_stats(weight, input, post).map(|(t, _)| t)
}

/// [`sparse_gemm`] that also reports the executed multiply-accumulates.
pub fn sparse_gemm_with_stats(
    weight: &BlockSparseWeight,
    input: &Tensor<u8>,
    post: &PostOp,
) -> Result<(DynTensor, KernelStats)> {
    quant_gemm_with_stats(QuantWeightRef::Sparse(weight), input, post)
}

pub fn quant_gemm_with_stats(
    weight: QuantWeightRef<'_>,
    input: &Tensor<u8>,
    post: &PostOp,
) -> Result<(DynTensor, KernelStats)> {
    let (k, n) = input.dims2()?;
    if k != weight.cols() {
        return Err(Error::Shape(format!(
            "weight {}x{} times input {k}x{n}",
            weight.rows(),
            weight.cols()
        )));
    }
    let m = weight.rows();
    post.validate(m)?;
    let mut acc = vec![0i32; m * n];
    let stats = weight.gemm_into(input.data(), n, &mut acc)?;
    let out = apply_post_op(&acc, m, n, weight.qparams(), weight.row_sums(), post)?;
    Ok((out, stats))
}

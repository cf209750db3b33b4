//! Block-wise structured pruning and the distillation loss used while
//! fine-tuning pruned students.
//!
//! A block is [`BLOCK_SIZE`] consecutive rows of a `rows x cols` weight at a
//! single column, where rows index the output dimension and columns the
//! input dimension. Blocks are scored by the mean magnitude of their
//! elements and the lowest-scoring blocks are zeroed.

use std::cmp::Ordering;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BLOCK_SIZE: usize = 4;

/// Which 4x1 blocks of a weight survive pruning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    rows: usize,
    cols: usize,
    kept: Vec<bool>,
}

impl BlockMask {
    pub fn all_kept(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, true)
    }

    pub fn all_pruned(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, false)
    }

    fn filled(rows: usize, cols: usize, kept: bool) -> Self {
        let block_rows = rows.div_ceil(BLOCK_SIZE);
        Self {
            rows,
            cols,
            kept: vec![kept; block_rows * cols],
        }
    }

    /// Builds a mask from a block-row-major keep flag per block.
    pub fn from_kept(rows: usize, cols: usize, kept: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(vec![rows, cols]));
        }
        let expected = rows.div_ceil(BLOCK_SIZE) * cols;
        if kept.len() != expected {
            return Err(Error::Shape(format!(
                "mask for {rows}x{cols} needs {expected} block flags, got {}",
                kept.len()
            )));
        }
        Ok(Self { rows, cols, kept })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row count after zero-padding up to a multiple of the block size.
    pub fn padded_rows(&self) -> usize {
        self.block_rows() * BLOCK_SIZE
    }

    pub fn block_rows(&self) -> usize {
        self.rows.div_ceil(BLOCK_SIZE)
    }

    pub fn total_blocks(&self) -> usize {
        self.kept.len()
    }

    pub fn is_kept(&self, block_row: usize, col: usize) -> bool {
        self.kept[block_row * self.cols + col]
    }

    pub fn kept_flags(&self) -> &[bool] {
        &self.kept
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn achieved_sparsity(&self) -> f64 {
        1.0 - self.kept_count() as f64 / self.total_blocks() as f64
    }

    /// Kept columns of one block row, ascending.
    pub fn kept_cols(&self, block_row: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.kept[block_row * self.cols..(block_row + 1) * self.cols];
        row.iter().enumerate().filter(|(_, &k)| k).map(|(c, _)| c)
    }

    /// Packs the keep flags LSB-first into bytes.
    pub fn to_bitset(&self) -> Vec<u8> {
        let mut bytes = vec![0u8; self.kept.len().div_ceil(8)];
        for (i, _) in self.kept.iter().enumerate().filter(|(_, &k)| k) {
            bytes[i / 8] |= 1 << (i % 8);
        }
        bytes
    }

    pub fn from_bitset(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let total = rows.div_ceil(BLOCK_SIZE) * cols;
        if bytes.len() != total.div_ceil(8) {
            return Err(Error::Corrupt(format!(
                "mask bitset for {rows}x{cols} needs {} bytes, got {}",
                total.div_ceil(8),
                bytes.len()
            )));
        }
        let kept = (0..total).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
        Self::from_kept(rows, cols, kept)
    }

    /// Checks that every element of a pruned block in `weight` is zero.
    pub fn check_pattern<T: Element>(&self, weight: &Tensor<T>) -> Result<()> {
        let (rows, cols) = weight.dims2()?;
        if rows != self.rows || cols != self.cols {
            return Err(Error::Shape(format!(
                "weight {rows}x{cols} does not match mask {}x{}",
                self.rows, self.cols
            )));
        }
        let data = weight.data();
        for b in 0..self.block_rows() {
            for c in 0..cols {
                if self.is_kept(b, c) {
                    continue;
                }
                let nonzero = (b * BLOCK_SIZE..((b + 1) * BLOCK_SIZE).min(rows))
                    .any(|r| data[r * cols + c] != T::zero());
                if nonzero {
                    return Err(Error::PatternViolation { block_row: b, col: c });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneHeuristic {
    AverageMagnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub target_sparsity: f64,
    pub heuristic: PruneHeuristic,
}

impl PruneConfig {
    pub fn new(target_sparsity: f64) -> Result<Self> {
        let cfg = Self {
            target_sparsity,
            heuristic: PruneHeuristic::AverageMagnitude,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target_sparsity) {
            return Err(Error::Config(format!(
                "target sparsity {} outside [0, 1]",
                self.target_sparsity
            )));
        }
        Ok(())
    }
}

/// Zero-pads the rows of a 2-D weight up to the next multiple of the block size.
pub fn pad_rows<T: Element>(weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = weight.dims2()?;
    let padded = rows.div_ceil(BLOCK_SIZE) * BLOCK_SIZE;
    if padded == rows {
        return Ok(weight.clone());
    }
    let mut data = weight.data().to_vec();
    data.resize(padded * cols, T::zero());
    Tensor::new(vec![padded, cols], data)
}

/// Mean magnitude of every 4x1 block; output is `(rows / 4) x cols`.
pub fn score_blocks<T: Float + Element>(weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = weight.dims2()?;
    if rows % BLOCK_SIZE != 0 {
        return Err(Error::Shape(format!(
            "{rows} rows are not a multiple of the block size {BLOCK_SIZE}; pad first"
        )));
    }
    let data = weight.data();
    let inv = T::from(BLOCK_SIZE).unwrap().recip();
    let block_rows = rows / BLOCK_SIZE;
    let mut scores = Vec::with_capacity(block_rows * cols);
    for b in 0..block_rows {
        for c in 0..cols {
            let sum = (0..BLOCK_SIZE).fold(T::zero(), |acc, i| acc + data[(b * BLOCK_SIZE + i) * cols + c].abs());
            scores.push(sum * inv);
        }
    }
    Tensor::new(vec![block_rows, cols], scores)
}

/// Number of blocks removed for a target: `ceil(target * total)`.
///
/// The product is nudged down by a relative epsilon so that targets such as
/// `0.3` on ten blocks remove three blocks rather than four.
pub fn blocks_to_prune(target: f64, total_blocks: usize) -> usize {
    let exact = target * total_blocks as f64;
    let n = (exact - exact.abs() * 1e-12).ceil().max(0.0) as usize;
    n.min(total_blocks)
}

/// Prunes the lowest-scoring blocks of a 2-D weight.
///
/// Rows that are not a multiple of the block size are zero-padded for
/// scoring; the tail block therefore scores the mean over four elements with
/// the padding counted as zero. The returned weight has the original shape.
pub fn prune_blockwise<T: Float + Element>(
    weight: &Tensor<T>,
    cfg: &PruneConfig,
) -> Result<(BlockMask, Tensor<T>)> {
    cfg.validate()?;
    let (rows, cols) = weight.dims2()?;
    let scores = score_blocks(&pad_rows(weight)?)?;
    let scores = scores.data();

    // Ascending score, ties broken by (block_row, col), i.e. by flat index.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });

    let n_prune = blocks_to_prune(cfg.target_sparsity, scores.len());
    let mut kept = vec![true; scores.len()];
    for &idx in &order[..n_prune] {
        kept[idx] = false;
    }
    let mask = BlockMask::from_kept(rows, cols, kept)?;

    let mut pruned = weight.clone();
    let data = pruned.data_mut();
    for r in 0..rows {
        let b = r / BLOCK_SIZE;
        for c in 0..cols {
            if !mask.is_kept(b, c) {
                data[r * cols + c] = T::zero();
            }
        }
    }
    Ok((mask, pruned))
}

/// Weights of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdLossConfig {
    pub lambda_kd: f64,
    pub lambda_mlm: f64,
    pub temperature: f64,
}

impl Default for KdLossConfig {
    fn default() -> Self {
        Self {
            lambda_kd: 1.0,
            lambda_mlm: 0.0,
            temperature: 2.0,
        }
    }
}

impl KdLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.lambda_kd >= 0.0 && self.lambda_mlm >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

fn log_softmax<T: Float>(logits: &[T], inv_temp: T) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x * inv_temp));
    let lse = logits
        .iter()
        .fold(T::zero(), |acc, &x| acc + (x * inv_temp - max).exp())
        .ln()
        + max;
    logits.iter().map(|&x| x * inv_temp - lse).collect()
}

/// Forward value of the distillation loss, averaged over rows.
///
/// `lambda_kd * T^2 * KL(softmax(teacher / T) || softmax(student / T))`
/// plus `lambda_mlm` times the cross entropy of the student against `labels`.
/// The last axis holds the classes.
pub fn kd_loss<T: Float + Element>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    labels: Option<&[usize]>,
    cfg: &KdLossConfig,
) -> Result<T> {
    cfg.validate()?;
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let classes = *student.shape().last().unwrap();
    let rows = student.len() / classes;
    if cfg.lambda_mlm > 0.0 {
        match labels {
            None => return Err(Error::Config("labels are required when lambda_mlm > 0".into())),
            Some(l) if l.len() != rows => {
                return Err(Error::Shape(format!("{} labels for {rows} rows", l.len())))
            }
            Some(l) if l.iter().any(|&c| c >= classes) => {
                return Err(Error::Config(format!("label out of range for {classes} classes")))
            }
            _ => {}
        }
    }

    let cast = |v: f64| T::from(v).unwrap();
    let temp = cast(cfg.temperature);
    let mut kd = T::zero();
    let mut ce = T::zero();
    for r in 0..rows {
        let s = &student.data()[r * classes..(r + 1) * classes];
        let t = &teacher.data()[r * classes..(r + 1) * classes];
        if cfg.lambda_kd > 0.0 {
            let log_q = log_softmax(s, temp.recip());
            let log_p = log_softmax(t, temp.recip());
            let kl = log_p
                .iter()
                .zip(&log_q)
                .fold(T::zero(), |acc, (&lp, &lq)| acc + lp.exp() * (lp - lq));
            kd = kd + kl.max(T::zero());
        }
        if let Some(labels) = labels.filter(|_| cfg.lambda_mlm > 0.0) {
            ce = ce - log_softmax(s, T::one())[labels[r]];
        }
    }
    let n = cast(rows as f64);
    Ok(cast(cfg.lambda_kd) * temp * temp * kd / n + cast(cfg.lambda_mlm) * ce / n)
}

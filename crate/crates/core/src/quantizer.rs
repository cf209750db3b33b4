//! Post-training quantization: min/max calibration, affine quantization and
//! greedy accuracy-aware fallback to f32.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{DynTensor, Element, Granularity, QuantParams, QuantTarget, Tensor};

/// Integer storage types produced by quantization.
pub trait QuantInt: Element + Copy {
    const TARGET: QuantTarget;
    fn from_clamped(v: i32) -> Self;
    fn widen(self) -> i32;
}

impl QuantInt for i8 {
    const TARGET: QuantTarget = QuantTarget::I8;
    #[inline]
    fn from_clamped(v: i32) -> Self {
        v.clamp(-128, 127) as i8
    }
    #[inline]
    fn widen(self) -> i32 {
        self as i32
    }
}

impl QuantInt for u8 {
    const TARGET: QuantTarget = QuantTarget::U8;
    #[inline]
    fn from_clamped(v: i32) -> Self {
        v.clamp(0, 255) as u8
    }
    #[inline]
    fn widen(self) -> i32 {
        self as i32
    }
}

/// `clamp(round_half_even(x / scale) + zero_point)` into `[lo, hi]`.
///
/// NaN maps to the zero point; infinities saturate.
#[inline]
pub fn quantize_scalar(x: f64, scale: f32, zero_point: i32, lo: i32, hi: i32) -> i32 {
    if x.is_nan() {
        return zero_point.clamp(lo, hi);
    }
    // float -> int casts saturate
    let q = (x / scale as f64).round_ties_even() as i32;
    q.saturating_add(zero_point).clamp(lo, hi)
}

#[inline]
pub fn dequantize_scalar(q: i32, scale: f32, zero_point: i32) -> f64 {
    (q - zero_point) as f64 * scale as f64
}

/// Running min/max per tensor or per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    granularity: Granularity,
    min: Vec<f64>,
    max: Vec<f64>,
    count: u64,
}

impl Default for CalibrationStats {
    fn default() -> Self {
        Self::per_tensor()
    }
}

fn channel_layout(shape: &[usize], axis: usize) -> Result<(usize, usize)> {
    let extent = *shape.get(axis).ok_or_else(|| {
        Error::Calibration(format!("channel axis {axis} out of range for shape {shape:?}"))
    })?;
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((extent, inner))
}

impl CalibrationStats {
    pub fn per_tensor() -> Self {
        Self {
            granularity: Granularity::PerTensor,
            min: Vec::new(),
            max: Vec::new(),
            count: 0,
        }
    }

    pub fn per_channel(axis: usize) -> Self {
        Self {
            granularity: Granularity::PerChannel { axis },
            ..Self::per_tensor()
        }
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }

    pub fn observation_count(&self) -> u64 {
        self.count
    }

    /// Widens the running range to cover every element of `batch`.
    pub fn observe<T: Float + Element>(&mut self, batch: &Tensor<T>) -> Result<()> {
        match self.granularity {
            Granularity::PerTensor => self.observe_slice(batch.data()),
            Granularity::PerChannel { axis } => {
                let (extent, inner) = channel_layout(batch.shape(), axis)?;
                if self.count > 0 && self.min.len() != extent {
                    return Err(Error::Calibration(format!(
                        "batch has {extent} channels, statistics track {}",
                        self.min.len()
                    )));
                }
                if self.count == 0 {
                    self.min = vec![f64::INFINITY; extent];
                    self.max = vec![f64::NEG_INFINITY; extent];
                }
                for (i, v) in batch.data().iter().enumerate() {
                    let c = (i / inner) % extent;
                    let v = v.to_f64().unwrap();
                    if v < self.min[c] {
                        self.min[c] = v;
                    }
                    if v > self.max[c] {
                        self.max[c] = v;
                    }
                }
                self.count += 1;
                Ok(())
            }
        }
    }

    pub(crate) fn observe_slice<T: Float>(&mut self, data: &[T]) -> Result<()> {
        if self.granularity != Granularity::PerTensor {
            return Err(Error::Calibration("slice observation needs per-tensor statistics".into()));
        }
        let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let v = v.to_f64().unwrap();
            (lo.min(v), hi.max(v))
        });
        if self.count == 0 {
            self.min = vec![lo];
            self.max = vec![hi];
        } else {
            self.min[0] = self.min[0].min(lo);
            self.max[0] = self.max[0].max(hi);
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &CalibrationStats) -> Result<()> {
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        if self.granularity != other.granularity || self.min.len() != other.min.len() {
            return Err(Error::Calibration("cannot merge incompatible statistics".into()));
        }
        for c in 0..self.min.len() {
            self.min[c] = self.min[c].min(other.min[c]);
            self.max[c] = self.max[c].max(other.max[c]);
        }
        self.count += other.count;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    /// `i8`, zero point 0; used for weights.
    SymmetricI8,
    /// `u8` with a zero point; used for activations.
    AsymmetricU8,
}

fn positive_scale(s: f64) -> f32 {
    (s as f32).max(f32::MIN_POSITIVE)
}

/// Derives scale and zero point from calibration statistics.
///
/// The asymmetric range is widened to include zero so that zero is exactly
/// representable and the zero point stays inside `[0, 255]`.
pub fn derive_qparams(stats: &CalibrationStats, scheme: QuantScheme) -> Result<QuantParams> {
    if stats.count == 0 {
        return Err(Error::Calibration("no observations recorded".into()));
    }
    match scheme {
        QuantScheme::SymmetricI8 => {
            let scales = stats
                .min
                .iter()
                .zip(&stats.max)
                .map(|(lo, hi)| {
                    let amax = lo.abs().max(hi.abs());
                    if amax == 0.0 {
                        1.0
                    } else {
                        positive_scale(amax / 127.0)
                    }
                })
                .collect();
            QuantParams::new(scales, 0, stats.granularity, QuantTarget::I8)
        }
        QuantScheme::AsymmetricU8 => {
            if stats.granularity != Granularity::PerTensor {
                return Err(Error::Calibration(
                    "asymmetric quantization is per-tensor only".into(),
                ));
            }
            let lo = stats.min[0].min(0.0);
            let hi = stats.max[0].max(0.0);
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::Calibration(format!("non-finite range [{lo}, {hi}]")));
            }
            if hi == lo {
                return QuantParams::per_tensor(1.0, 0, QuantTarget::U8);
            }
            let scale = positive_scale((hi - lo) / 255.0);
            let zp = (-lo / scale as f64).round_ties_even().clamp(0.0, 255.0) as i32;
            QuantParams::per_tensor(scale, zp, QuantTarget::U8)
        }
    }
}

fn channel_index_fn(qp: &QuantParams, shape: &[usize]) -> Result<impl Fn(usize) -> usize> {
    qp.check_shape(shape)?;
    let (extent, inner) = match qp.granularity() {
        Granularity::PerTensor => (1, 1),
        Granularity::PerChannel { axis } => channel_layout(shape, axis)?,
    };
    Ok(move |i: usize| (i / inner) % extent)
}

/// Quantizes into the integer type named by `Q`, which must match the target.
pub fn quantize_as<T: Float + Element, Q: QuantInt>(x: &Tensor<T>, qp: &QuantParams) -> Result<Tensor<Q>> {
    if qp.target() != Q::TARGET {
        return Err(Error::DType {
            expected: qp.target().dtype().to_string(),
            actual: Q::DTYPE.to_string(),
        });
    }
    let channel = channel_index_fn(qp, x.shape())?;
    let (lo, hi) = qp.target().range();
    let zp = qp.zero_point();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let q = quantize_scalar(v.to_f64().unwrap_or(f64::NAN), qp.scale(channel(i)), zp, lo, hi);
            Q::from_clamped(q)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Quantizes to `i8` or `u8` according to the parameters' target.
pub fn quantize_tensor<T: Float + Element>(x: &Tensor<T>, qp: &QuantParams) -> Result<DynTensor> {
    Ok(match qp.target() {
        QuantTarget::I8 => quantize_as::<T, i8>(x, qp)?.into(),
        QuantTarget::U8 => quantize_as::<T, u8>(x, qp)?.into(),
    })
}

/// `x = (q - zero_point) * scale`, per channel when the parameters say so.
pub fn dequantize_as<Q: QuantInt, F: Float + Element>(q: &Tensor<Q>, qp: &QuantParams) -> Result<Tensor<F>> {
    let channel = channel_index_fn(qp, q.shape())?;
    let zp = qp.zero_point();
    let data = q
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| F::from(dequantize_scalar(v.widen(), qp.scale(channel(i)), zp)).unwrap())
        .collect();
    Tensor::new(q.shape().to_vec(), data)
}

pub fn dequantize_tensor(q: &DynTensor, qp: &QuantParams) -> Result<Tensor<f32>> {
    match q {
        DynTensor::I8(t) => dequantize_as(t, qp),
        DynTensor::U8(t) => dequantize_as(t, qp),
        other => Err(Error::DType {
            expected: "i8 or u8".into(),
            actual: other.dtype().to_string(),
        }),
    }
}

/// Configuration of the accuracy-aware fallback search.
pub struct TuneConfig<'a> {
    /// Evaluates a candidate graph end to end; larger is better.
    pub metric_fn: Box<dyn Fn(&Graph) -> Result<f64> + 'a>,
    pub baseline_score: f64,
    pub max_relative_drop: f64,
    /// Quantized GEMM node ids tried in order. `None` ranks every quantized
    /// GEMM by how much reverting it alone improves the metric.
    pub candidate_order: Option<Vec<String>>,
}

impl<'a> TuneConfig<'a> {
    pub fn new(metric_fn: impl Fn(&Graph) -> Result<f64> + 'a, baseline_score: f64) -> Self {
        Self {
            metric_fn: Box::new(metric_fn),
            baseline_score,
            max_relative_drop: 0.01,
            candidate_order: None,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.baseline_score * (1.0 - self.max_relative_drop)
    }
}

/// One step of the fallback search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneStep {
    pub node: String,
    pub score: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub graph: Graph,
    pub score: f64,
    pub reverted: Vec<String>,
    pub history: Vec<TuneStep>,
}

/// Scores every single-node fallback and orders node ids best first.
pub fn rank_by_sensitivity(graph: &Graph, cfg: &TuneConfig<'_>) -> Result<Vec<(String, f64)>> {
    let mut ranked = Vec::new();
    for id in graph.quantized_gemm_ids() {
        let score = (cfg.metric_fn)(&graph.revert_to_f32(&id)?)?;
        ranked.push((id, score));
    }
    // stable: equal scores keep graph order
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    Ok(ranked)
}

/// Greedy accuracy-aware fallback.
///
/// Candidates are reverted to f32 one at a time; a reversion is kept only if
/// it strictly improves the metric, and the search stops as soon as the score
/// reaches `baseline * (1 - max_relative_drop)`.
pub fn accuracy_aware_tune(graph: &Graph, cfg: &TuneConfig<'_>) -> Result<TuneOutcome> {
    if !(cfg.max_relative_drop >= 0.0) {
        return Err(Error::Config("max_relative_drop must be >= 0".into()));
    }
    let threshold = cfg.threshold();
    let mut current = graph.clone();
    let mut score = (cfg.metric_fn)(&current)?;
    let mut outcome_history = Vec::new();
    let mut reverted = Vec::new();
    if score >= threshold {
        return Ok(TuneOutcome {
            graph: current,
            score,
            reverted,
            history: outcome_history,
        });
    }

    let order = match &cfg.candidate_order {
        Some(order) => order.clone(),
        None => rank_by_sensitivity(graph, cfg)?.into_iter().map(|(id, _)| id).collect(),
    };
    for id in order {
        let candidate = current.revert_to_f32(&id)?;
        let candidate_score = (cfg.metric_fn)(&candidate)?;
        let accepted = candidate_score > score;
        outcome_history.push(TuneStep {
            node: id.clone(),
            score: candidate_score,
            accepted,
        });
        if accepted {
            current = candidate;
            score = candidate_score;
            reverted.push(id);
            if score >= threshold {
                return Ok(TuneOutcome {
                    graph: current,
                    score,
                    reverted,
                    history: outcome_history,
                });
            }
        }
    }
    Err(Error::TuningFailed {
        best: Box::new(current),
        best_score: score,
        threshold,
    })
}

//! Dense row-major tensors, element types and quantization parameters.
//!
//! A [`Tensor`] is generic over its element type. The engine stores `f32`
//! activations, `i8`/`u8` quantized data and `i32` GEMM accumulators; the
//! numeric routines that only need floating point arithmetic also accept
//! `f64`. [`DynTensor`] erases the element type for graph edges and
//! serialization.

use std::fmt;

use bytemuck::Pod;
use num_traits::{NumCast, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I8,
    U8,
    I32,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::I8 | DType::U8 => 1,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, DType::I8 | DType::U8 | DType::I32)
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I8 => "i8",
            DType::U8 => "u8",
            DType::I32 => "i32",
        };
        f.write_str(s)
    }
}

/// Scalar types that can be stored in a [`Tensor`].
pub trait Element:
    Pod + NumCast + ToPrimitive + Zero + PartialOrd + fmt::Debug + Send + Sync + 'static
{
    const DTYPE: DType;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
}
impl Element for f64 {
    const DTYPE: DType = DType::F64;
}
impl Element for i8 {
    const DTYPE: DType = DType::I8;
}
impl Element for u8 {
    const DTYPE: DType = DType::U8;
}
impl Element for i32 {
    const DTYPE: DType = DType::I32;
}

/// Row-major strides for `shape`, in elements.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {len} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], fill: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let len = check_shape(shape)?;
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        let mut stride = 1;
        for (&i, &d) in index.iter().zip(&self.shape).rev() {
            if i >= d {
                return None;
            }
            off += i * stride;
            stride *= d;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self
            .offset(index)
            .ok_or_else(|| Error::Shape(format!("index {index:?} out of bounds for {:?}", self.shape)))?;
        self.data[off] = value;
        Ok(())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Rank {
                expected: 2,
                actual: self.shape.clone(),
            }),
        }
    }

    /// Metadata-only reshape; the element count must be preserved.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Largest absolute elementwise difference, or `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        let mut worst = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            let a = a.to_f64().unwrap_or(f64::NAN);
            let b = b.to_f64().unwrap_or(f64::NAN);
            let d = (a - b).abs();
            if d.is_nan() {
                if a.to_bits() != b.to_bits() {
                    return Some(f64::INFINITY);
                }
            } else if d > worst {
                worst = d;
            }
        }
        Some(worst)
    }

    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        if T::DTYPE.is_integer() && tol == 0.0 {
            return self.shape == other.shape && self.data == other.data;
        }
        matches!(self.max_abs_diff(other), Some(d) if d <= tol)
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 16;
        write!(f, "Tensor<{}>{:?} ", T::DTYPE, self.shape)?;
        let list = f.debug_list().entries(self.data.iter().take(SHOWN)).finish();
        if self.data.len() > SHOWN {
            write!(f, " .. ({} more)", self.data.len() - SHOWN)?;
        }
        list
    }
}

/// A tensor whose element type is known only at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I8(Tensor<i8>),
    U8(Tensor<u8>),
    I32(Tensor<i32>),
}

macro_rules! dyn_dispatch {
    ($value:expr, $t:ident => $body:expr) => {
        match $value {
            DynTensor::F32($t) => $body,
            DynTensor::F64($t) => $body,
            DynTensor::I8($t) => $body,
            DynTensor::U8($t) => $body,
            DynTensor::I32($t) => $body,
        }
    };
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        dyn_dispatch!(self, t => t.dtype())
    }

    pub fn shape(&self) -> &[usize] {
        dyn_dispatch!(self, t => t.shape())
    }

    pub fn len(&self) -> usize {
        dyn_dispatch!(self, t => t.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().size_of()
    }

    /// Raw element bytes in little-endian order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        match self {
            DynTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DynTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DynTensor::I8(t) => out.extend(t.data().iter().map(|&v| v as u8)),
            DynTensor::U8(t) => out.extend_from_slice(t.data()),
            DynTensor::I32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn from_le_bytes(dtype: DType, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let len = check_shape(&shape)?;
        if bytes.len() != len * dtype.size_of() {
            return Err(Error::Corrupt(format!(
                "{dtype} tensor {shape:?} needs {} bytes, blob holds {}",
                len * dtype.size_of(),
                bytes.len()
            )));
        }
        Ok(match dtype {
            DType::F32 => DynTensor::F32(Tensor::new(
                shape,
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            )?),
            DType::F64 => DynTensor::F64(Tensor::new(
                shape,
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            )?),
            DType::I8 => DynTensor::I8(Tensor::new(shape, bytes.iter().map(|&b| b as i8).collect())?),
            DType::U8 => DynTensor::U8(Tensor::new(shape, bytes.to_vec())?),
            DType::I32 => DynTensor::I32(Tensor::new(
                shape,
                bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
            )?),
        })
    }
}

macro_rules! dyn_from {
    ($($t:ty => $variant:ident),*) => {$(
        impl From<Tensor<$t>> for DynTensor {
            fn from(t: Tensor<$t>) -> Self {
                DynTensor::$variant(t)
            }
        }
    )*};
}
dyn_from!(f32 => F32, f64 => F64, i8 => I8, u8 => U8, i32 => I32);

fn cast_fill<T: Element>(fill: f64) -> Result<T> {
    <T as NumCast>::from(fill)
        .ok_or_else(|| Error::Config(format!("fill value {fill} is not representable as {}", T::DTYPE)))
}

/// Creates a tensor of `shape` with every element set to `fill`.
pub fn tensor_create(shape: &[usize], dtype: DType, fill: f64) -> Result<DynTensor> {
    Ok(match dtype {
        DType::F32 => Tensor::full(shape, cast_fill::<f32>(fill)?)?.into(),
        DType::F64 => Tensor::full(shape, fill)?.into(),
        DType::I8 => Tensor::full(shape, cast_fill::<i8>(fill)?)?.into(),
        DType::U8 => Tensor::full(shape, cast_fill::<u8>(fill)?)?.into(),
        DType::I32 => Tensor::full(shape, cast_fill::<i32>(fill)?)?.into(),
    })
}

/// True iff shape and dtype match and every element differs by at most `tol`.
pub fn tensor_equal(a: &DynTensor, b: &DynTensor, tol: f64) -> bool {
    match (a, b) {
        (DynTensor::F32(a), DynTensor::F32(b)) => a.approx_eq(b, tol),
        (DynTensor::F64(a), DynTensor::F64(b)) => a.approx_eq(b, tol),
        (DynTensor::I8(a), DynTensor::I8(b)) => a.approx_eq(b, tol),
        (DynTensor::U8(a), DynTensor::U8(b)) => a.approx_eq(b, tol),
        (DynTensor::I32(a), DynTensor::I32(b)) => a.approx_eq(b, tol),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantTarget {
    I8,
    U8,
}

impl QuantTarget {
    pub fn range(self) -> (i32, i32) {
        match self {
            QuantTarget::I8 => (-128, 127),
            QuantTarget::U8 => (0, 255),
        }
    }

    pub fn dtype(self) -> DType {
        match self {
            QuantTarget::I8 => DType::I8,
            QuantTarget::U8 => DType::U8,
        }
    }
}

/// Affine quantization parameters: `real = (q - zero_point) * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scales: Vec<f32>,
    zero_point: i32,
    granularity: Granularity,
    target: QuantTarget,
}

impl QuantParams {
    pub fn per_tensor(scale: f32, zero_point: i32, target: QuantTarget) -> Result<Self> {
        Self::new(vec![scale], zero_point, Granularity::PerTensor, target)
    }

    pub fn per_channel(scales: Vec<f32>, axis: usize, target: QuantTarget) -> Result<Self> {
        Self::new(scales, 0, Granularity::PerChannel { axis }, target)
    }

    pub fn new(
        scales: Vec<f32>,
        zero_point: i32,
        granularity: Granularity,
        target: QuantTarget,
    ) -> Result<Self> {
        let qp = Self {
            scales,
            zero_point,
            granularity,
            target,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::QuantParams("no scales".into()));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::QuantParams(format!("scale {s} is not positive and finite")));
        }
        if self.granularity == Granularity::PerTensor && self.scales.len() != 1 {
            return Err(Error::QuantParams(format!(
                "per-tensor parameters carry {} scales",
                self.scales.len()
            )));
        }
        let (lo, hi) = self.target.range();
        if !(lo..=hi).contains(&self.zero_point) {
            return Err(Error::QuantParams(format!(
                "zero point {} outside {lo}..={hi}",
                self.zero_point
            )));
        }
        Ok(())
    }

    /// Checks that per-channel parameters fit a tensor of `shape`.
    pub fn check_shape(&self, shape: &[usize]) -> Result<()> {
        if let Granularity::PerChannel { axis } = self.granularity {
            let extent = shape.get(axis).copied().ok_or_else(|| {
                Error::QuantParams(format!("axis {axis} out of range for shape {shape:?}"))
            })?;
            if extent != self.scales.len() {
                return Err(Error::QuantParams(format!(
                    "{} scales for axis {axis} of extent {extent}",
                    self.scales.len()
                )));
            }
        }
        Ok(())
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn scale(&self, channel: usize) -> f32 {
        match self.granularity {
            Granularity::PerTensor => self.scales[0],
            Granularity::PerChannel { .. } => self.scales[channel],
        }
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn target(&self) -> QuantTarget {
        self.target
    }
}

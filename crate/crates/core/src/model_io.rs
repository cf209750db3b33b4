//! Model bundles on disk, the toy encoder generator and input streams.
//!
//! Bundle layout, all integers little-endian:
//!
//! | field          | size                                   |
//! |----------------|----------------------------------------|
//! | magic `FXTB`   | 4                                      |
//! | version        | u32                                    |
//! | manifest bytes | u64                                    |
//! | manifest       | UTF-8 JSON                             |
//! | padding        | zeros up to a 64-byte file offset      |
//! | blob section   | tensors, each at a 64-byte offset      |
//! | crc32          | u32 over the blob section              |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphInput, NamedTensors, Node, Op, Weight};
use crate::kernels::{BlockSparseWeight, DenseI8Weight};
use crate::pruner::{prune_blockwise, BlockMask, PruneConfig, BLOCK_SIZE};
use crate::tensor::{DType, DynTensor, QuantParams, Tensor};

pub const MAGIC: &[u8; 4] = b"FXTB";
pub const BUNDLE_VERSION: u32 = 1;
pub const BLOB_ALIGN: usize = 64;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct BlobRef {
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Encoding {
    Dense,
    Pruned,
    QuantDense,
    Sparse,
}

/// Manifest record of one weight. `blobs` holds, in order: dense data;
/// pruned data and mask bitset; i8 data; mask bitset and packed blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    encoding: Encoding,
    dtype: DType,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qparams: Option<QuantParams>,
    blobs: Vec<BlobRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    inputs: Vec<GraphInput>,
    nodes: Vec<Node>,
    outputs: Vec<String>,
    weights: Vec<WeightEntry>,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, data: &[u8]) -> BlobRef {
        let offset = self.bytes.len().next_multiple_of(BLOB_ALIGN);
        self.bytes.resize(offset, 0);
        self.bytes.extend_from_slice(data);
        BlobRef {
            offset: offset as u64,
            len: data.len() as u64,
        }
    }
}

fn i8_bytes(v: &[i8]) -> &[u8] {
    bytemuck::cast_slice(v)
}

fn encode_weight(name: &str, w: &Weight, blobs: &mut BlobWriter) -> WeightEntry {
    let (encoding, dtype, shape, qparams, refs) = match w {
        Weight::Dense(t) => (Encoding::Dense, t.dtype(), t.shape().to_vec(), None, vec![blobs.push(&t.to_le_bytes())]),
        Weight::Pruned { weight, mask } => {
            let data = DynTensor::F32(weight.clone()).to_le_bytes();
            let refs = vec![blobs.push(&data), blobs.push(&mask.to_bitset())];
            (Encoding::Pruned, DType::F32, weight.shape().to_vec(), None, refs)
        }
        Weight::QuantDense(q) => (
            Encoding::QuantDense,
            DType::I8,
            q.data().shape().to_vec(),
            Some(q.qparams().clone()),
            vec![blobs.push(i8_bytes(q.data().data()))],
        ),
        Weight::Sparse(s) => {
            let refs = vec![blobs.push(&s.mask().to_bitset()), blobs.push(i8_bytes(s.packed_blocks()))];
            (Encoding::Sparse, DType::I8, vec![s.rows(), s.cols()], Some(s.qparams().clone()), refs)
        }
    };
    WeightEntry {
        name: name.to_string(),
        encoding,
        dtype,
        shape,
        qparams,
        blobs: refs,
    }
}

/// Serializes a graph and its weights into bundle bytes.
pub fn encode_bundle(g: &Graph) -> Result<Vec<u8>> {
    let mut blobs = BlobWriter { bytes: Vec::new() };
    let weights = g.weights.iter().map(|(n, w)| encode_weight(n, w, &mut blobs)).collect();
    let manifest = Manifest {
        inputs: g.inputs.clone(),
        nodes: g.nodes.clone(),
        outputs: g.outputs.clone(),
        weights,
    };
    let json = serde_json::to_vec(&manifest)?;
    let blob_start = (HEADER_LEN + json.len()).next_multiple_of(BLOB_ALIGN);
    let mut out = Vec::with_capacity(blob_start + blobs.bytes.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(blob_start, 0);
    out.extend_from_slice(&blobs.bytes);
    out.extend_from_slice(&crc32fast::hash(&blobs.bytes).to_le_bytes());
    Ok(out)
}

pub fn save_bundle(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_bundle(g)?)?;
    Ok(())
}

fn slice<'a>(blob: &'a [u8], r: &BlobRef, name: &str) -> Result<&'a [u8]> {
    let start = usize::try_from(r.offset).map_err(|_| Error::Corrupt(format!("offset of `{name}`")))?;
    let len = usize::try_from(r.len).map_err(|_| Error::Corrupt(format!("length of `{name}`")))?;
    blob.get(start..start.checked_add(len).unwrap_or(usize::MAX))
        .ok_or_else(|| Error::Truncated(format!("weight `{name}` extends past the blob section")))
}

fn expect_blobs(e: &WeightEntry, n: usize) -> Result<()> {
    if e.blobs.len() != n {
        return Err(Error::Corrupt(format!("weight `{}` has {} blobs, expected {n}", e.name, e.blobs.len())));
    }
    Ok(())
}

fn matrix_dims(e: &WeightEntry) -> Result<(usize, usize)> {
    match e.shape[..] {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Corrupt(format!("weight `{}` must be 2-D, has shape {:?}", e.name, e.shape))),
    }
}

fn decode_weight(e: &WeightEntry, blob: &[u8]) -> Result<Weight> {
    let qparams = || {
        e.qparams
            .clone()
            .ok_or_else(|| Error::Corrupt(format!("weight `{}` lacks quantization parameters", e.name)))
    };
    let i8_vec = |b: &[u8]| b.iter().map(|&x| x as i8).collect::<Vec<i8>>();
    Ok(match e.encoding {
        Encoding::Dense => {
            expect_blobs(e, 1)?;
            Weight::Dense(DynTensor::from_le_bytes(e.dtype, e.shape.clone(), slice(blob, &e.blobs[0], &e.name)?)?)
        }
        Encoding::Pruned => {
            expect_blobs(e, 2)?;
            let (rows, cols) = matrix_dims(e)?;
            let DynTensor::F32(weight) =
                DynTensor::from_le_bytes(DType::F32, e.shape.clone(), slice(blob, &e.blobs[0], &e.name)?)?
            else {
                unreachable!()
            };
            let mask = BlockMask::from_bitset(rows, cols, slice(blob, &e.blobs[1], &e.name)?)?;
            mask.check_pattern(&weight)?;
            Weight::Pruned { weight, mask }
        }
        Encoding::QuantDense => {
            expect_blobs(e, 1)?;
            let data = slice(blob, &e.blobs[0], &e.name)?;
            let t = Tensor::new(e.shape.clone(), i8_vec(data))
                .map_err(|_| Error::Corrupt(format!("weight `{}`: {} bytes for shape {:?}", e.name, data.len(), e.shape)))?;
            Weight::QuantDense(DenseI8Weight::new(t, qparams()?)?)
        }
        Encoding::Sparse => {
            expect_blobs(e, 2)?;
            let (rows, cols) = matrix_dims(e)?;
            let mask = BlockMask::from_bitset(rows, cols, slice(blob, &e.blobs[0], &e.name)?)?;
            let packed = i8_vec(slice(blob, &e.blobs[1], &e.name)?);
            Weight::Sparse(BlockSparseWeight::from_packed(mask, packed, qparams()?)?)
        }
    })
}

/// Parses bundle bytes. Nothing is returned unless the checksum matches
/// and every tensor reference is in bounds.
pub fn decode_bundle(bytes: &[u8]) -> Result<Graph> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BUNDLE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: BUNDLE_VERSION,
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let manifest_end = usize::try_from(manifest_len)
        .ok()
        .and_then(|n| n.checked_add(HEADER_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Truncated("manifest extends past end of file".into()))?;
    let blob_start = manifest_end.next_multiple_of(BLOB_ALIGN);
    if bytes.len() < blob_start + 4 {
        return Err(Error::Truncated("missing blob section or checksum".into()));
    }
    let (blob, crc) = bytes[blob_start..].split_at(bytes.len() - blob_start - 4);
    let stored = u32::from_le_bytes(crc.try_into().unwrap());
    let computed = crc32fast::hash(blob);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])?;
    let mut weights = BTreeMap::new();
    for e in &manifest.weights {
        if weights.insert(e.name.clone(), decode_weight(e, blob)?).is_some() {
            return Err(Error::Corrupt(format!("weight `{}` appears twice", e.name)));
        }
    }
    let g = Graph {
        nodes: manifest.nodes,
        inputs: manifest.inputs,
        outputs: manifest.outputs,
        weights,
    };
    g.validate()?;
    Ok(g)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Graph> {
    decode_bundle(&fs::read(path)?)
}

/// Shape of the generated encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderSpec {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub sparsity: f64,
}

impl Default for ToyEncoderSpec {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            seq_len: 32,
            sparsity: 0.9,
        }
    }
}

/// Nodes emitted per encoder layer.
pub const NODES_PER_LAYER: usize = 28;
/// Nodes emitted before the first layer (the embedding LayerNorm).
pub const EMBEDDING_NODES: usize = 1;
/// Name of the single graph input.
pub const INPUT_NAME: &str = "x";

impl ToyEncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.seq_len == 0 {
            return Err(Error::Config("layers, hidden, heads and seq_len must be positive".into()));
        }
        if self.hidden % BLOCK_SIZE != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not a multiple of the block size {BLOCK_SIZE}",
                self.hidden
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide hidden size {}", self.heads, self.hidden)));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity {} outside [0, 1]", self.sparsity)));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        EMBEDDING_NODES + self.layers * NODES_PER_LAYER
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

struct Builder {
    g: Graph,
    rng: ChaCha8Rng,
    hidden: usize,
}

impl Builder {
    fn normal(&mut self, shape: &[usize], mean: f32, std: f32, scale: f32) -> Weight {
        let d = Normal::new(mean, std).unwrap();
        let rng = &mut self.rng;
        Weight::Dense(Tensor::from_fn(shape, |_| d.sample(rng) * scale).unwrap().into())
    }

    fn layer_norm(&mut self, prefix: &str, id: &str, input: &str) -> String {
        let h = self.hidden;
        let (gamma, beta) = (format!("{prefix}.gamma"), format!("{prefix}.beta"));
        let w = self.normal(&[h], 1.0, 0.05, 1.0);
        self.g.add_weight(&gamma, w);
        let w = self.normal(&[h], 0.0, 0.05, 1.0);
        self.g.add_weight(&beta, w);
        self.g.add(id, Op::LayerNorm { gamma, beta, eps: 1e-5 }, &[input])
    }

    /// InnerProduct plus BiasAdd; weights are scaled by `scale`.
    fn dense(&mut self, id: &str, input: &str, rows: usize, cols: usize, scale: f32) -> String {
        let w = self.normal(&[rows, cols], 0.0, 1.0 / (cols as f32).sqrt(), scale);
        self.g.add_weight(format!("{id}.w"), w);
        let b = self.normal(&[rows], 0.0, 0.1, scale);
        self.g.add_weight(format!("{id}.b"), b);
        let ip = self.g.add(id, Op::inner_product(format!("{id}.w")), &[input]);
        self.g.add(format!("{id}.bias"), Op::BiasAdd { bias: format!("{id}.b") }, &[&ip])
    }
}

/// Builds an f32 encoder with random dense weights, deterministic in `seed`.
///
/// Each layer is multi-head self-attention followed by a GELU feed-forward
/// block, both with residual Add and post-LayerNorm. The attention scale
/// `1/sqrt(head_dim)` is folded into the query projection.
pub fn generate_toy_encoder(spec: &ToyEncoderSpec, seed: u64) -> Result<Graph> {
    spec.validate()?;
    let h = spec.hidden;
    let (heads, d) = (spec.heads as i64, spec.head_dim() as i64);
    let mut b = Builder {
        g: Graph::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        hidden: h,
    };
    b.g.add_input(INPUT_NAME, vec![None, None, Some(h)]);
    let mut x = b.layer_norm("emb.ln", "emb.ln", INPUT_NAME);
    let q_scale = 1.0 / (d as f32).sqrt();
    for l in 0..spec.layers {
        let p = format!("l{l}");
        let split = |b: &mut Builder, name: &str, perm: Vec<usize>, scale: f32| {
            let y = b.dense(&format!("{p}.{name}"), &x, h, h, scale);
            let r = b.g.add(format!("{p}.{name}.split"), Op::Reshape { shape: vec![0, 0, heads, d] }, &[&y]);
            b.g.add(format!("{p}.{name}.heads"), Op::Transpose { perm }, &[&r])
        };
        let q = split(&mut b, "q", vec![0, 2, 1, 3], q_scale);
        let k = split(&mut b, "k", vec![0, 2, 3, 1], 1.0);
        let v = split(&mut b, "v", vec![0, 2, 1, 3], 1.0);
        let g = &mut b.g;
        let scores = g.add(format!("{p}.scores"), Op::matmul(), &[&q, &k]);
        let probs = g.add(format!("{p}.probs"), Op::Softmax, &[&scores]);
        let ctx = g.add(format!("{p}.ctx"), Op::matmul(), &[&probs, &v]);
        let ctx = g.add(format!("{p}.ctx.merge"), Op::Transpose { perm: vec![0, 2, 1, 3] }, &[&ctx]);
        let ctx = g.add(format!("{p}.ctx.flat"), Op::Reshape { shape: vec![0, 0, -1] }, &[&ctx]);
        let o = b.dense(&format!("{p}.o"), &ctx, h, h, 1.0);
        let res = b.g.add(format!("{p}.attn.add"), Op::Add, &[&o, &x]);
        let attn = b.layer_norm(&format!("{p}.ln1"), &format!("{p}.attn.ln"), &res);
        let up = b.dense(&format!("{p}.ffn1"), &attn, 4 * h, h, 1.0);
        let act = b.g.add(format!("{p}.gelu"), Op::Gelu, &[&up]);
        let down = b.dense(&format!("{p}.ffn2"), &act, h, 4 * h, 1.0);
        let res = b.g.add(format!("{p}.ffn.add"), Op::Add, &[&down, &attn]);
        x = b.layer_norm(&format!("{p}.ln2"), &format!("{p}.ffn.ln"), &res);
    }
    let mut g = b.g;
    g.set_outputs(&[&x]);
    debug_assert_eq!(g.nodes.len(), spec.node_count());
    g.validate()?;
    Ok(g)
}

/// Block-prunes every f32 InnerProduct weight of `g` to `cfg`.
pub fn prune_gemm_weights(g: &Graph, cfg: &PruneConfig) -> Result<Graph> {
    let mut out = g.clone();
    for node in &g.nodes {
        let Op::InnerProduct { weight, .. } = &node.op else { continue };
        let Some(Weight::Dense(DynTensor::F32(w))) = g.weights.get(weight) else { continue };
        let (mask, pruned) = prune_blockwise(w, cfg)?;
        out.weights.insert(weight.clone(), Weight::Pruned { weight: pruned, mask });
    }
    Ok(out)
}

/// Deterministic stream of standard-normal `[batch, seq_len, hidden]` inputs.
#[derive(Debug, Clone)]
pub struct InputStream {
    rng: ChaCha8Rng,
    shape: [usize; 3],
    remaining: usize,
}

/// Mean and standard deviation of every generated element.
pub const INPUT_MEAN: f64 = 0.0;
pub const INPUT_STD: f64 = 1.0;

pub fn generate_inputs(spec: &ToyEncoderSpec, batch: usize, count: usize, seed: u64) -> Result<InputStream> {
    if batch == 0 || spec.seq_len == 0 || spec.hidden == 0 {
        return Err(Error::Config("batch, seq_len and hidden must be positive".into()));
    }
    Ok(InputStream {
        rng: ChaCha8Rng::seed_from_u64(seed),
        shape: [batch, spec.seq_len, spec.hidden],
        remaining: count,
    })
}

impl Iterator for InputStream {
    type Item = Tensor<f32>;

    fn next(&mut self) -> Option<Tensor<f32>> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let rng = &mut self.rng;
        Some(Tensor::from_fn(&self.shape, |_| StandardNormal.sample(rng)).unwrap())
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for InputStream {}

/// Wraps a tensor as the encoder's named input.
pub fn encoder_inputs(x: Tensor<f32>) -> NamedTensors {
    let mut m = NamedTensors::new();
    m.insert(INPUT_NAME.to_string(), x.into());
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut g = Graph::new();
        g.add_input("x", vec![Some(2)]);
        g.set_outputs(&["x"]);
        let bytes = encode_bundle(&g).unwrap();
        assert_eq!(&bytes[..4], b"FXTB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), BUNDLE_VERSION);
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert!(serde_json::from_slice::<serde_json::Value>(&bytes[16..16 + n]).is_ok());
        let blob_start = (16 + n).next_multiple_of(64);
        assert_eq!(bytes.len(), blob_start + 4);
        assert_eq!(&bytes[blob_start..], &crc32fast::hash(&[]).to_le_bytes());
        assert!(decode_bundle(&bytes).unwrap().structure_eq(&g));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = encode_bundle(&Graph::new()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_bundle(&bytes), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_bundle(&bytes), Err(Error::Corrupt(_))));
        assert!(matches!(decode_bundle(&bytes[..7]), Err(Error::Truncated(_))));
    }

    #[test]
    fn spec_validation() {
        let bad = ToyEncoderSpec { hidden: 66, ..Default::default() };
        assert!(matches!(generate_toy_encoder(&bad, 0), Err(Error::Config(_))));
        let bad = ToyEncoderSpec { heads: 5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_input_stream() {
        assert_eq!(generate_inputs(&ToyEncoderSpec::default(), 1, 0, 0).unwrap().count(), 0);
    }
}

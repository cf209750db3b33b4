mod common;

use blocksparse::kernels::{
    compress_weight, dense_gemm_i32, quad_dot_accumulate, sparse_gemm, sparse_gemm_with_stats, BlockSparseWeight,
    DenseI8Weight, PostOp, QuantWeightRef,
};
use blocksparse::pruner::{prune_blockwise, BlockMask, PruneConfig};
use blocksparse::{DynTensor, Error, QuantParams, QuantTarget, Tensor};
use common::oracle::*;
use proptest::prelude::*;

fn unit_scales(m: usize) -> QuantParams {
    QuantParams::per_channel(vec![1.0; m], 0, QuantTarget::I8).unwrap()
}

#[test]
fn randomized_cases_match_the_oracle() {
    let mut rng = kernel_rng(0x5eed);
    for i in 0..300 {
        let case = random_kernel_case(&mut rng, 96, 48);
        check_kernel_case(&case, 1e-5).unwrap_or_else(|e| panic!("case {i}: {e}"));
    }
}

#[test]
fn quad_dot_extremes() {
    assert_eq!(quad_dot_accumulate(0, [-128; 4], [255; 4]), -128 * 255 * 4);
    assert_eq!(quad_dot_accumulate(7, [127; 4], [255; 4]), 7 + 127 * 255 * 4);
    assert_eq!(quad_dot_accumulate(0, [1, -1, 2, -2], [10, 10, 3, 3]), 0);
    // wraps like the 32-bit hardware accumulator
    assert_eq!(quad_dot_accumulate(i32::MAX, [1, 0, 0, 0], [1, 0, 0, 0]), i32::MIN);
}

#[test]
fn hand_computed_two_by_two() {
    // [[1, 2], [3, 4]] x [[5, 6], [7, 8]] = [[19, 22], [43, 50]]
    let w = Tensor::new(vec![2, 2], vec![1i8, 2, 3, 4]).unwrap();
    let x = Tensor::new(vec![2, 2], vec![5u8, 6, 7, 8]).unwrap();
    assert_eq!(dense_gemm_i32(&w, &x).unwrap().data(), &[19, 22, 43, 50]);
    let sparse = compress_weight(&w, &BlockMask::all_kept(2, 2), &unit_scales(2)).unwrap();
    let out = sparse_gemm(&sparse, &x, &PostOp::none()).unwrap();
    assert_eq!(out, DynTensor::I32(Tensor::new(vec![2, 2], vec![19, 22, 43, 50]).unwrap()));
}

#[test]
fn fully_pruned_weight_yields_bias_only() {
    let (m, k) = (8, 5);
    let w = Tensor::<i8>::zeros(&[m, k]).unwrap();
    let sparse = compress_weight(&w, &BlockMask::all_pruned(m, k), &unit_scales(m)).unwrap();
    assert!(sparse.packed_blocks().is_empty());
    let x = Tensor::full(&[k, 3], 200u8).unwrap();
    let bias = Tensor::from_fn(&[m], |i| i[0] as i32 - 4).unwrap();
    let (out, stats) = sparse_gemm_with_stats(&sparse, &x, &PostOp::bias_add(bias, None)).unwrap();
    assert_eq!(stats.macs, 0);
    let DynTensor::I32(out) = out else { panic!("bias add keeps i32") };
    for r in 0..m {
        assert!(out.data()[r * 3..(r + 1) * 3].iter().all(|&v| v == r as i32 - 4));
    }
}

#[test]
fn mac_count_is_linear_in_kept_blocks() {
    let (m, k, n) = (64, 48, 16);
    let total = (m / 4 * k) as u64;
    for sparsity in SPARSITIES {
        let mask = {
            let scores = Tensor::from_fn(&[m, k], |i| ((i[0] * 31 + i[1] * 17) % 97) as f32).unwrap();
            prune_blockwise(&scores, &PruneConfig::new(sparsity).unwrap()).unwrap().0
        };
        let w = Tensor::from_fn(&[m, k], |i| if mask.is_kept(i[0] / 4, i[1]) { 1 } else { 0 }).unwrap();
        let sparse = compress_weight(&w, &mask, &unit_scales(m)).unwrap();
        let x = Tensor::full(&[k, n], 1u8).unwrap();
        let (_, stats) = sparse_gemm_with_stats(&sparse, &x, &PostOp::none()).unwrap();
        let kept = mask.kept_count() as u64;
        assert_eq!(stats.macs, kept * 4 * n as u64);
        let density = 1.0 - sparsity;
        assert!((kept as f64 / total as f64 - density).abs() <= 1.0 / total as f64);
    }
}

#[test]
fn dense_weight_path_counts_every_product() {
    let w = Tensor::from_fn(&[6, 10], |i| (i[0] as i8) - (i[1] as i8)).unwrap();
    let dense = DenseI8Weight::new(w.clone(), unit_scales(6)).unwrap();
    let x = Tensor::from_fn(&[10, 3], |i| (i[0] * 3 + i[1]) as u8).unwrap();
    let mut out = vec![0i32; 18];
    let stats = QuantWeightRef::Dense(&dense).gemm_into(x.data(), 3, &mut out).unwrap();
    // 6 rows pad to 8 inside the panel
    assert_eq!(stats.macs, 8 * 10 * 3);
    assert_eq!(out, dense_gemm_i32(&w, &x).unwrap().into_data());
}

#[test]
fn shape_and_post_op_errors() {
    let w = Tensor::<i8>::zeros(&[4, 4]).unwrap();
    let sparse = compress_weight(&w, &BlockMask::all_kept(4, 4), &unit_scales(4)).unwrap();
    let x = Tensor::<u8>::zeros(&[5, 2]).unwrap();
    assert!(matches!(sparse_gemm(&sparse, &x, &PostOp::none()), Err(Error::Shape(_))));
    let x = Tensor::<u8>::zeros(&[4, 2]).unwrap();
    let mut post = PostOp::bias_add(Tensor::zeros(&[4]).unwrap(), None);
    post.bias = None;
    assert!(matches!(sparse_gemm(&sparse, &x, &post), Err(Error::MissingBias(_))));
    let short = PostOp::bias_add(Tensor::zeros(&[3]).unwrap(), None);
    assert!(matches!(sparse_gemm(&sparse, &x, &short), Err(Error::Shape(_))));
}

#[test]
fn compress_rejects_values_in_pruned_blocks() {
    let mut w = Tensor::<i8>::zeros(&[8, 2]).unwrap();
    w.set(&[5, 1], 3).unwrap();
    let mask = BlockMask::from_kept(8, 2, vec![true, true, true, false]).unwrap();
    match compress_weight(&w, &mask, &unit_scales(8)) {
        Err(Error::PatternViolation { block_row, col }) => assert_eq!((block_row, col), (1, 1)),
        other => panic!("expected a pattern violation, got {other:?}"),
    }
}

#[test]
fn requantize_saturates_at_the_type_range() {
    let w = Tensor::full(&[4, 4], 127i8).unwrap();
    let sparse = compress_weight(&w, &BlockMask::all_kept(4, 4), &unit_scales(4)).unwrap();
    let x = Tensor::full(&[4, 1], 255u8).unwrap();
    let xq = QuantParams::per_tensor(1.0, 0, QuantTarget::U8).unwrap();
    let out_q = QuantParams::per_tensor(1.0, 0, QuantTarget::I8).unwrap();
    let out = sparse_gemm(&sparse, &x, &PostOp::requantize(xq.clone(), out_q, None)).unwrap();
    assert_eq!(out, DynTensor::I8(Tensor::full(&[4, 1], 127).unwrap()));
    let neg = Tensor::full(&[4, 4], -128i8).unwrap();
    let sparse = compress_weight(&neg, &BlockMask::all_kept(4, 4), &unit_scales(4)).unwrap();
    let out_u = QuantParams::per_tensor(1.0, 10, QuantTarget::U8).unwrap();
    let out = sparse_gemm(&sparse, &x, &PostOp::requantize(xq, out_u, None)).unwrap();
    assert_eq!(out, DynTensor::U8(Tensor::full(&[4, 1], 0).unwrap()));
}

fn arb_sparse() -> impl Strategy<Value = (Tensor<i8>, BlockMask)> {
    (1usize..24, 1usize..24).prop_flat_map(|(m, k)| {
        let blocks = m.div_ceil(4) * k;
        (
            proptest::collection::vec(any::<bool>(), blocks),
            proptest::collection::vec(any::<i8>(), m * k),
        )
            .prop_map(move |(kept, values)| {
                let mask = BlockMask::from_kept(m, k, kept).unwrap();
                let w = Tensor::from_fn(&[m, k], |i| {
                    if mask.is_kept(i[0] / 4, i[1]) {
                        values[i[0] * k + i[1]]
                    } else {
                        0
                    }
                })
                .unwrap();
                (w, mask)
            })
    })
}

proptest! {
    #[test]
    fn compress_decompress_round_trip((w, mask) in arb_sparse()) {
        let m = w.shape()[0];
        let sparse = compress_weight(&w, &mask, &unit_scales(m)).unwrap();
        prop_assert_eq!(sparse.decompress(), w);
        prop_assert_eq!(sparse.packed_blocks().len(), mask.kept_count() * 4);
        let rebuilt = BlockSparseWeight::from_packed(mask, sparse.packed_blocks().to_vec(), unit_scales(m)).unwrap();
        prop_assert_eq!(rebuilt, sparse);
    }

    #[test]
    fn sparse_accumulators_equal_dense((w, mask) in arb_sparse(), n in 1usize..9, seed in any::<u64>()) {
        let k = w.shape()[1];
        let mut rng = kernel_rng(seed);
        let x = Tensor::from_fn(&[k, n], |_| rand::Rng::random(&mut rng)).unwrap();
        let sparse = compress_weight(&w, &mask, &unit_scales(w.shape()[0])).unwrap();
        let DynTensor::I32(got) = sparse_gemm(&sparse, &x, &PostOp::none()).unwrap() else { unreachable!() };
        prop_assert_eq!(got.data().iter().map(|&v| v as i64).collect::<Vec<_>>(), naive_gemm(&w, &x));
    }
}

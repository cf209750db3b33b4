use blocksparse::pruner::{
    blocks_to_prune, kd_loss, pad_rows, prune_blockwise, score_blocks, BlockMask, KdLossConfig, PruneConfig, BLOCK_SIZE,
};
use blocksparse::{Error, Tensor};
use proptest::prelude::*;

/// Mean |w| of block `(b, c)`, counting rows past the end as zero.
fn block_score(w: &Tensor<f64>, b: usize, c: usize) -> f64 {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (b * BLOCK_SIZE..(b + 1) * BLOCK_SIZE)
        .filter(|&r| r < rows)
        .map(|r| w.data()[r * cols + c].abs())
        .sum::<f64>()
        / BLOCK_SIZE as f64
}

fn arb_weight() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..40, 1usize..20).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-10.0f64..10.0, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pruned_weights_follow_their_mask(w in arb_weight(), target in 0.0f64..=1.0) {
        let (mask, pruned) = prune_blockwise(&w, &PruneConfig::new(target).unwrap()).unwrap();
        mask.check_pattern(&pruned).unwrap();
        let total = mask.total_blocks() as f64;
        let achieved = mask.achieved_sparsity();
        prop_assert!(achieved >= target - 1e-12, "achieved {achieved} < target {target}");
        prop_assert!(achieved <= target + 1.0 / total + 1e-12, "achieved {achieved} overshoots {target}");

        // every pruned block scores no higher than every kept block
        let (br, cols) = (mask.block_rows(), mask.cols());
        let mut kept_min = f64::INFINITY;
        let mut pruned_max = f64::NEG_INFINITY;
        for b in 0..br {
            for c in 0..cols {
                let s = block_score(&w, b, c);
                if mask.is_kept(b, c) { kept_min = kept_min.min(s) } else { pruned_max = pruned_max.max(s) }
            }
        }
        prop_assert!(pruned_max <= kept_min);

        // kept values are untouched
        for (i, (&a, &p)) in w.data().iter().zip(pruned.data()).enumerate() {
            let (r, c) = (i / cols, i % cols);
            if mask.is_kept(r / BLOCK_SIZE, c) {
                prop_assert_eq!(a, p);
            }
        }
    }

    #[test]
    fn bitset_round_trip(rows in 1usize..30, cols in 1usize..30, seed in any::<u64>()) {
        let n = rows.div_ceil(BLOCK_SIZE) * cols;
        let kept: Vec<bool> = (0..n).map(|i| (seed.rotate_left(i as u32 % 64) ^ i as u64) & 1 == 1).collect();
        let mask = BlockMask::from_kept(rows, cols, kept).unwrap();
        prop_assert_eq!(BlockMask::from_bitset(rows, cols, &mask.to_bitset()).unwrap(), mask);
    }
}

#[test]
fn prune_count_uses_ceiling_with_epsilon() {
    assert_eq!(blocks_to_prune(0.3, 10), 3);
    assert_eq!(blocks_to_prune(0.31, 10), 4);
    assert_eq!(blocks_to_prune(0.0, 10), 0);
    assert_eq!(blocks_to_prune(1.0, 10), 10);
    assert_eq!(blocks_to_prune(0.9, 7), 7);
    assert_eq!(blocks_to_prune(0.5, 1), 1);
}

#[test]
fn ties_break_by_flat_block_index() {
    // four equal blocks, half pruned: the first two in block-row-major order go
    let w = Tensor::full(&[8, 2], 1.0f32).unwrap();
    let (mask, _) = prune_blockwise(&w, &PruneConfig::new(0.5).unwrap()).unwrap();
    assert_eq!(mask.kept_flags(), &[false, false, true, true]);
}

#[test]
fn tail_block_counts_padding_as_zero() {
    // rows 4..6 form a half-filled block scoring (1 + 1) / 4
    let w = Tensor::from_fn(&[6, 1], |i| if i[0] < 4 { 0.6f32 } else { 1.0 }).unwrap();
    let scores = score_blocks(&pad_rows(&w).unwrap()).unwrap();
    assert_eq!(scores.data(), &[0.6, 0.5]);
    let (mask, pruned) = prune_blockwise(&w, &PruneConfig::new(0.5).unwrap()).unwrap();
    assert_eq!(mask.kept_flags(), &[true, false]);
    assert_eq!(pruned.shape(), &[6, 1]);
    assert_eq!(&pruned.data()[4..], &[0.0, 0.0]);
}

#[test]
fn hand_scored_blocks() {
    let w = Tensor::new(vec![4, 2], vec![1.0f64, -8.0, -2.0, 0.0, 3.0, 0.0, -4.0, 0.0]).unwrap();
    assert_eq!(score_blocks(&w).unwrap().data(), &[2.5, 2.0]);
    assert!(matches!(score_blocks(&Tensor::<f64>::zeros(&[3, 2]).unwrap()), Err(Error::Shape(_))));
}

#[test]
fn invalid_targets_are_rejected() {
    for t in [-0.1, 1.5, f64::NAN] {
        assert!(matches!(PruneConfig::new(t), Err(Error::Config(_))), "{t}");
    }
    let v = Tensor::<f32>::zeros(&[4]).unwrap();
    assert!(prune_blockwise(&v, &PruneConfig::new(0.5).unwrap()).is_err());
}

#[test]
fn pattern_check_finds_the_offending_block() {
    let mask = BlockMask::from_kept(5, 2, vec![true, false, false, true]).unwrap();
    let mut w = Tensor::<f32>::zeros(&[5, 2]).unwrap();
    w.set(&[0, 0], 1.0).unwrap();
    w.set(&[4, 1], 2.0).unwrap();
    mask.check_pattern(&w).unwrap();
    w.set(&[4, 0], 1.0).unwrap();
    assert!(matches!(
        mask.check_pattern(&w),
        Err(Error::PatternViolation { block_row: 1, col: 0 })
    ));
}

/// `T^2 * KL(p_t || p_s)` averaged over rows, straight from the definition.
fn kl_oracle(student: &[f64], teacher: &[f64], classes: usize, t: f64) -> f64 {
    let softmax = |row: &[f64]| -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| ((x - m) / t).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    let rows = student.len() / classes;
    let mut total = 0.0;
    for r in 0..rows {
        let ps = softmax(&student[r * classes..(r + 1) * classes]);
        let pt = softmax(&teacher[r * classes..(r + 1) * classes]);
        total += pt.iter().zip(&ps).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
    }
    t * t * total / rows as f64
}

#[test]
fn distillation_loss_matches_definition() {
    let s = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
    let t = Tensor::new(vec![2, 3], vec![0.0f64, 2.5, 1.0, 1.0, 1.0, 1.0]).unwrap();
    let cfg = KdLossConfig::default();
    let got = kd_loss(&s, &t, None, &cfg).unwrap();
    let want = kl_oracle(s.data(), t.data(), 3, cfg.temperature);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!(kd_loss(&s, &s, None, &cfg).unwrap().abs() < 1e-12);

    // cross entropy term on hard labels, temperature 1
    let ce = KdLossConfig {
        lambda_kd: 0.0,
        lambda_mlm: 1.0,
        temperature: 1.0,
    };
    let got = kd_loss(&s, &t, Some(&[1, 2]), &ce).unwrap();
    let lse = |row: &[f64]| row.iter().map(|x| x.exp()).sum::<f64>().ln();
    let want = ((lse(&s.data()[..3]) - 2.0) + (lse(&s.data()[3..]) - 3.0)) / 2.0;
    assert!((got - want).abs() < 1e-12);
    assert!(kd_loss(&s, &t, None, &ce).is_err());
    let bad = KdLossConfig {
        temperature: 0.0,
        ..cfg
    };
    assert!(kd_loss(&s, &t, None, &bad).is_err());
}

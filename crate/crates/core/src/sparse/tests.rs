use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_sparse(rng: &mut ChaCha8Rng, dim: usize, density: f64) -> SparseVector {
    let mut pairs = Vec::new();
    for i in 0..dim as u32 {
        if rng.gen_bool(density) {
            pairs.push((i, rng.gen_range(-3.0..3.0)));
        }
    }
    SparseVector::from_pairs(dim, pairs).unwrap()
}

fn random_ragged(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> RaggedMatrix {
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut row = Vec::new();
        for c in 0..cols as u32 {
            if rng.gen_bool(density) {
                row.push((c, rng.gen_range(-2.0..2.0)));
            }
        }
        out.push(row);
    }
    let rows = out;
    RaggedMatrix::from_rows(cols, rows).unwrap()
}

fn dense_vecmat(v: &[f64], m: &[Vec<f64>], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, row) in m.iter().enumerate() {
        for c in 0..cols {
            out[c] += v[r] * row[c];
        }
    }
    out
}

#[test]
fn vector_rejects_unsorted_and_out_of_range() {
    assert!(SparseVector::new(5, vec![2, 1], vec![1.0, 1.0]).is_err());
    assert!(SparseVector::new(5, vec![1, 1], vec![1.0, 1.0]).is_err());
    assert!(SparseVector::new(5, vec![5], vec![1.0]).is_err());
    assert!(SparseVector::new(5, vec![1], vec![f64::NAN]).is_err());
}

#[test]
fn matmul_one_hot_selects_row() {
    let m = RaggedMatrix::from_rows(
        4,
        vec![vec![(0, 1.0)], vec![(1, 2.0), (3, 5.0)], vec![(2, 1.0)]],
    )
    .unwrap();
    let v = SparseVector::one_hot(3, 1).unwrap();
    let out = spvec_ragged_matmul(&v, &m).unwrap();
    assert_eq!(out.indices(), &[1, 3]);
    assert_eq!(out.values(), &[2.0, 5.0]);
}

#[test]
fn matmul_empty_vector_gives_zero() {
    let m = RaggedMatrix::from_rows(3, vec![vec![(0, 1.0)], vec![(2, 1.0)]]).unwrap();
    let out = spvec_ragged_matmul(&SparseVector::zeros(2), &m).unwrap();
    assert_eq!(out.nnz(), 0);
    assert_eq!(out.dim(), 3);
}

#[test]
fn matmul_dimension_mismatch_is_contract_error() {
    let m = RaggedMatrix::empty(3, 3);
    assert!(spvec_ragged_matmul(&SparseVector::zeros(4), &m).is_err());
}

#[test]
fn matmul_matches_dense_oracle_200x300() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = random_ragged(&mut rng, 200, 300, 0.05);
    let v = random_sparse(&mut rng, 200, 0.1);
    let got = spvec_ragged_matmul(&v, &m).unwrap().to_dense();
    let want = dense_vecmat(&v.to_dense(), &m.to_dense(), 300);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-9);
    }
}

#[test]
fn topk_keeps_everything_when_k_exceeds_nnz() {
    let v = SparseVector::new(10, vec![1, 4, 6], vec![0.5, -1.0, 2.0]).unwrap();
    assert_eq!(topk_truncate(&v, 5).unwrap(), v);
}

#[test]
fn topk_breaks_ties_by_lower_index() {
    let v = SparseVector::new(10, vec![2, 7, 9], vec![5.0, 5.0, 1.0]).unwrap();
    let out = topk_truncate(&v, 2).unwrap();
    assert_eq!(out.indices(), &[2, 7]);
    let v = SparseVector::new(10, vec![2, 7, 9], vec![1.0, 5.0, 5.0]).unwrap();
    assert_eq!(topk_truncate(&v, 1).unwrap().indices(), &[7]);
}

#[test]
fn topk_rejects_zero_k() {
    assert!(topk_truncate(&SparseVector::zeros(3), 0).is_err());
}

#[test]
fn topk_matches_full_sort_oracle_10k() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs: Vec<(u32, f64)> = (0..10_000u32)
        .map(|i| (i * 3, (rng.gen_range(0..500) as f64) * 0.01))
        .collect();
    let v = SparseVector::from_pairs(30_000, pairs.clone()).unwrap();
    for k in [1, 10, 77, 1000] {
        let mut sorted = pairs.clone();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut want: Vec<u32> = sorted[..k].iter().map(|p| p.0).collect();
        want.sort_unstable();
        assert_eq!(topk_truncate(&v, k).unwrap().indices(), want.as_slice());
    }
}

#[test]
fn elementwise_disjoint_and_identity() {
    let a = SparseVector::new(6, vec![0, 2], vec![1.5, 2.0]).unwrap();
    let b = SparseVector::new(6, vec![1, 3], vec![1.0, 1.0]).unwrap();
    assert_eq!(elementwise_product(&a, &b).unwrap().nnz(), 0);
    let ones = SparseVector::new(6, vec![0, 2, 5], vec![1.0, 1.0, 1.0]).unwrap();
    assert_eq!(elementwise_product(&a, &ones).unwrap(), a);
    assert!(elementwise_product(&a, &SparseVector::zeros(7)).is_err());
}

#[test]
fn softmax_fixed_values() {
    let single = SparseVector::new(4, vec![3], vec![17.0]).unwrap();
    assert_eq!(sparse_softmax(&single, 4.0).unwrap().values(), &[1.0]);

    let tie = SparseVector::new(4, vec![0, 2], vec![3.0, 3.0]).unwrap();
    for lambda in [0.5, 1.0, 4.0] {
        assert_eq!(sparse_softmax(&tie, lambda).unwrap().values(), &[0.5, 0.5]);
    }

    // e/(e+1), 1/(e+1)
    let v = SparseVector::new(2, vec![0, 1], vec![2.0, 1.0]).unwrap();
    let s = sparse_softmax(&v, 1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((s.values()[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((s.values()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert!((s.values()[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
}

#[test]
fn softmax_rejects_empty_and_bad_lambda() {
    assert!(sparse_softmax(&SparseVector::zeros(3), 1.0).is_err());
    let v = SparseVector::one_hot(3, 0).unwrap();
    assert!(sparse_softmax(&v, 0.0).is_err());
    assert!(sparse_softmax(&v, -1.0).is_err());
}

#[test]
fn softmax_backward_trivial_cases() {
    let v = SparseVector::new(5, vec![1, 3], vec![0.3, -0.2]).unwrap();
    let zero = SparseVector::new(5, vec![1, 3], vec![0.0, 0.0]).unwrap();
    let g = sparse_softmax_backward(&v, 2.0, &zero).unwrap();
    assert!(g.values().iter().all(|&x| x == 0.0));

    let single = SparseVector::one_hot(5, 2).unwrap();
    let up = SparseVector::new(5, vec![2], vec![3.0]).unwrap();
    let g = sparse_softmax_backward(&single, 1.0, &up).unwrap();
    assert_eq!(g.values(), &[0.0]);

    let wrong = SparseVector::new(5, vec![1], vec![1.0]).unwrap();
    assert!(sparse_softmax_backward(&v, 1.0, &wrong).is_err());
}

#[test]
fn softmax_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let idx: Vec<u32> = (0..20).map(|i| i * 2 + 1).collect();
    let vals: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let up_vals: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lambda = 1.7;
    let v = SparseVector::new(50, idx.clone(), vals.clone()).unwrap();
    let up = SparseVector::new(50, idx.clone(), up_vals.clone()).unwrap();
    let grad = sparse_softmax_backward(&v, lambda, &up).unwrap();

    // L(v) = <u, softmax(v)>
    let loss = |vals: &[f64]| {
        let v = SparseVector::new(50, idx.clone(), vals.to_vec()).unwrap();
        let s = sparse_softmax(&v, lambda).unwrap();
        s.values().iter().zip(&up_vals).map(|(a, b)| a * b).sum::<f64>()
    };
    let h = 1e-5;
    for i in 0..20 {
        let mut plus = vals.clone();
        let mut minus = vals.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let an = grad.values()[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        assert!(rel < 1e-5, "coord {i}: fd {fd} analytic {an} rel {rel}");
    }
}

#[test]
fn ragged_persistence_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random_ragged(&mut rng, 30, 40, 0.1);
    let mut buf = Vec::new();
    m.write_to(&mut buf).unwrap();
    assert_eq!(RaggedMatrix::read_from(buf.as_slice()).unwrap(), m);

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(RaggedMatrix::read_from(bad.as_slice()).is_err());
    let truncated = &buf[..buf.len() - 3];
    assert!(RaggedMatrix::read_from(truncated).is_err());
}

#[test]
fn ragged_rejects_bad_rows() {
    assert!(RaggedMatrix::from_rows(3, vec![vec![(1, 1.0), (0, 1.0)]]).is_err());
    assert!(RaggedMatrix::from_rows(3, vec![vec![(3, 1.0)]]).is_err());
    assert!(RaggedMatrix::from_rows(3, vec![vec![(0, f64::INFINITY)]]).is_err());
}

proptest! {
    #[test]
    fn prop_matmul_equals_dense(seed in any::<u64>(), rows in 1usize..60, cols in 1usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_ragged(&mut rng, rows, cols, 0.2);
        let v = random_sparse(&mut rng, rows, 0.3);
        let got = spvec_ragged_matmul(&v, &m).unwrap().to_dense();
        let want = dense_vecmat(&v.to_dense(), &m.to_dense(), cols);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn prop_topk_bounded(seed in any::<u64>(), k in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_sparse(&mut rng, 100, 0.4);
        let t = topk_truncate(&v, k).unwrap();
        prop_assert!(t.nnz() <= k);
        prop_assert_eq!(t.nnz(), v.nnz().min(k));
    }

    #[test]
    fn prop_softmax_normalized_and_shift_invariant(
        vals in proptest::collection::vec(-50.0f64..50.0, 1..30),
        shift in -100.0f64..100.0,
        lambda in 0.1f64..8.0,
    ) {
        let idx: Vec<u32> = (0..vals.len() as u32).collect();
        let v = SparseVector::new(40, idx.clone(), vals.clone()).unwrap();
        let s = sparse_softmax(&v, lambda).unwrap();
        prop_assert!((s.sum() - 1.0).abs() < 1e-12);
        let shifted = SparseVector::new(40, idx, vals.iter().map(|x| x + shift).collect()).unwrap();
        let s2 = sparse_softmax(&shifted, lambda).unwrap();
        for (a, b) in s.values().iter().zip(s2.values()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

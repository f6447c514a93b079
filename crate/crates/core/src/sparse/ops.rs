//! Kernels used by the follow operation. All are pure functions; every
//! reduction runs in a fixed order so results are bit-reproducible.

use crate::error::{Error, Result};

use super::{RaggedMatrix, SparseVector};

/// Computes `vᵀ M` by slicing only the rows indexed by `v`'s support.
///
/// Cost is O(nnz(v)·μ·log(nnz(v)·μ)) for max row length μ, independent of
/// the number of rows or columns of `M`. Contributions are summed per column
/// in ascending row order.
pub fn spvec_ragged_matmul(v: &SparseVector, m: &RaggedMatrix) -> Result<SparseVector> {
    ragged_matmul_with(v, m, |a| a)
}

/// `vᵀ M` with every stored entry of `M` replaced by 1.
pub fn spvec_ragged_matmul_binary(v: &SparseVector, m: &RaggedMatrix) -> Result<SparseVector> {
    ragged_matmul_with(v, m, |_| 1.0)
}

fn ragged_matmul_with(
    v: &SparseVector,
    m: &RaggedMatrix,
    map: impl Fn(f64) -> f64,
) -> Result<SparseVector> {
    if v.dim() != m.n_rows() {
        return Err(Error::Contract(format!(
            "vector dim {} != matrix rows {}",
            v.dim(),
            m.n_rows()
        )));
    }
    let mut pairs: Vec<(u32, f64)> = Vec::new();
    for (r, w) in v.iter() {
        let (cols, vals) = m.row(r as usize);
        pairs.extend(cols.iter().zip(vals).map(|(&c, &a)| (c, w * map(a))));
    }
    // stable: ties keep ascending row order
    pairs.sort_by_key(|&(c, _)| c);
    let mut indices = Vec::with_capacity(pairs.len());
    let mut values: Vec<f64> = Vec::with_capacity(pairs.len());
    for (c, x) in pairs {
        if indices.last() == Some(&c) {
            *values.last_mut().unwrap() += x;
        } else {
            indices.push(c);
            values.push(x);
        }
    }
    Ok(SparseVector::from_parts_unchecked(m.n_cols(), indices, values))
}

/// Keeps the `k` largest values; ties go to the lower index.
pub fn topk_truncate(v: &SparseVector, k: usize) -> Result<SparseVector> {
    if k == 0 {
        return Err(Error::Contract("top-k requires k >= 1".into()));
    }
    if v.nnz() <= k {
        return Ok(v.clone());
    }
    let mut order: Vec<usize> = (0..v.nnz()).collect();
    let vals = v.values();
    let idx = v.indices();
    let cmp = |&a: &usize, &b: &usize| vals[b].total_cmp(&vals[a]).then(idx[a].cmp(&idx[b]));
    order.select_nth_unstable_by(k - 1, cmp);
    order.truncate(k);
    order.sort_unstable();
    let indices = order.iter().map(|&p| idx[p]).collect();
    let values = order.iter().map(|&p| vals[p]).collect();
    Ok(SparseVector::from_parts_unchecked(v.dim(), indices, values))
}

/// Hadamard product; the result's support is the intersection of supports.
pub fn elementwise_product(a: &SparseVector, b: &SparseVector) -> Result<SparseVector> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "dimension mismatch {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (ai, av, bi, bv) = (a.indices(), a.values(), b.indices(), b.values());
    let (mut i, mut j) = (0, 0);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    while i < ai.len() && j < bi.len() {
        match ai[i].cmp(&bi[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                indices.push(ai[i]);
                values.push(av[i] * bv[j]);
                i += 1;
                j += 1;
            }
        }
    }
    Ok(SparseVector::from_parts_unchecked(a.dim(), indices, values))
}

/// Softmax over the support only, with temperature `lambda` dividing the
/// logits and a max shift for stability. Off-support entries stay 0.
pub fn sparse_softmax(v: &SparseVector, lambda: f64) -> Result<SparseVector> {
    check_lambda(lambda)?;
    if v.is_empty() {
        return Err(Error::Contract("softmax over an empty support".into()));
    }
    let shift = v
        .values()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        / lambda;
    let exps: Vec<f64> = v
        .values()
        .iter()
        .map(|&x| (x / lambda - shift).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    let values = exps.into_iter().map(|e| e / total).collect();
    Ok(SparseVector::from_parts_unchecked(
        v.dim(),
        v.indices().to_vec(),
        values,
    ))
}

/// Vector-Jacobian product of [`sparse_softmax`]: given `∂L/∂s` on the same
/// support as `v`, returns `∂L/∂v = s ⊙ (u − ⟨s, u⟩) / λ`.
pub fn sparse_softmax_backward(
    v: &SparseVector,
    lambda: f64,
    upstream: &SparseVector,
) -> Result<SparseVector> {
    if upstream.indices() != v.indices() || upstream.dim() != v.dim() {
        return Err(Error::Contract(
            "softmax backward: upstream support differs from forward input".into(),
        ));
    }
    let s = sparse_softmax(v, lambda)?;
    Ok(softmax_vjp(&s, lambda, upstream))
}

/// Same as [`sparse_softmax_backward`] but reuses a cached forward output.
pub fn softmax_vjp(s: &SparseVector, lambda: f64, upstream: &SparseVector) -> SparseVector {
    debug_assert_eq!(s.indices(), upstream.indices());
    let inner: f64 = s
        .values()
        .iter()
        .zip(upstream.values())
        .map(|(a, b)| a * b)
        .sum();
    let values = s
        .values()
        .iter()
        .zip(upstream.values())
        .map(|(&si, &ui)| si * (ui - inner) / lambda)
        .collect();
    SparseVector::from_parts_unchecked(s.dim(), s.indices().to_vec(), values)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("temperature must be > 0, got {lambda}")))
    }
}

//! Dense vector kernels used by the embedder client and the retrieval index.

use crate::scalar::Scalar;

/// Dot product accumulated in `f64` regardless of storage precision, so a
/// score depends only on the stored components and never on the caller.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

pub fn l2_norm<S: Scalar>(v: &[S]) -> f64 {
    v.iter()
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales `v` to unit length in place. Returns `false` (and leaves `v`
/// untouched) for the zero vector or any non-finite component.
pub fn normalize_in_place<S: Scalar>(v: &mut [S]) -> bool {
    let norm = l2_norm(v);
    if !norm.is_finite() || norm == 0.0 {
        return false;
    }
    for x in v.iter_mut() {
        *x = S::of(x.as_f64() / norm);
    }
    true
}

pub fn normalized<S: Scalar>(mut v: Vec<S>) -> Option<Vec<S>> {
    normalize_in_place(&mut v).then_some(v)
}

/// Component-wise mean of equally sized vectors, re-normalized.
pub fn mean_direction<S: Scalar>(vectors: &[&[S]]) -> Option<Vec<S>> {
    let first = vectors.first()?;
    let dim = first.len();
    let mut acc = vec![0.0f64; dim];
    for v in vectors {
        if v.len() != dim {
            return None;
        }
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x.as_f64();
        }
    }
    let n = vectors.len() as f64;
    normalized(acc.into_iter().map(|a| S::of(a / n)).collect())
}

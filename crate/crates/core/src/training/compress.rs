//! Top-k gradient sparsification with error feedback.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sparse {
    pub len: usize,
    /// Ascending.
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// Keeps the `k` largest-magnitude entries of `grad + residual` (ties to the
/// lower index) and returns them with the new residual, which is the sum with
/// those entries zeroed.
pub fn topk_compress(grad: &[f64], k: usize, residual: &[f64]) -> (Sparse, Vec<f64>) {
    assert_eq!(grad.len(), residual.len(), "residual length");
    assert!(k >= 1 && k <= grad.len(), "k = {k} outside 1..={}", grad.len());
    let acc: Vec<f64> = grad.iter().zip(residual).map(|(g, r)| g + r).collect();
    let mut order: Vec<usize> = (0..acc.len()).collect();
    order.sort_by(|a, b| acc[*b].abs().total_cmp(&acc[*a].abs()).then(a.cmp(b)));
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    let values = indices.iter().map(|i| acc[*i]).collect();
    let mut rest = acc;
    for i in &indices {
        rest[*i] = 0.0;
    }
    (Sparse { len: grad.len(), indices, values }, rest)
}

pub fn decompress(sparse: &Sparse) -> Vec<f64> {
    let mut dense = vec![0.0; sparse.len];
    for (i, v) in sparse.indices.iter().zip(&sparse.values) {
        dense[*i] = *v;
    }
    dense
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn keeps_largest_magnitude() {
        let (s, r) = topk_compress(&[3.0, -5.0, 1.0], 1, &[0.0; 3]);
        assert_eq!((s.indices, s.values), (vec![1], vec![-5.0]));
        assert_eq!(r, vec![3.0, 0.0, 1.0]);
    }

    #[test]
    fn full_k_is_identity() {
        let g = [0.5, -2.0, 7.0];
        let (s, r) = topk_compress(&g, 3, &[0.0; 3]);
        assert_eq!(decompress(&s), g.to_vec());
        assert!(r.iter().all(|v| *v == 0.0));
    }

    proptest! {
        #[test]
        fn reconstruction_is_exact(
            pairs in prop::collection::vec((-1e6f64..1e6, -1e3f64..1e3), 1..64),
            k_frac in 0.0f64..1.0,
        ) {
            let (grad, residual): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let k = 1 + ((grad.len() - 1) as f64 * k_frac) as usize;
            let (s, rest) = topk_compress(&grad, k, &residual);
            prop_assert_eq!(s.indices.len(), k);
            let dense = decompress(&s);
            for i in 0..grad.len() {
                prop_assert_eq!(dense[i] + rest[i], grad[i] + residual[i]);
            }
        }
    }
}

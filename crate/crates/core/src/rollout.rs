//! Attention rollout and the top-K foreground-preserving mask.
//!
//! Rollout runs outside the gradient tape: mask construction is a hard
//! selection, so gradients only reach the masked attention values.

use crate::autodiff::matmul_nn;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Accumulated rollout `Ã` after `layers` recursion steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutMatrix {
    matrix: Tensor,
    layers: usize,
}

impl RolloutMatrix {
    pub fn identity(n: usize) -> Self {
        RolloutMatrix {
            matrix: Tensor::eye(n),
            layers: 0,
        }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn n(&self) -> usize {
        self.matrix.shape()[0]
    }
}

/// One recursion step: `norm(I + Ā) · prev`.
///
/// With `renormalize`, each row of `I + Ā` is divided by its sum so the
/// rollout stays row-stochastic; without it the literal `I + Ā` is used.
pub fn rollout_step(prev: &RolloutMatrix, attn: &Tensor, renormalize: bool) -> Result<RolloutMatrix> {
    let n = prev.n();
    if attn.shape() != [n, n] {
        return Err(shape_err("rollout_step", prev.matrix.shape(), attn.shape()));
    }
    let mut a = attn.data().to_vec();
    for i in 0..n {
        a[i * n + i] += 1.0;
        if renormalize {
            let s: f64 = a[i * n..(i + 1) * n].iter().sum();
            for v in &mut a[i * n..(i + 1) * n] {
                *v /= s;
            }
        }
    }
    let data = matmul_nn(&a, prev.matrix.data(), n, n, n);
    Ok(RolloutMatrix {
        matrix: Tensor::new(&[n, n], data)?,
        layers: prev.layers + 1,
    })
}

/// Rollout over a stack of head-averaged attention matrices, first layer first.
pub fn rollout(attn: &[Tensor], renormalize: bool) -> Result<RolloutMatrix> {
    let n = attn
        .first()
        .ok_or_else(|| Error::Contract("rollout over zero layers".into()))?
        .shape()[0];
    attn.iter()
        .try_fold(RolloutMatrix::identity(n), |acc, a| rollout_step(&acc, a, renormalize))
}

/// Row of the class token (index 0) restricted to the image-token columns.
pub fn class_token_scores(rollout: &RolloutMatrix) -> Vec<f64> {
    let n = rollout.n();
    rollout.matrix.data()[1..n].to_vec()
}

/// Binary keep/drop vector over the image tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FPMask {
    keep: Vec<bool>,
    scores: Vec<f64>,
}

impl FPMask {
    /// Mask that keeps every token.
    pub fn all(scores: Vec<f64>) -> Self {
        FPMask {
            keep: vec![true; scores.len()],
            scores,
        }
    }

    /// Mask with an explicit keep vector; at least one token must survive.
    pub fn from_keep(keep: Vec<bool>, scores: Vec<f64>) -> Result<Self> {
        if keep.len() != scores.len() {
            return Err(shape_err("FPMask", &[keep.len()], &[scores.len()]));
        }
        if !keep.iter().any(|&b| b) {
            return Err(Error::Contract("FP mask keeps no token".into()));
        }
        Ok(FPMask { keep, scores })
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Number of preserved tokens.
    pub fn k(&self) -> usize {
        self.keep.iter().filter(|&&b| b).count()
    }

    pub fn is_all(&self) -> bool {
        self.keep.iter().all(|&b| b)
    }

    /// Keep vector over the full sequence, class token first and always kept.
    pub fn sequence_keep(&self) -> Vec<bool> {
        std::iter::once(true).chain(self.keep.iter().copied()).collect()
    }
}

/// Keeps exactly the `k` highest-scoring tokens; ties go to the lower index.
pub fn build_fp_mask(scores: &[f64], k: usize) -> Result<FPMask> {
    let n = scores.len();
    if k < 1 || k > n {
        return Err(Error::Param(format!("K = {k} outside [1, {n}]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    for &i in &order[..k] {
        keep[i] = true;
    }
    Ok(FPMask {
        keep,
        scores: scores.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_attention_keeps_identity() {
        let r = rollout_step(&RolloutMatrix::identity(4), &Tensor::eye(4), true).unwrap();
        assert_eq!(r.matrix(), &Tensor::eye(4));
        assert_eq!(r.layers(), 1);
    }

    #[test]
    fn uniform_two_token_step() {
        let a = Tensor::full(&[2, 2], 0.5);
        let r = rollout_step(&RolloutMatrix::identity(2), &a, true).unwrap();
        assert_eq!(r.matrix().data(), &[0.75, 0.25, 0.25, 0.75]);
    }

    #[test]
    fn literal_step_rows_sum_to_two() {
        let a = Tensor::full(&[3, 3], 1.0 / 3.0);
        let r = rollout_step(&RolloutMatrix::identity(3), &a, false).unwrap();
        for i in 0..3 {
            let s: f64 = r.matrix().row(i).iter().sum();
            assert!((s - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        assert!(rollout_step(&RolloutMatrix::identity(3), &Tensor::eye(4), true).is_err());
    }

    #[test]
    fn class_scores_examples() {
        assert_eq!(class_token_scores(&RolloutMatrix::identity(5)), vec![0.0; 4]);
        let r = rollout_step(&RolloutMatrix::identity(5), &Tensor::full(&[5, 5], 0.2), true).unwrap();
        for s in class_token_scores(&r) {
            assert!((s - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_examples() {
        assert_eq!(build_fp_mask(&[0.1, 0.5, 0.2], 1).unwrap().keep(), &[false, true, false]);
        assert!(build_fp_mask(&[0.1, 0.5, 0.2], 3).unwrap().is_all());
        assert_eq!(build_fp_mask(&[0.3, 0.3, 0.1], 1).unwrap().keep(), &[true, false, false]);
        assert!(matches!(build_fp_mask(&[0.1, 0.2], 0), Err(Error::Param(_))));
        assert!(matches!(build_fp_mask(&[0.1, 0.2], 3), Err(Error::Param(_))));
    }

    fn stochastic(n: usize, seed: u64) -> Tensor {
        let mut x = seed;
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n {
            let row: Vec<f64> = (0..n)
                .map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((x >> 11) as f64 / (1u64 << 53) as f64) + 1e-3
                })
                .collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        Tensor::new(&[n, n], data).unwrap()
    }

    proptest! {
        #[test]
        fn rollout_rows_stay_stochastic(seed in any::<u64>(), layers in 1usize..5) {
            let attn: Vec<Tensor> = (0..layers).map(|l| stochastic(6, seed ^ l as u64)).collect();
            let r = rollout(&attn, true).unwrap();
            for i in 0..6 {
                let s: f64 = r.matrix().row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(r.matrix().row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn mask_keeps_top_k(scores in proptest::collection::vec(0.0f64..1.0, 1..20), k_frac in 0.0f64..1.0) {
            let n = scores.len();
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let m = build_fp_mask(&scores, k).unwrap();
            prop_assert_eq!(m.k(), k);
            let min_kept = (0..n).filter(|&i| m.keep()[i]).map(|i| scores[i]).fold(f64::INFINITY, f64::min);
            let max_dropped = (0..n).filter(|&i| !m.keep()[i]).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_kept >= max_dropped);
        }

        #[test]
        fn order_preserving_maps_select_same_tokens(
            scores in proptest::collection::vec(0.0f64..1.0, 2..20), k_frac in 0.0f64..1.0, a in 0.1f64..10.0
        ) {
            let n = scores.len();
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let mapped: Vec<f64> = scores.iter().map(|s| (a * s).exp()).collect();
            let (a, b) = (build_fp_mask(&scores, k).unwrap(), build_fp_mask(&mapped, k).unwrap());
            prop_assert_eq!(a.keep(), b.keep());
        }
    }
}

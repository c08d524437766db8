//! Temperature-scaled contrastive loss with in-batch negatives.

use crate::tensor::{Float, Graph, Result, TensorError, Var};

/// Cross-entropy of cosine similarities / `tau`, row `i` of `anchors`
/// against every row of `positives`, with row `i` as the target.
pub fn info_nce<F: Float>(g: &Graph<F>, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    let (ba, bp) = (g.shape(anchors)[0], g.shape(positives)[0]);
    if ba != bp {
        return Err(TensorError::ShapeMismatch {
            op: "info_nce",
            lhs: g.shape(anchors),
            rhs: g.shape(positives),
        });
    }
    if ba < 2 {
        return Err(TensorError::Invalid {
            op: "info_nce",
            reason: format!("need at least 2 pairs for in-batch negatives, got {ba}"),
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(TensorError::Invalid {
            op: "info_nce",
            reason: format!("temperature must be positive, got {tau}"),
        });
    }
    let a = g.l2_normalize(anchors)?;
    let p = g.l2_normalize(positives)?;
    let logits = g.scale(g.matmul(a, g.transpose(p)?)?, F::of(1.0 / tau))?;
    let targets: Vec<usize> = (0..ba).collect();
    g.cross_entropy(logits, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(a: Tensor<f64>, p: Tensor<f64>, tau: f64) -> f64 {
        let g = Graph::new();
        let (a, p) = (g.constant(a), g.constant(p));
        g.value(info_nce(&g, a, p, tau).unwrap()).item()
    }

    #[test]
    fn uniform_similarities_give_log_batch() {
        for b in [2usize, 4, 16] {
            let ones = Tensor::full([b, 3], 1.0);
            assert!((loss(ones.clone(), ones, 0.07) - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_pairs_with_unit_and_zero_similarity() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss(a.clone(), a, 1.0) - expected).abs() < 1e-15);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn rejects_single_pair_and_zero_vectors() {
        let g = Graph::<f64>::new();
        let one = g.constant(Tensor::full([1, 3], 1.0));
        assert!(info_nce(&g, one, one, 0.07).is_err());
        let zero = g.constant(Tensor::zeros([2, 3]));
        assert!(info_nce(&g, zero, zero, 0.07).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![Tensor::randn([4, 5], 1.0, &mut rng), Tensor::randn([4, 5], 1.0, &mut rng)];
        let report = check_gradients(&inputs, 1e-6, |g, v| info_nce(g, v[0], v[1], 0.07)).unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }

    proptest! {
        #[test]
        fn positive_and_scale_invariant(seed in 0u64..500, s in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn([4, 6], 1.0, &mut rng);
            let p = Tensor::randn([4, 6], 1.0, &mut rng);
            let base = loss(a.clone(), p.clone(), 0.07);
            prop_assert!(base > 0.0);
            let scaled = loss(a.map(|x| x * s), p, 0.07);
            prop_assert!((scaled - base).abs() <= 1e-12 * base.max(1.0));
        }
    }
}

//! Linear router: logits `W_r · x`, softmax probabilities, top-k selection.

use crate::error::{Error, Result};
use crate::numeric::{softmax_rows, Graph, Matrix, NodeId};
use crate::scalar::Scalar;
use crate::tokens::TokenBatch;

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T> {
    /// E×D, one row per expert.
    pub weights: Matrix<T>,
    /// Numerator of the load-loss CDF scale `gate_noise / E`. Logits are never perturbed.
    pub gate_noise: T,
}

impl<T: Scalar> RouterParams<T> {
    pub fn new(weights: Matrix<T>, gate_noise: T) -> Result<Self> {
        if !weights.is_finite() {
            return Err(Error::Parameter("router weights must be finite".into()));
        }
        if !(gate_noise >= T::zero()) {
            return Err(Error::Parameter(format!("gate noise must be >= 0, got {gate_noise}")));
        }
        Ok(RouterParams { weights, gate_noise })
    }

    pub fn num_experts(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

/// One routing choice for a token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Choice<T> {
    pub expert: usize,
    pub prob: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput<T> {
    /// T×E router logits.
    pub logits: Matrix<T>,
    /// T×E expert probabilities.
    pub probs: Matrix<T>,
    /// Per token, the k most probable experts in descending order.
    pub topk: Vec<Vec<Choice<T>>>,
}

impl<T: Scalar> GateOutput<T> {
    pub fn from_logits(logits: Matrix<T>, k: usize) -> Result<Self> {
        let probs = softmax_rows(&logits);
        let topk = select_top_k(&probs, k)?;
        Ok(GateOutput { logits, probs, topk })
    }

    pub fn num_tokens(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.probs.cols()
    }
}

/// Gates a T×D feature matrix.
pub fn gate<T: Scalar>(features: &Matrix<T>, router: &RouterParams<T>, k: usize) -> Result<GateOutput<T>> {
    if features.cols() != router.dim() {
        return Err(Error::dim(
            "gate",
            format!("tokens have {} features, router expects {}", features.cols(), router.dim()),
        ));
    }
    GateOutput::from_logits(features.matmul_transposed(&router.weights)?, k)
}

pub fn gate_batch<T: Scalar>(tokens: &TokenBatch<T>, router: &RouterParams<T>, k: usize) -> Result<GateOutput<T>> {
    gate(&tokens.features, router, k)
}

/// Records the differentiable part of the router: returns `(logits, probs)`.
pub fn gate_node<T: Scalar>(graph: &mut Graph<T>, features: NodeId, weights: NodeId) -> Result<(NodeId, NodeId)> {
    let logits = graph.matmul_t(features, weights)?;
    let probs = graph.softmax_rows(logits);
    Ok((logits, probs))
}

/// The `k` largest entries of each row, descending, ties to the lower index.
pub fn select_top_k<T: Scalar>(probs: &Matrix<T>, k: usize) -> Result<Vec<Vec<Choice<T>>>> {
    let e = probs.cols();
    if k == 0 || k > e {
        return Err(Error::Parameter(format!("top-k needs 1 <= k <= {e}, got {k}")));
    }
    Ok((0..probs.rows())
        .map(|t| {
            let row = probs.row(t);
            let mut order: Vec<usize> = (0..e).collect();
            // stable sort keeps lower indices first among equals
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
            order
                .into_iter()
                .take(k)
                .map(|expert| Choice { expert, prob: row[expert] })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn zero_router_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 5, 3);
        let router = RouterParams::new(Matrix::zeros(4, 3), 1.0).unwrap();
        let out = gate(&x, &router, 1).unwrap();
        assert!(out.probs.as_slice().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn equal_rows_give_half() {
        let router = RouterParams::new(Matrix::from_rows(&[[0.3, -1.0], [0.3, -1.0]]), 1.0).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [-4.0, 0.5]]);
        let out = gate(&x, &router, 1).unwrap();
        assert!(out.probs.as_slice().iter().all(|&p| p == 0.5));
        assert!(out.topk.iter().all(|c| c[0].expert == 0));
    }

    #[test]
    fn matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 6, 4);
        let w = random(&mut rng, 3, 4);
        let out = gate(&x, &RouterParams::new(w.clone(), 1.0).unwrap(), 2).unwrap();
        for t in 0..6 {
            let logits: Vec<f64> = (0..3)
                .map(|e| (0..4).map(|d| w[(e, d)] * x[(t, d)]).sum())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for e in 0..3 {
                assert!((out.probs[(t, e)] - logits[e].exp() / z).abs() < 1e-14);
            }
            assert!((out.probs.row(t).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let router = RouterParams::new(Matrix::<f64>::zeros(2, 3), 1.0).unwrap();
        assert!(matches!(gate(&Matrix::zeros(1, 4), &router, 1), Err(Error::Dimension { .. })));
        assert!(RouterParams::new(Matrix::<f64>::zeros(2, 3), -1.0).is_err());
    }

    #[test]
    fn top_k_examples() {
        let p = Matrix::from_rows(&[[0.1, 0.7, 0.2]]);
        assert_eq!(select_top_k(&p, 1).unwrap()[0], vec![Choice { expert: 1, prob: 0.7 }]);
        let tie = Matrix::from_rows(&[[0.5, 0.5]]);
        assert_eq!(select_top_k(&tie, 1).unwrap()[0][0].expert, 0);
        let all = select_top_k(&p, 3).unwrap();
        let experts: Vec<usize> = all[0].iter().map(|c| c.expert).collect();
        assert_eq!(experts, vec![1, 2, 0]);
        assert!(matches!(select_top_k(&p, 0), Err(Error::Parameter(_))));
        assert!(select_top_k(&p, 4).is_err());
    }

    #[test]
    fn graph_gate_matches_value_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 3);
        let w = random(&mut rng, 2, 3);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let wn = g.leaf(w.clone());
        let (_, probs) = gate_node(&mut g, xn, wn).unwrap();
        let direct = gate(&x, &RouterParams::new(w, 1.0).unwrap(), 1).unwrap();
        assert_eq!(g.value(probs), &direct.probs);
    }

    proptest! {
        #[test]
        fn router_row_permutation_permutes_probs(seed in 0u64..1000, shift in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 5, 3);
            let w = random(&mut rng, 4, 3);
            let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
            let wp = Matrix::from_fn(4, 3, |r, c| w[(perm[r], c)]);
            let a = gate(&x, &RouterParams::new(w, 1.0).unwrap(), 1).unwrap();
            let b = gate(&x, &RouterParams::new(wp, 1.0).unwrap(), 1).unwrap();
            for t in 0..5 {
                for e in 0..4 {
                    prop_assert!((b.probs[(t, e)] - a.probs[(t, perm[e])]).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn top_k_invariant_under_uniform_logit_shift(seed in 0u64..1000, c in -50.0f64..50.0, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = random(&mut rng, 6, 4);
            let a = GateOutput::from_logits(logits.clone(), k).unwrap();
            let b = GateOutput::from_logits(logits.map(|v| v + c), k).unwrap();
            for (ra, rb) in a.topk.iter().zip(&b.topk) {
                let ea: Vec<usize> = ra.iter().map(|ch| ch.expert).collect();
                let eb: Vec<usize> = rb.iter().map(|ch| ch.expert).collect();
                prop_assert_eq!(ea, eb);
            }
            prop_assert!(a.topk.iter().all(|r| r.len() == k));
        }

        #[test]
        fn top_one_picks_exactly_one_max(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = random(&mut rng, 8, 5);
            let out = GateOutput::from_logits(logits, 1).unwrap();
            for (t, choice) in out.topk.iter().enumerate() {
                prop_assert_eq!(choice.len(), 1);
                let max = out.probs.row(t).iter().cloned().fold(f64::MIN, f64::max);
                prop_assert_eq!(choice[0].prob, max);
            }
        }
    }
}

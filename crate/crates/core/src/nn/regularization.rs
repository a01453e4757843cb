use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.006,
            lambda2: 0.006,
        }
    }
}

/// Elastic-net penalty `λ₁Σ|w| + λ₂Σw²` and its subgradient `λ₁·sign(w) + 2λ₂·w`, with `sign(0) = 0`.
pub fn l1_l2_penalty<T: Real>(weights: &Tensor<T>, cfg: &RegularizationConfig) -> (T, Tensor<T>) {
    let (l1, l2) = (T::lit(cfg.lambda1), T::lit(cfg.lambda2));
    let two = T::lit(2.0);
    let mut abs_sum = T::zero();
    let mut sq_sum = T::zero();
    let grad = weights.map(|w| {
        let sign = if w > T::zero() {
            T::one()
        } else if w < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        l1 * sign + two * l2 * w
    });
    for &w in weights.data() {
        abs_sum += w.abs();
        sq_sum += w * w;
    }
    (l1 * abs_sum + l2 * sq_sum, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn penalty_examples() {
        let cfg = RegularizationConfig::default();
        let (p, g) = l1_l2_penalty(&Tensor::<f64>::zeros(&[3]), &cfg);
        assert_eq!(p, 0.0);
        assert_eq!(g.data(), &[0.0; 3]);

        let (p, g) = l1_l2_penalty(&Tensor::<f64>::from_vec(vec![1.0, -2.0]), &cfg);
        assert!((p - 0.048).abs() < 1e-15);
        assert!((g.data()[0] - (0.006 + 0.012)).abs() < 1e-15);
        assert!((g.data()[1] - (-0.006 - 0.024)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn penalty_even_nonnegative_and_zero_only_at_origin(
            w in proptest::collection::vec(-5.0f64..5.0, 1..20),
            l1 in 0.0f64..1.0,
            l2 in 0.0f64..1.0,
        ) {
            let cfg = RegularizationConfig { lambda1: l1, lambda2: l2 };
            let t = Tensor::from_vec(w.clone());
            let (p, _) = l1_l2_penalty(&t, &cfg);
            let (q, _) = l1_l2_penalty(&t.map(|v| -v), &cfg);
            prop_assert!(p >= 0.0);
            prop_assert!((p - q).abs() <= 1e-12 * p.max(1.0));
            if (l1 > 1e-6 || l2 > 1e-6) && w.iter().any(|&v| v.abs() > 1e-3) {
                prop_assert!(p > 0.0);
            }
        }
    }
}

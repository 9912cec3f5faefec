/// Binary Shannon entropy in bits.
pub fn binary_entropy(q: f64) -> f64 {
    assert!((0.0..=1.0).contains(&q), "probability {q} outside [0, 1]");
    if q == 0.0 || q == 1.0 {
        return 0.0;
    }
    -q * q.log2() - (1.0 - q) * (1.0 - q).log2()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_values() {
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(1.0), 0.0);
        assert_eq!(binary_entropy(0.5), 1.0);
        // h(0.11) by direct evaluation with natural logs
        let oracle = -(0.11f64 * 0.11f64.ln() + 0.89 * 0.89f64.ln()) / 2f64.ln();
        assert!((binary_entropy(0.11) - oracle).abs() < 1e-15);
        assert!((binary_entropy(0.11) - 0.499_916).abs() < 1e-6);
        assert!(1.0 - 2.0 * binary_entropy(0.11) < 2e-4);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(q in 0.0f64..=1.0) {
            let h = binary_entropy(q);
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert!((h - binary_entropy(1.0 - q)).abs() < 1e-12);
        }
    }
}

//! Property tests for the kernel invariants.

use proptest::prelude::*;

use vrwkv_core::attention::softmax_attention;
use vrwkv_core::tensor::Tensor;
use vrwkv_core::wkv::{bi_wkv_direct, bi_wkv_scan, WkvParams};

fn vecs(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, len)
}

fn wkv_inputs(t: usize, d: usize) -> impl Strategy<Value = (Tensor, Tensor, WkvParams)> {
    (
        vecs(t * d, -3.0, 3.0),
        vecs(t * d, -3.0, 3.0),
        vecs(d, -2.0, 2.0),
        vecs(d, -2.0, 2.0),
    )
        .prop_map(move |(k, v, w, u)| {
            (
                Tensor::new(vec![t, d], k).unwrap(),
                Tensor::new(vec![t, d], v).unwrap(),
                WkvParams::new(
                    Tensor::new(vec![d], w).unwrap(),
                    Tensor::new(vec![d], u).unwrap(),
                )
                .unwrap(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Per channel the output is a convex combination of the values.
    #[test]
    fn wkv_output_is_bounded_by_value_range((k, v, p) in wkv_inputs(7, 3)) {
        let out = bi_wkv_scan(&k, &v, &p).unwrap();
        for c in 0..3 {
            let col = |t: &Tensor, i: usize| t.data()[i * 3 + c];
            let lo = (0..7).map(|i| col(&v, i)).fold(f64::INFINITY, f64::min);
            let hi = (0..7).map(|i| col(&v, i)).fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-12 * (hi - lo).abs().max(1.0);
            for t in 0..7 {
                let y = col(&out, t);
                prop_assert!(y >= lo - slack && y <= hi + slack,
                    "channel {c} token {t}: {y} outside [{lo}, {hi}]");
            }
        }
    }

    /// Adding a constant to every key cancels between numerator and
    /// denominator.
    #[test]
    fn wkv_is_invariant_to_key_shifts((k, v, p) in wkv_inputs(6, 2), c in -2.0f64..2.0) {
        let base = bi_wkv_scan(&k, &v, &p).unwrap();
        let shifted_k = k.map(|x| x + c);
        let shifted = bi_wkv_scan(&shifted_k, &v, &p).unwrap();
        for (a, b) in shifted.data().iter().zip(base.data()) {
            let rel = (a - b).abs() / b.abs().max(1e-9);
            prop_assert!(rel <= 1e-10, "shift broke invariance: {a} vs {b}");
        }
    }

    /// With zero decay, distance does not matter: swapping two non-focus
    /// tokens leaves the focus output unchanged.
    #[test]
    fn wkv_at_zero_decay_is_permutation_symmetric(
        (k, v, _) in wkv_inputs(5, 2),
        u in vecs(2, -1.0, 1.0),
    ) {
        let p = WkvParams::new(
            Tensor::zeros(vec![2]),
            Tensor::new(vec![2], u).unwrap(),
        ).unwrap();
        let base = bi_wkv_direct(&k, &v, &p).unwrap();

        // Swap tokens 1 and 3 (both different from the focus token 0).
        let swap = |t: &Tensor| {
            let mut d = t.data().to_vec();
            for c in 0..2 {
                d.swap(3 * 2 + c, 2 + c);
            }
            Tensor::new(vec![5, 2], d).unwrap()
        };
        let swapped = bi_wkv_direct(&swap(&k), &swap(&v), &p).unwrap();
        for c in 0..2 {
            let a = base.data()[c];
            let b = swapped.data()[c];
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    /// Attention outputs are bounded by the per-channel value range when the
    /// values carry an identity block exposing the probability rows.
    #[test]
    fn softmax_attention_is_a_convex_combination(
        q in vecs(5 * 3, -2.0, 2.0),
        k in vecs(5 * 3, -2.0, 2.0),
        v in vecs(5 * 3, -2.0, 2.0),
    ) {
        let q = Tensor::new(vec![5, 3], q).unwrap();
        let k = Tensor::new(vec![5, 3], k).unwrap();
        let v = Tensor::new(vec![5, 3], v).unwrap();
        let out = softmax_attention(&q, &k, &v, true).unwrap();
        for c in 0..3 {
            let lo = (0..5).map(|i| v.data()[i * 3 + c]).fold(f64::INFINITY, f64::min);
            let hi = (0..5).map(|i| v.data()[i * 3 + c]).fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-12 * (hi - lo).abs().max(1.0);
            for t in 0..5 {
                let y = out.data()[t * 3 + c];
                prop_assert!(y >= lo - slack && y <= hi + slack);
            }
        }
    }

    /// Matrix multiplication associates on small cases.
    #[test]
    fn matmul_associativity(
        a in vecs(6, -2.0, 2.0),
        b in vecs(6, -2.0, 2.0),
        c in vecs(6, -2.0, 2.0),
    ) {
        let a = Tensor::new(vec![2, 3], a).unwrap();
        let b = Tensor::new(vec![3, 2], b).unwrap();
        let c = Tensor::new(vec![2, 3], c).unwrap();
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        for (x, y) in left.data().iter().zip(right.data()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    /// Serialized tensors come back bit-identical.
    #[test]
    fn tensor_serialization_roundtrips(
        data in vecs(12, -1e6, 1e6),
        rank3 in any::<bool>(),
    ) {
        let shape = if rank3 { vec![2, 3, 2] } else { vec![12] };
        let t = Tensor::new(shape, data).unwrap();
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        prop_assert_eq!(back, t);
    }

    /// Row softmax sums to one and lies in (0, 1].
    #[test]
    fn softmax_rows_are_distributions(x in vecs(4 * 5, -30.0, 30.0)) {
        let t = Tensor::new(vec![4, 5], x).unwrap();
        let s = t.softmax_axis(1).unwrap();
        for row in 0..4 {
            let sum: f64 = s.data()[row * 5..(row + 1) * 5].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.data()[row * 5..(row + 1) * 5].iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }
}

use capsroute_core::routing::{
    fm_activation_closed_form, fm_agreement, fm_agreement_bruteforce, l2_normalize_predictions,
    PredictionTensor,
};
use proptest::prelude::*;

fn predictions() -> impl Strategy<Value = PredictionTensor> {
    (
        1usize..=12,
        1usize..=4,
        prop::sample::select(vec![4usize, 9, 16]),
    )
        .prop_flat_map(|(n, m, k)| {
            prop::collection::vec(
                (-1.0f64..1.0).prop_filter("away from zero", |x| x.abs() > 1e-3),
                n * m * k,
            )
            .prop_map(move |v| PredictionTensor::new(n, m, k, v).unwrap())
        })
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #[test]
    fn linear_form_matches_pair_enumeration(u in predictions()) {
        let fast = fm_agreement(&u).unwrap();
        let slow = fm_agreement_bruteforce(&u).unwrap();
        prop_assert!(close(&fast.s_hat, &slow.s_hat, 1e-10));
        prop_assert!(close(&fast.activation, &slow.activation, 1e-10));
    }

    #[test]
    fn closed_form_activation(u in predictions()) {
        let un = l2_normalize_predictions(&u).unwrap();
        let closed = fm_activation_closed_form(&un).unwrap();
        prop_assert!(close(&fm_agreement(&u).unwrap().activation, &closed, 1e-10));
    }

    #[test]
    fn input_order_does_not_matter(u in predictions(), shift in 0usize..64) {
        let (n, m, k) = (u.n_in(), u.n_out(), u.k());
        let mut values = Vec::with_capacity(n * m * k);
        for i in 0..n {
            let src = (i + shift) % n;
            for j in 0..m {
                values.extend_from_slice(u.vector(src, j));
            }
        }
        let rotated = PredictionTensor::new(n, m, k, values).unwrap();
        let a = fm_agreement(&u).unwrap();
        let b = fm_agreement(&rotated).unwrap();
        prop_assert!(close(&a.s_hat, &b.s_hat, 1e-12));
        prop_assert!(close(&a.activation, &b.activation, 1e-12));
    }

    #[test]
    fn activation_within_bounds(u in predictions()) {
        let n = u.n_in() as f64;
        for &a in &fm_agreement(&u).unwrap().activation {
            prop_assert!(a >= -0.5 - 1e-12 && a <= (n - 1.0) / 2.0 + 1e-12);
        }
    }
}

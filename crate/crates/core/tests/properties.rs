use mmcode::data::{load_dataset, to_arff_string, DataFormat, Dataset, LabelSpec};
use mmcode::decoders::{decode_objective, DecodeProblem};
use mmcode::encoders::EncodingMatrix;
use mmcode::margin_metric::{smat, svec, MetricQ};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::io::Write;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=8, 1usize..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn trace_of_gram_is_frobenius_norm(v in dims().prop_flat_map(|(q, d)| matrix(q, d))) {
        let q = &v * v.transpose();
        let fro: f64 = v.iter().map(|x| x * x).sum();
        prop_assert!((q.trace() - fro).abs() <= 1e-10 * fro.max(1.0));
    }

    #[test]
    fn metric_quadratic_form_is_projected_norm(
        (v, phi) in dims().prop_flat_map(|(q, d)| (matrix(q, d), matrix(q, 1)))
    ) {
        let phi = phi.column(0).into_owned();
        let lhs = MetricQ::new(&v * v.transpose()).unwrap().quad(&phi);
        let rhs = v.tr_mul(&phi).norm_squared();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
    }

    #[test]
    fn svec_round_trip_and_inner_product(
        (a, b) in (1usize..=6).prop_flat_map(|q| (matrix(q, q), matrix(q, q)))
    ) {
        let (a, b) = (&a + a.transpose(), &b + b.transpose());
        let q = a.nrows();
        prop_assert!((smat(&svec(&a), q) - &a).amax() <= 1e-12);
        let frob = a.component_mul(&b).sum();
        prop_assert!((svec(&a).dot(&svec(&b)) - frob).abs() <= 1e-9 * frob.abs().max(1.0));
    }

    #[test]
    fn decode_objective_is_label_permutation_invariant(
        (v, z, var, probs, y, perm) in (2usize..=6, 1usize..=6).prop_flat_map(|(q, d)| (
            matrix(q, d),
            prop::collection::vec(-3.0f64..3.0, d),
            prop::collection::vec(1e-3f64..2.0, d),
            prop::collection::vec(0.01f64..0.99, q),
            prop::collection::vec(any::<bool>(), q),
            Just((0..q).collect::<Vec<usize>>()).prop_shuffle(),
        ))
    ) {
        let q = v.nrows();
        let log_probs: Vec<(f64, f64)> = probs.iter().map(|p| ((1.0 - p).ln(), p.ln())).collect();
        let y = DVector::from_iterator(q, y.iter().map(|&b| f64::from(b)));
        let problem = |v: DMatrix<f64>, lp: Vec<(f64, f64)>| {
            DecodeProblem::new(
                EncodingMatrix::new(v, true).unwrap(),
                DVector::from_vec(z.clone()),
                DVector::from_vec(var.clone()),
                Some(lp),
                1.0,
            )
            .unwrap()
        };
        prop_assume!(v.column_iter().all(|c| c.iter().any(|&x| x != 0.0)));
        let base = decode_objective(&problem(v.clone(), log_probs.clone()), &y);
        let permuted = decode_objective(
            &problem(v.select_rows(&perm), perm.iter().map(|&j| log_probs[j]).collect()),
            &DVector::from_iterator(q, perm.iter().map(|&j| y[j])),
        );
        prop_assert!((base - permuted).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn arff_round_trip(
        (x, y) in (1usize..12, 1usize..5, 1usize..5).prop_flat_map(|(n, p, q)| (
            prop::collection::vec(-1e6f64..1e6, n * p).prop_map(move |v| DMatrix::from_vec(n, p, v)),
            prop::collection::vec(any::<bool>(), n * q)
                .prop_map(move |v| DMatrix::from_iterator(n, q, v.into_iter().map(f64::from))),
        ))
    ) {
        let q = y.ncols();
        let d = Dataset::from_matrices(x, y).unwrap();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(to_arff_string(&d, "prop").as_bytes()).unwrap();
        let back = load_dataset(f.path(), DataFormat::ArffDense, &LabelSpec::Last(q)).unwrap();
        prop_assert_eq!(back, d);
    }
}

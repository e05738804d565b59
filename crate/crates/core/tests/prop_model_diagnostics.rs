use osrmix::diagnostics::{audit_probs, discrepancy_from_logits, uncertainty_histogram_from_outputs};
use osrmix::model::{build_reference_cnn, Classifier, Forward, ModelOutput};
use osrmix::tensor::{argmax, ImageShape, Images, Mat};
use proptest::prelude::*;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d).unwrap())
}

fn small_model(seed: u64) -> Classifier<f32> {
    build_reference_cnn(4, 8, ImageShape::new(16, 16, 1), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn head_is_linear_in_features(seed in any::<u64>(), phi in mat(3, 8), a in -4.0f64..4.0) {
        let m = small_model(seed);
        let base = m.head_logits(&phi).unwrap();
        let mut scaled = phi.clone();
        scaled.scale(a);
        let out = m.head_logits(&scaled).unwrap();
        for (x, y) in out.data.iter().zip(&base.data) {
            prop_assert!((x - a * y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn probabilities_preserve_the_argmax(seed in any::<u64>(), pixels in prop::collection::vec(-1.0f32..1.0, 3 * 256)) {
        let m = small_model(seed);
        let out = m.forward(&Images::from_vec(ImageShape::new(16, 16, 1), pixels).unwrap()).unwrap();
        for n in 0..out.len() {
            prop_assert_eq!(argmax(out.probs.row(n)), argmax(out.logits.row(n)));
            prop_assert!((out.probs.row(n).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

fn probs(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(0.0f64..1.0, rows * cols).prop_map(move |mut d| {
        for r in d.chunks_mut(cols) {
            // Sharpen some rows past the over-confidence threshold.
            if r[0] > 0.5 {
                let k = (r[1] * cols as f64) as usize % cols;
                r.iter_mut().for_each(|v| *v *= 1e-3);
                r[k] = 1.0;
            }
            let s: f64 = r.iter().sum::<f64>().max(1e-12);
            r.iter_mut().for_each(|v| *v /= s);
        }
        Mat::from_vec(rows, cols, d).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn audit_is_a_pure_bounded_count(
        (p, c1, c2) in (1usize..40).prop_flat_map(|n| (probs(n, 6), prop::collection::vec(0usize..6, n), prop::collection::vec(0usize..6, n))),
        n_target in 1usize..50,
    ) {
        let a = audit_probs(&p, &c1, &c2, n_target).unwrap();
        prop_assert_eq!(&a, &audit_probs(&p, &c1, &c2, n_target).unwrap());
        prop_assert_eq!(a.n_samples, p.rows.min(n_target));
        prop_assert!(a.n_overconfident <= a.n_samples && a.n_wrong <= a.n_samples);
        prop_assert!(a.n_both <= a.n_overconfident.min(a.n_wrong));
    }

    #[test]
    fn uncertainty_histograms_conserve_mass(k in mat(30, 5), u in mat(17, 5), bins in 2usize..30) {
        let out = |m: &Mat| ModelOutput::from_parts(Mat::zeros(m.rows, 3), m.clone());
        let h = uncertainty_histogram_from_outputs(&out(&k), &out(&u), 5, bins).unwrap();
        prop_assert_eq!(h.known.iter().sum::<usize>(), 30);
        prop_assert_eq!(h.unknown.iter().sum::<usize>(), 17);
    }

    #[test]
    fn known_entries_negate_with_reversed_subtraction(
        (logits, labels) in (4usize..40).prop_flat_map(|n| (mat(n, 4), prop::collection::vec(0usize..4, n))),
    ) {
        let names: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let m = discrepancy_from_logits(&logits, &labels, &Mat::zeros(0, 4), &[], names).unwrap();
        for a in 0..4 {
            let rows: Vec<&[f64]> = (0..logits.rows).filter(|&n| labels[n] == a).map(|n| logits.row(n)).collect();
            for b in 0..4 {
                match m.entries[a][b] {
                    None => prop_assert!(rows.is_empty()),
                    Some(v) if a == b => prop_assert_eq!(v, 0.0),
                    Some(v) => {
                        let reversed = rows.iter().map(|r| r[b] - r[a]).sum::<f64>() / rows.len() as f64;
                        prop_assert!((v + reversed).abs() < 1e-9);
                    }
                }
            }
        }
    }
}

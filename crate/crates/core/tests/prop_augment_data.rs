use std::path::PathBuf;

use osrmix::augment::{augmix_like, build_mix_batch, cutmix, cutout, mixup, AugmentConfig, AugmentKind, MixedBatch};
use osrmix::data::{make_batches, split_arrays, ArrayData, DatasetSpec, LabeledBatch, Layout, Normalization, SplitSeed};
use osrmix::tensor::{ImageShape, Images};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CLASSES: usize = 5;

fn batch() -> impl Strategy<Value = LabeledBatch> {
    (2usize..9, 4usize..13, 4usize..13, 1usize..3).prop_flat_map(|(b, h, w, ch)| {
        let shape = ImageShape::new(h, w, ch);
        (
            prop::collection::vec(-1.0f32..1.0, b * shape.len()),
            prop::collection::vec(0i32..CLASSES as i32, b),
        )
            .prop_map(move |(data, labels)| LabeledBatch {
                images: Images::from_vec(shape, data).unwrap(),
                is_known: vec![true; labels.len()],
                labels,
            })
    })
}

fn check_mixed(batch: &LabeledBatch, m: &MixedBatch, is_cutmix: bool) -> Result<(), TestCaseError> {
    let pixels = batch.images.shape.pixels() as f64;
    for n in 0..m.len() {
        let lam = m.lam[n];
        prop_assert!((0.0..=1.0).contains(&lam));
        let row = m.y_m.row(n);
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(row.iter().filter(|v| **v != 0.0).count() <= 2);
        let (yi, yj) = (batch.labels[m.src_i[n]] as usize, batch.labels[m.src_j[n]] as usize);
        prop_assert_eq!((m.c1[n], m.c2[n]), (yi, yj));
        for (k, &v) in row.iter().enumerate() {
            let want = lam * (k == yi) as u8 as f64 + (1.0 - lam) * (k == yj) as u8 as f64;
            prop_assert!((v - want).abs() < 1e-12);
        }
        if is_cutmix {
            prop_assert!((lam - m.mask_fraction(n)).abs() <= 1.0 / pixels + 1e-12);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cutmix_invariants(b in batch(), seed in any::<u64>(), alpha in 0.2f64..3.0) {
        let m = cutmix(&b, alpha, CLASSES, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(m.len(), b.len());
        check_mixed(&b, &m, true)?;
    }

    #[test]
    fn mixup_invariants(b in batch(), seed in any::<u64>(), alpha in 0.2f64..3.0) {
        let m = mixup(&b, alpha, CLASSES, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        check_mixed(&b, &m, false)?;
    }

    #[test]
    fn mix_batches_keep_the_raw_batch(b in batch(), seed in any::<u64>(), ratio in 0.0f64..3.0, use_cutmix in any::<bool>()) {
        let cfg = AugmentConfig {
            kind: if use_cutmix { AugmentKind::Cutmix } else { AugmentKind::Mixup },
            mix_ratio_per_batch: ratio,
            ..AugmentConfig::default()
        };
        let (raw, m) = build_mix_batch(&b, &cfg, CLASSES, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&raw, &b);
        prop_assert_eq!(m.len(), (ratio * b.len() as f64).round() as usize);
        check_mixed(&b, &m, use_cutmix)?;
    }

    #[test]
    fn single_sample_ops_keep_labels(b in batch(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = b.images.shape.height.min(b.images.shape.width) / 2;
        let c = cutout(&b, size.max(1), &mut rng).unwrap();
        prop_assert_eq!(&c.labels, &b.labels);
        let a = augmix_like(&b, &mut rng);
        prop_assert_eq!(&a.labels, &b.labels);
        prop_assert_eq!(a.images.shape, b.images.shape);
    }
}

fn arrays(labels: &[u32]) -> ArrayData {
    let shape = ImageShape::new(2, 2, 1);
    ArrayData {
        images: Images {
            shape,
            data: labels.iter().enumerate().flat_map(|(i, _)| vec![i as f32; 4]).collect(),
        },
        labels: labels.to_vec(),
    }
}

fn split_case() -> impl Strategy<Value = (Vec<u32>, Vec<u32>, Vec<u32>)> {
    // A random partition of ten dataset ids into known / unknown / unused.
    (Just((0u32..10).collect::<Vec<_>>()).prop_shuffle(), 2usize..6, 0usize..4).prop_flat_map(|(ids, nk, nu)| {
        let known = ids[..nk].to_vec();
        let unknown = ids[nk..nk + nu].to_vec();
        (Just(known), Just(unknown), prop::collection::vec(0u32..10, 20..80))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn training_never_sees_unknowns_and_labels_are_a_bijection(
        (known, unknown, labels) in split_case(),
        batch_size in 1usize..17,
        seed in any::<u64>(),
    ) {
        let spec = DatasetSpec {
            root_path: PathBuf::new(),
            layout: Layout::ArrayFile,
            known_classes: known.clone(),
            unknown_classes: unknown.clone(),
            image_shape: ImageShape::new(2, 2, 1),
            normalization: Normalization { mean: vec![0.0], std: vec![1.0] },
            max_train_per_class: None,
            synthesize: None,
        };
        let train = arrays(&labels);
        prop_assume!(labels.iter().any(|l| known.contains(l)));
        let ds = split_arrays(&spec, &train, &arrays(&labels)).unwrap();
        let expected = labels.iter().filter(|l| known.contains(l)).count();
        prop_assert_eq!(ds.train.len(), expected);
        for epoch in 0..2 {
            for b in make_batches(&ds.train, batch_size, SplitSeed::new(seed), epoch, true).unwrap() {
                for (&l, &k) in b.labels.iter().zip(&b.is_known) {
                    prop_assert!(k && (0..known.len() as i32).contains(&l));
                }
            }
        }
        // Image i carries value i, so each training sample maps back to its
        // dataset id; the mapping must be one class index per known id.
        let mut seen = vec![None; known.len()];
        for (n, &l) in ds.train.labels.iter().enumerate() {
            let id = labels[ds.train.images.image(n)[0] as usize];
            match seen[l as usize] {
                None => seen[l as usize] = Some(id),
                Some(prev) => prop_assert_eq!(prev, id),
            }
            prop_assert_eq!(known[l as usize], id);
        }
    }

    #[test]
    fn batch_order_is_reproducible(n in 1usize..60, batch_size in 1usize..16, seed in any::<u64>(), epoch in 0u64..5) {
        let labels: Vec<i32> = (0..n as i32).collect();
        let data = LabeledBatch {
            images: Images::from_vec(ImageShape::new(1, 1, 1), labels.iter().map(|&l| l as f32).collect()).unwrap(),
            is_known: vec![true; n],
            labels,
        };
        let a = make_batches(&data, batch_size, SplitSeed::new(seed), epoch, true).unwrap();
        let b = make_batches(&data, batch_size, SplitSeed::new(seed), epoch, true).unwrap();
        prop_assert_eq!(&a, &b);
        let mut all: Vec<i32> = a.iter().flat_map(|b| b.labels.clone()).collect();
        all.sort();
        prop_assert_eq!(all, (0..n as i32).collect::<Vec<_>>());
    }
}

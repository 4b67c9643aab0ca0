use super::*;
use crate::losses::mine_triplets;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn small_config() -> DatasetConfig {
    DatasetConfig {
        num_identities: 20,
        val_identities: 4,
        test_identities: 4,
        images_per_identity_per_camera: 2,
        ..DatasetConfig::default()
    }
}

fn identities(samples: &[ImageSample]) -> BTreeSet<usize> {
    samples.iter().map(|s| s.identity).collect()
}

#[test]
fn generation_is_deterministic() {
    let a = generate_synthetic_dataset(&small_config()).unwrap();
    let b = generate_synthetic_dataset(&small_config()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn counts_and_disjoint_splits() {
    let ds = generate_synthetic_dataset(&small_config()).unwrap();
    assert_eq!(ds.len(), 80);
    let (tr, va, te) = (identities(&ds.train), identities(&ds.val), identities(&ds.test));
    assert_eq!(tr.len() + va.len() + te.len(), 20);
    assert_eq!((tr.len(), va.len(), te.len()), (12, 4, 4));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    assert_eq!(ds.train_identity_count(), 12);
}

#[test]
fn zero_distortion_gives_identical_cameras() {
    let config = DatasetConfig {
        distortion: Distortion::none(),
        ..small_config()
    };
    let ds = generate_synthetic_dataset(&config).unwrap();
    for id in identities(&ds.train) {
        let views: Vec<&ImageSample> = ds.train.iter().filter(|s| s.identity == id).collect();
        let a = views.iter().find(|s| s.camera == 0).unwrap();
        let b = views.iter().find(|s| s.camera == 1).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }
}

#[test]
fn distortion_separates_cameras_and_identities() {
    let ds = generate_synthetic_dataset(&small_config()).unwrap();
    let a = &ds.train[0];
    let b = ds.train.iter().find(|s| s.identity == a.identity && s.camera == 1).unwrap();
    let c = ds.train.iter().find(|s| s.identity != a.identity).unwrap();
    assert_ne!(a.pixels, b.pixels);
    assert_ne!(a.pixels, c.pixels);
}

#[test]
fn pixels_are_quantized_to_bytes() {
    let ds = generate_synthetic_dataset(&small_config()).unwrap();
    for v in ds.test[0].pixels.data() {
        let scaled = v * 255.0;
        assert_eq!(scaled, scaled.round());
        assert!((0.0..=1.0).contains(v));
    }
}

#[test]
fn invalid_configs() {
    let one = DatasetConfig {
        num_identities: 1,
        val_identities: 0,
        test_identities: 0,
        ..DatasetConfig::default()
    };
    assert!(matches!(generate_synthetic_dataset(&one), Err(Error::Config(_))));
    let none = DatasetConfig {
        images_per_identity_per_camera: 0,
        ..DatasetConfig::default()
    };
    assert!(none.validate().is_err());
    let over = DatasetConfig {
        val_identities: 30,
        test_identities: 30,
        ..DatasetConfig::default()
    };
    assert!(over.validate().is_err());
}

fn sample_image(h: usize, w: usize) -> ImageSample {
    let data = (0..h * w * 3).map(|i| i as f64).collect();
    ImageSample {
        pixels: Tensor::new(vec![h, w, 3], data).unwrap(),
        identity: 7,
        camera: 1,
    }
}

#[test]
fn zero_translation_is_identity() {
    let img = sample_image(24, 20);
    assert_eq!(translate(&img, Translation { dx: 0, dy: 0 }), img);
}

#[test]
fn double_flip_restores() {
    let img = sample_image(24, 20);
    let once = flip_horizontal(&img);
    assert_ne!(once, img);
    assert_eq!(flip_horizontal(&once), img);
}

#[test]
fn translation_replicates_edges() {
    let img = sample_image(20, 20);
    let shifted = translate(&img, Translation { dx: 2, dy: -1 });
    let at = |s: &ImageSample, y: usize, x: usize| s.pixels.data()[(y * 20 + x) * 3];
    assert_eq!(at(&shifted, 5, 5), at(&img, 4, 7));
    assert_eq!(at(&shifted, 0, 19), at(&img, 0, 19));
    assert_eq!(at(&shifted, 0, 18), at(&img, 0, 19));
}

#[test]
fn translations_bounded_on_40x40() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seen = BTreeSet::new();
    for _ in 0..10_000 {
        let t = sample_translation(40, 40, &mut rng);
        assert!(t.dx.abs() <= 2 && t.dy.abs() <= 2);
        seen.insert((t.dx, t.dy));
    }
    assert_eq!(seen.len(), 25);
}

#[test]
fn augment_produces_twenty_labelled_copies() {
    let img = sample_image(32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = augment(&img, &mut rng).unwrap();
    assert_eq!(out.len(), 20);
    for (i, s) in out.iter().enumerate() {
        assert_eq!((s.identity, s.camera), (7, 1));
        assert_eq!(s.pixels.shape(), img.pixels.shape());
        if i >= 10 {
            assert_eq!(flip_horizontal(s), out[i - 10]);
        }
    }
}

#[test]
fn augment_rejects_small_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(matches!(augment(&sample_image(19, 32), &mut rng), Err(Error::Usage(_))));
    assert!(matches!(augment_once(&sample_image(32, 10), &mut rng), Err(Error::Usage(_))));
}

#[test]
fn minibatch_composition() {
    let ds = generate_synthetic_dataset(&DatasetConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = build_minibatch(&ds.train, 8, 4, true, &mut rng).unwrap();
    assert_eq!(batch.len(), 8);
    let mut counts = BTreeMap::new();
    for s in &batch {
        *counts.entry(s.identity).or_insert(0) += 1;
    }
    assert_eq!(counts.len(), 4);
    assert!(counts.values().all(|&c| c == 2));
}

#[test]
fn minibatches_always_mine() {
    let ds = generate_synthetic_dataset(&DatasetConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let batch = build_minibatch(&ds.train, 8, 4, false, &mut rng).unwrap();
        let labels: Vec<usize> = batch.iter().map(|s| s.identity).collect();
        mine_triplets(&labels, &mut rng).unwrap();
    }
}

#[test]
fn minibatch_sequence_is_deterministic() {
    let ds = generate_synthetic_dataset(&small_config()).unwrap();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..5)
            .map(|_| build_minibatch(&ds.train, 8, 4, true, &mut rng).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn infeasible_minibatch() {
    let ds = generate_synthetic_dataset(&small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(build_minibatch(&ds.train, 8, 1, false, &mut rng), Err(Error::Usage(_))));
    assert!(matches!(build_minibatch(&ds.train, 9, 4, false, &mut rng), Err(Error::Usage(_))));
    assert!(matches!(build_minibatch(&ds.train, 4, 4, false, &mut rng), Err(Error::Usage(_))));
    // 4 images per identity available
    assert!(matches!(build_minibatch(&ds.train, 10, 2, false, &mut rng), Err(Error::Usage(_))));
    assert!(matches!(build_minibatch(&ds.train, 26, 13, false, &mut rng), Err(Error::Usage(_))));
}

#[test]
fn label_shuffle_keeps_identities_contiguous() {
    let ds = generate_synthetic_dataset(&small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let order = label_shuffled_order(&ds.train, 10, &mut rng);
    assert_eq!(order.len(), ds.train.len() * 10);
    let per = 4;
    for chunk in order.chunks(per) {
        let ids = identities(&chunk.iter().map(|&i| ds.train[i].clone()).collect::<Vec<_>>());
        assert_eq!(ids.len(), 1);
    }
}

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_dataset(&small_config()).unwrap();
    let rows = export_dataset(&ds, dir.path()).unwrap();
    assert_eq!(rows.len(), ds.len());
    assert_eq!(read_manifest(dir.path()).unwrap(), rows);
    let back = import_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    let dir2 = tempfile::tempdir().unwrap();
    export_dataset(&back, dir2.path()).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("manifest.csv")).unwrap(),
        std::fs::read(dir2.path().join("manifest.csv")).unwrap()
    );
}

#[test]
fn import_reports_bad_split() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.csv"), "file,identity,camera,split\nx.ppm,0,0,holdout\n").unwrap();
    assert!(import_dataset(dir.path()).is_err());
    let missing = tempfile::tempdir().unwrap();
    assert!(import_dataset(missing.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_disjoint_for_any_config(
        n in 2usize..12, val in 0usize..4, test in 0usize..4, per in 1usize..3, seed in 0u64..1000,
    ) {
        prop_assume!(val + test <= n);
        let config = DatasetConfig {
            num_identities: n,
            val_identities: val,
            test_identities: test,
            images_per_identity_per_camera: per,
            image_height: 20,
            image_width: 16,
            seed,
            distortion: Distortion::hardened(),
        };
        let ds = generate_synthetic_dataset(&config).unwrap();
        prop_assert_eq!(ds.len(), n * per * CAMERAS);
        let (tr, va, te) = (identities(&ds.train), identities(&ds.val), identities(&ds.test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert_eq!(va.len(), val);
        prop_assert_eq!(te.len(), test);
    }
}

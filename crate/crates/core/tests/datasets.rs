mod common;

use common::*;
use dikm_core::datasets::{
    base_exemplars, gen_affine_mnist, gen_diffeo_mnist, grid_folds, load_idx, save_idx,
    AffineRanges, DIFFEO_GRID_LANDMARKS,
};
use dikm_core::{distance, FitConfig, MetricKind, PreparedImage, WarpFit};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn bundled_subset_is_stratified() {
    let mnist = mnist5k();
    assert_eq!(mnist.len(), 5000);
    assert_eq!(mnist.shape(), Some((28, 28)));
    assert_eq!(mnist.class_counts(), vec![500; 10]);
    assert!(mnist.images.iter().all(|x| (x.norm() - 1.0).abs() < 1e-12));
    let sub = mnist.stratified(200, 0).unwrap();
    assert_eq!(sub.class_counts(), vec![200; 10]);
}

#[test]
fn hundred_per_class_splits_667_333() {
    let bases = base_exemplars(&mnist5k()).unwrap();
    let s = gen_affine_mnist(&bases, 100, &AffineRanges::default(), 7).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (667, 333));
    assert_eq!(s.train.num_classes(), 10);
    assert!(s
        .train
        .images
        .iter()
        .chain(&s.test.images)
        .all(|x| x.pixels().iter().all(|p| p.is_finite())));
    let d = gen_diffeo_mnist(&bases, 100, &AffineRanges::default(), 1.5, 7).unwrap();
    assert_eq!(d.train.len() + d.test.len(), 1000);
}

#[test]
fn generated_sets_round_trip_through_idx() {
    let bases = base_exemplars(&mnist5k()).unwrap();
    let s = gen_affine_mnist(&bases, 3, &AffineRanges::default(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = (dir.path().join("i"), dir.path().join("l"));
    save_idx(&s.train, &i, &l).unwrap();
    let back = load_idx(&i, &l).unwrap();
    assert_eq!(back.labels, s.train.labels);
    for (a, b) in back.images.iter().zip(&s.train.images) {
        // 8-bit quantization of a unit-norm image.
        assert!(a.squared_distance(b).sqrt() < 0.05);
    }
}

#[test]
fn samples_are_closer_to_their_own_exemplar() {
    let bases = base_exemplars(&mnist5k()).unwrap();
    let s = gen_affine_mnist(&bases, 2, &AffineRanges::default(), 5).unwrap();
    let w = warper(28, 28, 16);
    let config = FitConfig::default();
    for (x, &label) in s.train.images.iter().zip(&s.train.labels) {
        let (px, pb) = (
            PreparedImage::new(x, 2.0),
            PreparedImage::new(&bases[label], 2.0),
        );
        let mut fit = WarpFit::identity();
        let mut own = f64::INFINITY;
        for _ in 0..10 {
            own = distance(
                MetricKind::DeformationInvariant,
                &w,
                &px,
                &pb,
                &mut fit,
                &config,
            )
            .unwrap();
        }
        for (k, b) in bases.iter().enumerate() {
            if k != label {
                assert!(own < x.squared_distance(b), "class {label} vs {k}: {own}");
            }
        }
    }
}

#[test]
fn generated_warps_never_fold() {
    let w = warper(28, 28, DIFFEO_GRID_LANDMARKS);
    let bases = base_exemplars(&mnist5k()).unwrap();
    for sigma in [0.5, 1.0, 1.5, 2.0] {
        let s = gen_diffeo_mnist(&bases, 10, &AffineRanges::default(), sigma, 3).unwrap();
        assert_eq!(s.train_targets.len(), s.train.len());
        for t in s.train_targets.iter().chain(&s.test_targets) {
            assert!(!grid_folds(&w, t).unwrap(), "sigma {sigma}");
        }
        let first = s.train.labels[0];
        let again = w
            .warp(&bases[first], &s.train_targets[0])
            .unwrap()
            .normalized();
        assert!(again.squared_distance(&s.train.images[0]) < 1e-24);
    }
}

#[test]
fn raw_jitter_can_fold_and_is_detected() {
    let w = warper(28, 28, DIFFEO_GRID_LANDMARKS);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let mut folded = 0;
    for _ in 0..100 {
        let pts = w
            .system()
            .source()
            .points()
            .iter()
            .map(|p| {
                [
                    p[0] + normal.sample(&mut rng),
                    p[1] + normal.sample(&mut rng),
                ]
            })
            .collect();
        if grid_folds(&w, &dikm_core::LandmarkSet::new(pts).unwrap()).unwrap() {
            folded += 1;
        }
    }
    assert!(folded > 0);
    // A landmark pushed past its neighbour folds the cells between them.
    let mut pts = w.system().source().points().to_vec();
    pts[5][1] += 9.0;
    assert!(grid_folds(&w, &dikm_core::LandmarkSet::new(pts).unwrap()).unwrap());
    assert!(!grid_folds(&w, w.system().source()).unwrap());
}

mod common;

use common::*;
use dikm_core::{distance, FitConfig, Image, MetricKind, PreparedImage, WarpFit};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn d(kind: MetricKind, w: &dikm_core::Warper, x: &Image, mu: &Image) -> f64 {
    let (px, pm) = (PreparedImage::new(x, 2.0), PreparedImage::new(mu, 2.0));
    let mut fit = WarpFit::identity();
    distance(kind, w, &px, &pm, &mut fit, &FitConfig::default()).unwrap()
}

#[test]
fn normalized_self_distance_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let w = warper(16, 16, 16);
    for _ in 0..5 {
        let x = random_image(&mut rng, 16, 16).normalized();
        for kind in [
            MetricKind::Euclidean,
            MetricKind::AffineInvariant,
            MetricKind::DeformationInvariant,
        ] {
            assert_eq!(d(kind, &w, &x, &x), 0.0);
        }
    }
}

#[test]
fn warped_distances_are_asymmetric() {
    let mnist = mnist5k();
    let w = warper(28, 28, 16);
    let (x, y) = (&mnist.images[0], &mnist.images[1]);
    for kind in [
        MetricKind::AffineInvariant,
        MetricKind::DeformationInvariant,
    ] {
        let (a, b) = (d(kind, &w, x, y), d(kind, &w, y, x));
        assert!((a - b).abs() > 1e-6, "{kind}: {a} vs {b}");
    }
    let (a, b) = (
        d(MetricKind::Euclidean, &w, x, y),
        d(MetricKind::Euclidean, &w, y, x),
    );
    assert_eq!(a, b);
}

#[test]
fn shape_mismatch_is_an_error() {
    let w = warper(8, 8, 9);
    let x = Image::zeros(8, 8);
    let y = Image::zeros(8, 9);
    let (px, py) = (PreparedImage::new(&x, 2.0), PreparedImage::new(&y, 2.0));
    let mut fit = WarpFit::identity();
    assert!(distance(
        MetricKind::Euclidean,
        &w,
        &px,
        &py,
        &mut fit,
        &FitConfig::default()
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn metric_ordering(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = warper(16, 16, 16);
        let x = smooth_image(&mut rng, 16, 16, 3);
        let mu = smooth_image(&mut rng, 16, 16, 3);
        let e = d(MetricKind::Euclidean, &w, &x, &mu);
        let a = d(MetricKind::AffineInvariant, &w, &x, &mu);
        let di = d(MetricKind::DeformationInvariant, &w, &x, &mu);
        prop_assert!(0.0 <= di);
        prop_assert!(di <= a + 1e-9, "{di} > {a}");
        prop_assert!(a <= e + 1e-9, "{a} > {e}");
    }
}

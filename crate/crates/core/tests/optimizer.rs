mod common;

use common::*;
use dikm_core::optimizer::{fit_affine_stage, fit_diffeo_stage, FitStage};
use dikm_core::{
    warped_representation, AffineParams, FitConfig, Image, MetricKind, PreparedImage, WarpFit,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn digit(index: usize) -> Image {
    let mnist = mnist5k();
    mnist.images[index].clone()
}

#[test]
fn recovers_a_two_pixel_translation() {
    let w = warper(28, 28, 16);
    let image = digit(0);
    let centroid = w.warp_affine(&image, &AffineParams([1.0, 0.0, 0.0, 1.0, 2.0 / 14.0, 0.0]));
    let [hu, hv] = w.half_extent();
    // Integer grid search for the loss minimum.
    let mut oracle = (f64::INFINITY, 0.0, 0.0);
    for du in -4..=4 {
        for dv in -4..=4 {
            let a = AffineParams([1.0, 0.0, 0.0, 1.0, du as f64 / hu, dv as f64 / hv]);
            let loss = w.loss_affine(&image, &centroid, &a);
            if loss < oracle.0 {
                oracle = (loss, du as f64, dv as f64);
            }
        }
    }
    let config = FitConfig {
        learning_rate: 5e-2,
        blur_sigma: 2.0,
        ..FitConfig::default()
    };
    let (pi, pc) = (
        PreparedImage::new(&image, 2.0),
        PreparedImage::new(&centroid, 2.0),
    );
    let mut fit = WarpFit::identity();
    fit_affine_stage(&w, &pi, &pc, &mut fit, 200, &config);
    let a = fit.affine().0;
    let (tu, tv) = (a[4] * hu, a[5] * hv);
    assert!(
        (tu - oracle.1).abs() < 0.25 && (tv - oracle.2).abs() < 0.25,
        "({tu}, {tv}) vs {oracle:?}"
    );
    assert!(fit.last_loss() <= w.loss_affine(&image, &centroid, &AffineParams::default()));
}

#[test]
fn diffeo_stage_fits_a_known_warp() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = warper(28, 28, 16);
    let image = digit(3);
    let truth = perturb(&mut rng, w.system().source(), 1.5);
    let centroid = w.warp(&image, &truth).unwrap();
    assert_eq!(
        w.loss_displacement(&image, &centroid, &w.displacement(&truth).unwrap()),
        0.0
    );
    let config = FitConfig::default();
    let (pi, pc) = (
        PreparedImage::new(&image, 2.0),
        PreparedImage::new(&centroid, 2.0),
    );
    let mut fit = WarpFit::identity();
    fit_diffeo_stage(&w, &pi, &pc, &mut fit, 300, &config);
    assert_eq!(fit.stage(), FitStage::Diffeo);
    assert!(fit.last_loss() < 1e-3, "loss {}", fit.last_loss());

    let rep = warped_representation(MetricKind::DeformationInvariant, &w, &image, &fit);
    let rms = (rep.squared_distance(&centroid) / rep.len() as f64).sqrt();
    assert!(rms < 1e-3, "rms {rms}");
}

#[test]
fn stage_two_without_steps_reports_the_affine_loss() {
    let w = warper(28, 28, 16);
    let (image, centroid) = (digit(1), digit(11));
    let config = FitConfig::default();
    let (pi, pc) = (
        PreparedImage::new(&image, 2.0),
        PreparedImage::new(&centroid, 2.0),
    );
    let mut fit = WarpFit::identity();
    fit_affine_stage(&w, &pi, &pc, &mut fit, 25, &config);
    let affine = fit.last_loss();
    fit_diffeo_stage(&w, &pi, &pc, &mut fit, 0, &config);
    assert_eq!(fit.last_loss(), affine);
}

#[test]
fn best_iterate_never_increases_across_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let w = warper(28, 28, 16);
    let mnist = mnist5k();
    for _ in 0..10 {
        let i = rng.gen_range(0..mnist.len());
        let j = rng.gen_range(0..mnist.len());
        let (pi, pc) = (
            PreparedImage::new(&mnist.images[i], 2.0),
            PreparedImage::new(&mnist.images[j], 2.0),
        );
        let config = FitConfig::default();
        let mut fit = WarpFit::identity();
        let mut last = mnist.images[i].squared_distance(&mnist.images[j]);
        for _ in 0..5 {
            let d = dikm_core::evaluate_distance(&w, &pi, &pc, &mut fit, &config);
            assert!(d <= last + 1e-12);
            assert!((fit.residual(&w, &mnist.images[i], &mnist.images[j]) - d).abs() < 1e-9);
            last = d;
        }
    }
}

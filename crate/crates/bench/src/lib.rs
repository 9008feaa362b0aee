//! Shared fixtures for the benchmarks.

use dikm_core::datasets::{gen_affine_mnist, AffineRanges};
use dikm_core::Image;

/// A 28×28 stroke-like test pattern, distinct per `class`.
pub fn pattern(class: usize) -> Image {
    let angle = class as f64 * 0.6;
    let (s, c) = angle.sin_cos();
    Image::from_fn(28, 28, |r, col| {
        let (u, v) = (r as f64 - 13.5, col as f64 - 13.5);
        let along = c * u + s * v;
        let across = -s * u + c * v;
        let ring = ((u * u + v * v).sqrt() - 6.0 - class as f64 * 0.4).abs();
        let bar = if along.abs() < 8.0 {
            (-across * across / 4.0).exp()
        } else {
            0.0
        };
        bar + (-ring * ring / 2.0).exp() * (class % 3) as f64 / 2.0
    })
    .normalized()
}

/// Affinely warped copies of [`pattern`]s, train split only.
pub fn affine_set(classes: usize, per_class: usize, seed: u64) -> Vec<Image> {
    let bases: Vec<Image> = (0..classes).map(pattern).collect();
    gen_affine_mnist(&bases, per_class, &AffineRanges::default(), seed)
        .expect("generator accepts the fixture")
        .train
        .images
}

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tps::{LandmarkSet, TpsSystem};
use crate::warp::{Image, Warper};

/// Landmark grid used to render generated warps (a 4 × 4 grid).
pub const DIFFEO_GRID_LANDMARKS: usize = 16;

/// Half-widths and intervals of the random affine draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRanges {
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub shear: f64,
    pub shift: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 25.0,
            scale: (0.8, 1.2),
            shear: 0.15,
            shift: 3.0,
        }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            shear: 0.0,
            shift: 0.0,
        }
    }
}

/// One random affine transform, composed about the frame center as
/// rotation · shear · scale followed by a shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineSample {
    pub rotation: f64,
    pub scale_u: f64,
    pub scale_v: f64,
    pub shear: f64,
    pub shift_u: f64,
    pub shift_v: f64,
}

impl AffineSample {
    pub fn draw(rng: &mut impl Rng, ranges: &AffineRanges) -> Self {
        let sym = |rng: &mut dyn RngCore, a: f64| rng.gen_range(-a..=a);
        let rotation = sym(rng, ranges.rotation_deg.to_radians());
        let scale_u = rng.gen_range(ranges.scale.0..=ranges.scale.1);
        let scale_v = rng.gen_range(ranges.scale.0..=ranges.scale.1);
        let shear = sym(rng, ranges.shear);
        let shift_u = sym(rng, ranges.shift);
        let shift_v = sym(rng, ranges.shift);
        Self {
            rotation,
            scale_u,
            scale_v,
            shear,
            shift_u,
            shift_v,
        }
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        // rotation · [[1, shear], [0, 1]] · diag(scale_u, scale_v)
        let a = [[c, c * self.shear - s], [s, s * self.shear + c]];
        [
            [a[0][0] * self.scale_u, a[0][1] * self.scale_v],
            [a[1][0] * self.scale_u, a[1][1] * self.scale_v],
        ]
    }

    pub fn determinant(&self) -> f64 {
        let m = self.matrix();
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    /// Pixel-space `p ↦ m·p + t` acting about `center`.
    pub fn about(&self, center: [f64; 2]) -> ([[f64; 2]; 2], [f64; 2]) {
        let m = self.matrix();
        let t = [
            center[0] + self.shift_u - m[0][0] * center[0] - m[0][1] * center[1],
            center[1] + self.shift_v - m[1][0] * center[0] - m[1][1] * center[1],
        ];
        (m, t)
    }
}

/// Generated samples split into train and held-out test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// Target landmarks of the warp that produced each train sample, on the
    /// [`DIFFEO_GRID_LANDMARKS`] grid of the frame.
    pub train_targets: Vec<LandmarkSet>,
    pub test_targets: Vec<LandmarkSet>,
}

/// The first image of each class `0..K`.
pub fn base_exemplars(dataset: &LabeledDataset) -> Result<Vec<Image>> {
    (0..dataset.num_classes())
        .map(|c| {
            dataset
                .labels
                .iter()
                .position(|&l| l == c)
                .map(|i| dataset.images[i].clone())
                .ok_or_else(|| Error::InvalidValue(format!("class {c} has no samples")))
        })
        .collect()
}

/// True if any cell of the warped pixel grid is folded or degenerate.
pub fn grid_folds(warper: &Warper, target: &LandmarkSet) -> Result<bool> {
    let d = warper.displacement(target)?;
    let pos = warper.sample_positions(&d);
    let (h, w) = warper.shape();
    let at = |r: usize, c: usize| pos[r * w + c];
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    for r in 0..h.saturating_sub(1) {
        for c in 0..w.saturating_sub(1) {
            let (p00, p01, p10, p11) = (at(r, c), at(r, c + 1), at(r + 1, c), at(r + 1, c + 1));
            // Counter-clockwise in (u, v): down then right is positive.
            let corners = [
                cross(p00, p10, p01),
                cross(p10, p11, p00),
                cross(p11, p01, p10),
                cross(p01, p00, p11),
            ];
            if corners.iter().any(|&x| x <= 0.0) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

const MAX_JITTER_TRIES: usize = 100;

fn generate(
    bases: &[Image],
    per_class: usize,
    ranges: &AffineRanges,
    diffeo_sigma: f64,
    seed: u64,
    provenance: String,
) -> Result<SyntheticSplit> {
    let first = bases.first().ok_or(Error::EmptyInput("base exemplars"))?;
    for b in bases {
        first.check_same_shape(b)?;
    }
    if !(diffeo_sigma >= 0.0 && diffeo_sigma.is_finite()) {
        return Err(Error::InvalidValue(format!("diffeo sigma {diffeo_sigma}")));
    }
    let (h, w) = first.shape();
    let source = LandmarkSet::grid_with_count(h, w, DIFFEO_GRID_LANDMARKS)?;
    let warper = Warper::new(Arc::new(TpsSystem::build(source, 0.0)?), h, w);
    let center = [(h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
    let normal = Normal::new(0.0, diffeo_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidValue(e.to_string()))?;
    let grid = warper.system().source().to_interleaved();

    let mut images = Vec::with_capacity(bases.len() * per_class);
    let mut labels = Vec::with_capacity(bases.len() * per_class);
    let mut targets = Vec::with_capacity(bases.len() * per_class);
    for (class, base) in bases.iter().enumerate() {
        for _ in 0..per_class {
            let sample = AffineSample::draw(&mut rng, ranges);
            let (m, t) = sample.about(center);
            let mut target = warper.system().source().map_affine(m, t);
            if diffeo_sigma > 0.0 {
                for _ in 0..MAX_JITTER_TRIES {
                    let jittered: Vec<f64> = grid
                        .iter()
                        .map(|g| g + normal.sample(&mut jitter_rng))
                        .collect();
                    let candidate = LandmarkSet::from_interleaved(&jittered)?.map_affine(m, t);
                    if !grid_folds(&warper, &candidate)? {
                        target = candidate;
                        break;
                    }
                }
            }
            images.push(warper.warp(base, &target)?.normalized());
            labels.push(class);
            targets.push(target);
        }
    }

    let n = images.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = n - (2 * n).div_ceil(3);
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let all = LabeledDataset::new(images, labels, Split::Train, provenance)?;
    let train = all.subset(&train_idx);
    let mut test = all.subset(&test_idx);
    test.split = Split::Test;
    Ok(SyntheticSplit {
        train,
        test,
        train_targets: train_idx.iter().map(|&i| targets[i].clone()).collect(),
        test_targets: test_idx.iter().map(|&i| targets[i].clone()).collect(),
    })
}

/// `per_class` random affine warps of each base exemplar; a third of the
/// samples are held out for testing.
pub fn gen_affine_mnist(
    bases: &[Image],
    per_class: usize,
    ranges: &AffineRanges,
    seed: u64,
) -> Result<SyntheticSplit> {
    generate(
        bases,
        per_class,
        ranges,
        0.0,
        seed,
        format!("affine seed={seed} per_class={per_class} ranges={ranges:?}"),
    )
}

/// Like [`gen_affine_mnist`], with each affine composed with a random spline
/// jitter of the 4 × 4 landmark grid (Gaussian offsets of standard deviation
/// `diffeo_sigma` pixels). Jitters that would fold the pixel grid are
/// redrawn. The jitter uses its own random stream, so `diffeo_sigma = 0`
/// reproduces the affine generator exactly.
pub fn gen_diffeo_mnist(
    bases: &[Image],
    per_class: usize,
    ranges: &AffineRanges,
    diffeo_sigma: f64,
    seed: u64,
) -> Result<SyntheticSplit> {
    generate(
        bases,
        per_class,
        ranges,
        diffeo_sigma,
        seed,
        format!("diffeo seed={seed} per_class={per_class} sigma={diffeo_sigma} ranges={ranges:?}"),
    )
}

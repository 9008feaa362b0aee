//! The three sample-to-centroid similarities behind one interface.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optimizer::{evaluate_distance, FitConfig, PreparedImage, WarpFit};
use crate::warp::{Image, Warper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    /// Plain squared Euclidean distance.
    Euclidean,
    /// Residual after the affine stage only.
    AffineInvariant,
    /// Residual after the affine and diffeomorphic stages.
    DeformationInvariant,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [
        MetricKind::Euclidean,
        MetricKind::AffineInvariant,
        MetricKind::DeformationInvariant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Euclidean => "euclidean",
            MetricKind::AffineInvariant => "affine",
            MetricKind::DeformationInvariant => "diffeo",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            MetricKind::Euclidean => 0,
            MetricKind::AffineInvariant => 1,
            MetricKind::DeformationInvariant => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Fit budgets this metric actually runs with.
    ///
    /// The affine metric has no diffeomorphic stage; its per-evaluation
    /// refresh budget is the larger of the configured affine refresh and the
    /// diffeo budget, so both invariant metrics spend comparable effort per
    /// epoch.
    pub fn fit_config(self, base: &FitConfig) -> FitConfig {
        match self {
            MetricKind::Euclidean => FitConfig {
                stage1_steps: 0,
                stage1_refresh_steps: 0,
                stage2_steps: 0,
                ..base.clone()
            },
            MetricKind::AffineInvariant => FitConfig {
                stage1_refresh_steps: base.stage1_refresh_steps.max(base.stage2_steps),
                stage2_steps: 0,
                ..base.clone()
            },
            MetricKind::DeformationInvariant => base.clone(),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" | "kmeans" => Ok(MetricKind::Euclidean),
            "affine" | "affine_invariant" => Ok(MetricKind::AffineInvariant),
            "diffeo" | "deformation_invariant" => Ok(MetricKind::DeformationInvariant),
            other => Err(Error::InvalidValue(format!("unknown metric {other:?}"))),
        }
    }
}

/// Distance of `image` to `centroid` under `kind`, warm-started from `fit`.
///
/// `config` is the base configuration; the metric's own budget rules are
/// applied on top (see [`MetricKind::fit_config`]).
pub fn distance(
    kind: MetricKind,
    warper: &Warper,
    image: &PreparedImage,
    centroid: &PreparedImage,
    fit: &mut WarpFit,
    config: &FitConfig,
) -> Result<f64> {
    image.image().check_same_shape(centroid.image())?;
    if image.image().shape() != warper.shape() {
        return Err(Error::mismatch(
            format!("{:?}", warper.shape()),
            format!("{:?}", image.image().shape()),
        ));
    }
    Ok(match kind {
        MetricKind::Euclidean => image.image().squared_distance(centroid.image()),
        _ => evaluate_distance(warper, image, centroid, fit, &kind.fit_config(config)),
    })
}

/// `image` rendered through the best warp of `fit` (the raw image for the
/// Euclidean metric).
pub fn warped_representation(
    kind: MetricKind,
    warper: &Warper,
    image: &Image,
    fit: &WarpFit,
) -> Image {
    match kind {
        MetricKind::Euclidean => image.clone(),
        _ if fit.is_identity() => image.clone(),
        _ => fit.render(warper, image),
    }
}

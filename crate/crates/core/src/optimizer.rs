//! Fitting the warp of one sample onto one centroid.
//!
//! A fit runs in two stages. The affine stage optimizes six affine
//! parameters against low-passed copies of both images, where the residual
//! landscape is smooth enough for a coarse alignment. The diffeomorphic
//! stage then frees all `2ℓ` target landmarks and optimizes the raw residual.
//! Both stages use Adam and keep the best iterate, so the reported distance
//! never exceeds the residual at the point the fit was warm-started from.

use std::sync::OnceLock;

use crate::error::Result;
use crate::tps::LandmarkSet;
use crate::warp::{low_pass, AffineParams, Image, Warper};

/// Learning rates searched during cross-validation.
pub const LEARNING_RATE_GRID: [f64; 6] = [1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2];

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub learning_rate: f64,
    /// Affine-stage steps on the first evaluation of a fit.
    pub stage1_steps: usize,
    /// Affine-stage steps on later evaluations, for fits that have not
    /// entered the diffeomorphic stage.
    pub stage1_refresh_steps: usize,
    /// Diffeomorphic-stage steps per evaluation.
    pub stage2_steps: usize,
    pub blur_sigma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Maximum landmark excursion from the affine-stage position, in grid
    /// cells. `None` disables the clamp.
    pub clamp_cells: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            stage1_steps: 25,
            stage1_refresh_steps: 0,
            stage2_steps: 10,
            blur_sigma: 2.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            clamp_cells: Some(1.5),
        }
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, config: &FitConfig) {
    assert_eq!(params.len(), grad.len());
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.step += 1;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
    }
}

/// An image together with its low-passed copy, computed on first use.
#[derive(Debug)]
pub struct PreparedImage<'a> {
    image: &'a Image,
    sigma: f64,
    blurred: OnceLock<Image>,
}

impl<'a> PreparedImage<'a> {
    pub fn new(image: &'a Image, sigma: f64) -> Self {
        Self {
            image,
            sigma,
            blurred: OnceLock::new(),
        }
    }

    pub fn image(&self) -> &'a Image {
        self.image
    }

    pub fn blurred(&self) -> &Image {
        self.blurred.get_or_init(|| {
            low_pass(self.image, self.sigma).expect("blur sigma validated by FitConfig")
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStage {
    Affine,
    Diffeo,
}

/// Optimization state of one (sample, centroid) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpFit {
    stage: FitStage,
    /// Current affine iterate.
    affine: AffineParams,
    /// Best affine parameters seen so far.
    best_affine: AffineParams,
    /// Current landmark displacement in frame-normalized units (diffeo stage).
    current: Vec<f64>,
    /// Best landmark displacement, in pixels (diffeo stage).
    best: Vec<f64>,
    /// Displacement at entry to the diffeo stage, in pixels.
    anchor: Vec<f64>,
    moments: AdamState,
    evaluations: u32,
    last_loss: f64,
}

impl Default for WarpFit {
    fn default() -> Self {
        Self::identity()
    }
}

impl WarpFit {
    /// A fresh fit at the identity warp.
    pub fn identity() -> Self {
        Self {
            stage: FitStage::Affine,
            affine: AffineParams::IDENTITY,
            best_affine: AffineParams::IDENTITY,
            current: Vec::new(),
            best: Vec::new(),
            anchor: Vec::new(),
            moments: AdamState::default(),
            evaluations: 0,
            last_loss: f64::NAN,
        }
    }

    /// A fresh fit whose affine stage starts at `a` instead of the identity.
    pub fn from_affine(a: AffineParams) -> Self {
        Self {
            affine: a,
            best_affine: a,
            ..Self::identity()
        }
    }

    /// A fit that starts the diffeomorphic stage at the given target.
    pub fn from_target(warper: &Warper, target: &LandmarkSet) -> Result<Self> {
        let d = warper.displacement(target)?;
        let half = warper.half_extent();
        let mut fit = Self::identity();
        fit.stage = FitStage::Diffeo;
        fit.current = d.iter().enumerate().map(|(i, x)| x / half[i % 2]).collect();
        fit.anchor = d.clone();
        fit.best = d;
        Ok(fit)
    }

    pub fn stage(&self) -> FitStage {
        self.stage
    }

    /// Best affine parameters. In the diffeo stage, the affine fit it
    /// started from.
    pub fn affine(&self) -> AffineParams {
        self.best_affine
    }

    pub fn step_count(&self) -> u64 {
        self.moments.step
    }

    pub fn evaluations(&self) -> u32 {
        self.evaluations
    }

    /// Residual at the best iterate against the centroid of the most recent
    /// evaluation. `NaN` before the first evaluation.
    pub fn last_loss(&self) -> f64 {
        self.last_loss
    }

    pub fn is_identity(&self) -> bool {
        match self.stage {
            FitStage::Affine => self.best_affine.is_identity(),
            FitStage::Diffeo => self.best.iter().all(|d| *d == 0.0),
        }
    }

    /// Target landmarks of the best iterate.
    pub fn target(&self, warper: &Warper) -> LandmarkSet {
        match self.stage {
            FitStage::Affine => warper.affine_landmarks(&self.best_affine),
            FitStage::Diffeo => {
                let src = warper.system().source().to_interleaved();
                let t: Vec<f64> = src.iter().zip(&self.best).map(|(s, d)| s + d).collect();
                LandmarkSet::from_interleaved(&t).expect("fit sized to the warper")
            }
        }
    }

    /// Renders `image` through the best iterate.
    pub fn render(&self, warper: &Warper, image: &Image) -> Image {
        match self.stage {
            FitStage::Affine => warper.warp_affine(image, &self.best_affine),
            FitStage::Diffeo => warper.warp_displacement(image, &self.best),
        }
    }

    /// Residual of the best iterate against `centroid`.
    pub fn residual(&self, warper: &Warper, image: &Image, centroid: &Image) -> f64 {
        match self.stage {
            FitStage::Affine => warper.loss_affine(image, centroid, &self.best_affine),
            FitStage::Diffeo => warper.loss_displacement(image, centroid, &self.best),
        }
    }

    fn enter_diffeo(&mut self, warper: &Warper) {
        let src = warper.system().source().to_interleaved();
        let target = warper.affine_landmarks(&self.best_affine).to_interleaved();
        let d: Vec<f64> = target.iter().zip(&src).map(|(t, s)| t - s).collect();
        let half = warper.half_extent();
        self.current = d.iter().enumerate().map(|(i, x)| x / half[i % 2]).collect();
        self.anchor = d.clone();
        self.best = d;
        self.moments = AdamState::new(self.current.len());
        self.stage = FitStage::Diffeo;
    }
}

/// Runs `steps` affine-stage updates. Gradients come from the low-passed
/// pair; the best iterate is chosen on the raw residual.
pub fn fit_affine_stage(
    warper: &Warper,
    image: &PreparedImage,
    centroid: &PreparedImage,
    fit: &mut WarpFit,
    steps: usize,
    config: &FitConfig,
) {
    if fit.stage != FitStage::Affine {
        return;
    }
    let mut best = warper.loss_affine(image.image(), centroid.image(), &fit.best_affine);
    if steps > 0 {
        if fit.moments.m.len() != 6 {
            fit.moments = AdamState::new(6);
        }
        let mut grad = [0.0; 6];
        let (raw, blurred) = (
            (image.image(), centroid.image()),
            (image.blurred(), centroid.blurred()),
        );
        for step in 0..=steps {
            let loss = if step < steps {
                warper
                    .scored_grad_affine(raw, blurred, &fit.affine, &mut grad)
                    .0
            } else {
                warper.loss_affine(raw.0, raw.1, &fit.affine)
            };
            if loss < best {
                best = loss;
                fit.best_affine = fit.affine;
            }
            if step == steps {
                break;
            }
            adam_step(&mut fit.affine.0, &grad, &mut fit.moments, config);
        }
    }
    fit.last_loss = best;
}

/// Runs `steps` updates of all target landmarks on the raw residual.
pub fn fit_diffeo_stage(
    warper: &Warper,
    image: &PreparedImage,
    centroid: &PreparedImage,
    fit: &mut WarpFit,
    steps: usize,
    config: &FitConfig,
) {
    if fit.stage == FitStage::Affine {
        if steps == 0 {
            fit.last_loss = warper.loss_affine(image.image(), centroid.image(), &fit.best_affine);
            return;
        }
        fit.enter_diffeo(warper);
    }
    let (img, cen) = (image.image(), centroid.image());
    let half = warper.half_extent();
    let mut best = warper.loss_displacement(img, cen, &fit.best);
    if steps > 0 {
        let limits = clamp_limits(warper, config);
        let n = fit.current.len();
        let mut pixels = vec![0.0; n];
        let mut grad = vec![0.0; n];
        to_pixels(&fit.current, half, &mut pixels);
        for step in 0..=steps {
            let loss = if step < steps {
                warper.loss_and_grad_displacement(img, cen, &pixels, &mut grad)
            } else {
                warper.loss_displacement(img, cen, &pixels)
            };
            if loss < best {
                best = loss;
                fit.best.copy_from_slice(&pixels);
            }
            if step == steps {
                break;
            }
            for (i, g) in grad.iter_mut().enumerate() {
                *g *= half[i % 2];
            }
            adam_step(&mut fit.current, &grad, &mut fit.moments, config);
            if let Some([lu, lv]) = limits {
                for (i, c) in fit.current.iter_mut().enumerate() {
                    let (lim, h) = if i % 2 == 0 {
                        (lu, half[0])
                    } else {
                        (lv, half[1])
                    };
                    let anchor = fit.anchor[i] / h;
                    *c = c.clamp(anchor - lim / h, anchor + lim / h);
                }
            }
            to_pixels(&fit.current, half, &mut pixels);
        }
    }
    fit.last_loss = best;
}

fn to_pixels(normalized: &[f64], half: [f64; 2], out: &mut [f64]) {
    for (i, (o, x)) in out.iter_mut().zip(normalized).enumerate() {
        *o = x * half[i % 2];
    }
}

fn clamp_limits(warper: &Warper, config: &FitConfig) -> Option<[f64; 2]> {
    let cells = config.clamp_cells?;
    let side = (warper.landmarks() as f64).sqrt();
    let (h, w) = warper.shape();
    Some([cells * h as f64 / side, cells * w as f64 / side])
}

/// Both stages, warm-started from `fit`; returns the residual of the best
/// iterate and leaves the fit ready for the next call.
///
/// The affine stage gets `stage1_steps` on a fresh fit and
/// `stage1_refresh_steps` afterwards.
pub fn evaluate_distance(
    warper: &Warper,
    image: &PreparedImage,
    centroid: &PreparedImage,
    fit: &mut WarpFit,
    config: &FitConfig,
) -> f64 {
    let stage1 = if fit.evaluations == 0 {
        config.stage1_steps
    } else {
        config.stage1_refresh_steps
    };
    fit_affine_stage(warper, image, centroid, fit, stage1, config);
    fit_diffeo_stage(warper, image, centroid, fit, config.stage2_steps, config);
    fit.evaluations += 1;
    fit.last_loss
}

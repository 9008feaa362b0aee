//! Thin-plate-spline interpolation between two landmark sets.
//!
//! The spline is parametrized by its target landmarks. Everything that only
//! depends on the source landmarks (the bordered system matrix and its
//! inverse) lives in [`TpsSystem`] and is computed once, after which solving
//! for a new target costs a few matrix-vector products.
//!
//! Coordinates are `(u, v)` pairs in pixel units: `u` runs down the rows,
//! `v` along the columns, and `(0, 0)` is the center of the top-left pixel.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition estimate above which the system is reported as singular.
pub const MAX_CONDITION: f64 = 1e12;

const REFINEMENT_STEPS: usize = 2;

static FACTORIZATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of system-matrix inversions performed by this process so far.
pub fn factorization_count() -> usize {
    FACTORIZATIONS.load(Ordering::Relaxed)
}

/// Radial kernel `U(r) = r² log r²`, extended by continuity with `U(0) = 0`.
#[inline]
pub fn kernel(r: f64) -> f64 {
    if r > 0.0 {
        let r2 = r * r;
        r2 * r2.ln()
    } else {
        0.0
    }
}

/// Norm used for the kernel radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum KernelNorm {
    /// `|du| + |dv|`. The canonical choice.
    #[default]
    L1,
    /// Euclidean radius of the classical spline, kept for sensitivity checks.
    L2,
}

impl KernelNorm {
    #[inline]
    pub fn radius(self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let du = a[0] - b[0];
        let dv = a[1] - b[1];
        match self {
            KernelNorm::L1 => du.abs() + dv.abs(),
            KernelNorm::L2 => du.hypot(dv),
        }
    }
}

/// An ordered set of plane points. Source and target sets of equal length
/// correspond index to index.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("landmark set"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidValue("non-finite landmark coordinate".into()));
        }
        Ok(Self { points })
    }

    /// Builds a set from `[u0, v0, u1, v1, ...]`.
    pub fn from_interleaved(coords: &[f64]) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(Error::mismatch(
                "an even number of coordinates",
                coords.len(),
            ));
        }
        Self::new(coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    /// A `side × side` grid over a `height × width` frame, inset by half a
    /// cell from the border, in row-major order.
    pub fn uniform_grid(height: usize, width: usize, side: usize) -> Result<Self> {
        if side == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidValue(format!(
                "grid side {side} on a {height}x{width} frame"
            )));
        }
        let cell_u = height as f64 / side as f64;
        let cell_v = width as f64 / side as f64;
        let mut points = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                points.push([
                    -0.5 + (i as f64 + 0.5) * cell_u,
                    -0.5 + (j as f64 + 0.5) * cell_v,
                ]);
            }
        }
        Self::new(points)
    }

    /// Grid with `count` landmarks; `count` must be a perfect square.
    pub fn grid_with_count(height: usize, width: usize, count: usize) -> Result<Self> {
        Self::uniform_grid(height, width, grid_side(count)?)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Applies `p ↦ m·p + t` to every point.
    pub fn map_affine(&self, m: [[f64; 2]; 2], t: [f64; 2]) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| {
                [
                    m[0][0] * p[0] + m[0][1] * p[1] + t[0],
                    m[1][0] * p[0] + m[1][1] * p[1] + t[1],
                ]
            })
            .collect();
        Self { points }
    }
}

/// Side length of a square landmark grid with `count` points.
pub fn grid_side(count: usize) -> Result<usize> {
    let side = (count as f64).sqrt().round() as usize;
    if side * side != count || side == 0 {
        return Err(Error::InvalidValue(format!(
            "landmark count {count} is not a perfect square"
        )));
    }
    Ok(side)
}

/// Affine part and kernel weights of a solved spline, one row per output
/// coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsParams {
    /// `(a_1, a_u, a_v)` for the `u'` and `v'` outputs.
    pub affine: [[f64; 3]; 2],
    /// Kernel weights for the `u'` and `v'` outputs.
    pub weights: [Vec<f64>; 2],
}

/// The linear map from target landmarks to mapped coordinates, for a fixed
/// set of query coordinates. Row `p` holds the coefficients `a_pj` with
/// `F(coords[p]) = Σ_j a_pj · target[j]`, applied to each output axis
/// independently.
#[derive(Debug, Clone)]
pub struct SamplingBasis {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SamplingBasis {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.cols..(p + 1) * self.cols]
    }
}

/// Precomputed inverse of the bordered spline system for one source set.
#[derive(Debug, Clone)]
pub struct TpsSystem {
    source: LandmarkSet,
    matrix: DMatrix<f64>,
    l_inverse: DMatrix<f64>,
    regularization: f64,
    norm: KernelNorm,
    condition: f64,
}

impl TpsSystem {
    /// Builds `L = [[K + λI, P], [Pᵀ, 0]]` with the L1 kernel radius and
    /// inverts it.
    pub fn build(source: LandmarkSet, regularization: f64) -> Result<Self> {
        Self::build_with_norm(source, regularization, KernelNorm::L1)
    }

    pub fn build_with_norm(
        source: LandmarkSet,
        regularization: f64,
        norm: KernelNorm,
    ) -> Result<Self> {
        if !(regularization >= 0.0 && regularization.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "regularization must be a non-negative finite number, got {regularization}"
            )));
        }
        let l = system_matrix(source.points(), regularization, norm);
        if source.len() < 3 {
            return Err(Error::SingularSystem {
                condition: f64::INFINITY,
            });
        }
        FACTORIZATIONS.fetch_add(1, Ordering::Relaxed);

        let singular = || Error::SingularSystem {
            condition: f64::INFINITY,
        };
        let mut inv = l.clone().lu().try_inverse().ok_or_else(singular)?;
        let condition = norm_1(&l) * norm_1(&inv);
        if !condition.is_finite() || condition > MAX_CONDITION {
            return Err(Error::SingularSystem { condition });
        }
        // One Newton-Schulz sweep, X ← X + X(I − LX), recovers most of the
        // digits lost to the kernel block's dynamic range.
        let n = l.nrows();
        let residual = DMatrix::identity(n, n) - &l * &inv;
        inv += &inv * residual;
        // L is symmetric; the rounding noise of the inverse need not be.
        let inv = (&inv + inv.transpose()) * 0.5;

        Ok(Self {
            source,
            matrix: l,
            l_inverse: inv,
            regularization,
            norm,
            condition,
        })
    }

    pub fn source(&self) -> &LandmarkSet {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn l_inverse(&self) -> &DMatrix<f64> {
        &self.l_inverse
    }

    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn norm(&self) -> KernelNorm {
        self.norm
    }

    /// `‖L‖₁ · ‖L⁻¹‖₁` measured at construction.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Rebuilds the (unfactored) system matrix from the source landmarks.
    pub fn system_matrix(&self) -> DMatrix<f64> {
        self.matrix.clone()
    }

    fn check_target(&self, target: &LandmarkSet) -> Result<()> {
        if target.len() != self.len() {
            return Err(Error::mismatch(
                format!("{} target landmarks", self.len()),
                target.len(),
            ));
        }
        Ok(())
    }

    /// Solves for the spline parameters, with iterative refinement against
    /// `L` so the interpolation residual stays at rounding level even for
    /// badly conditioned placements.
    pub fn solve(&self, target: &LandmarkSet) -> Result<TpsParams> {
        self.check_target(target)?;
        let l = self.len();
        let solve_axis = |axis: usize| {
            let b = DVector::from_fn(
                l + 3,
                |i, _| {
                    if i < l {
                        target.points()[i][axis]
                    } else {
                        0.0
                    }
                },
            );
            let mut x = &self.l_inverse * &b;
            for _ in 0..REFINEMENT_STEPS {
                let r = &b - &self.matrix * &x;
                x += &self.l_inverse * r;
            }
            x
        };
        let su = solve_axis(0);
        let sv = solve_axis(1);
        Ok(TpsParams {
            affine: [[su[l], su[l + 1], su[l + 2]], [sv[l], sv[l + 1], sv[l + 2]]],
            weights: [
                su.rows(0, l).iter().copied().collect(),
                sv.rows(0, l).iter().copied().collect(),
            ],
        })
    }

    /// Maps each coordinate through the spline described by `params`.
    pub fn map_coords(&self, params: &TpsParams, coords: &[[f64; 2]]) -> Vec<[f64; 2]> {
        coords
            .iter()
            .map(|&p| {
                let mut out = [0.0; 2];
                for (axis, o) in out.iter_mut().enumerate() {
                    let [a1, au, av] = params.affine[axis];
                    *o = a1 + au * p[0] + av * p[1];
                }
                for (i, s) in self.source.points().iter().enumerate() {
                    let k = kernel(self.norm.radius(p, *s));
                    out[0] += params.weights[0][i] * k;
                    out[1] += params.weights[1][i] * k;
                }
                out
            })
            .collect()
    }

    /// Per-axis linear map from target landmarks to mapped `coords`.
    pub fn sampling_basis(&self, coords: &[[f64; 2]]) -> SamplingBasis {
        let l = self.len();
        let mut data = vec![0.0; coords.len() * l];
        let mut b = vec![0.0; l + 3];
        for (p, &c) in coords.iter().enumerate() {
            for (i, s) in self.source.points().iter().enumerate() {
                b[i] = kernel(self.norm.radius(c, *s));
            }
            b[l] = 1.0;
            b[l + 1] = c[0];
            b[l + 2] = c[1];
            let row = &mut data[p * l..(p + 1) * l];
            for (m, &bm) in b.iter().enumerate() {
                if bm == 0.0 {
                    continue;
                }
                for (j, r) in row.iter_mut().enumerate() {
                    *r += bm * self.l_inverse[(m, j)];
                }
            }
        }
        SamplingBasis {
            rows: coords.len(),
            cols: l,
            data,
        }
    }

    /// Dense `(2·|coords|) × (2ℓ)` Jacobian of the mapped coordinates with
    /// respect to the interleaved target vector `[u'_1, v'_1, u'_2, ...]`.
    /// Rows are interleaved the same way.
    pub fn coord_jacobian(&self, coords: &[[f64; 2]]) -> DMatrix<f64> {
        let basis = self.sampling_basis(coords);
        let l = self.len();
        let mut jac = DMatrix::zeros(2 * coords.len(), 2 * l);
        for p in 0..coords.len() {
            for (j, &a) in basis.row(p).iter().enumerate() {
                jac[(2 * p, 2 * j)] = a;
                jac[(2 * p + 1, 2 * j + 1)] = a;
            }
        }
        jac
    }
}

/// Induced 1-norm: the largest absolute column sum.
fn norm_1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn system_matrix(points: &[[f64; 2]], regularization: f64, norm: KernelNorm) -> DMatrix<f64> {
    let l = points.len();
    let mut m = DMatrix::zeros(l + 3, l + 3);
    for i in 0..l {
        for j in 0..l {
            m[(i, j)] = kernel(norm.radius(points[i], points[j]));
        }
        m[(i, i)] += regularization;
        let row = [1.0, points[i][0], points[i][1]];
        for (c, &v) in row.iter().enumerate() {
            m[(i, l + c)] = v;
            m[(l + c, i)] = v;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct SystemKey {
    height: usize,
    width: usize,
    landmarks: usize,
    regularization_bits: u64,
    norm: KernelNorm,
}

/// Builds each grid system once per `(image shape, ℓ)` and hands out shared
/// references afterwards.
#[derive(Debug, Default)]
pub struct SystemCache {
    systems: Mutex<HashMap<SystemKey, Arc<TpsSystem>>>,
    factorizations: AtomicUsize,
}

impl SystemCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// The system for a uniform grid of `landmarks` points on a
    /// `height × width` frame.
    pub fn grid_system(
        &self,
        height: usize,
        width: usize,
        landmarks: usize,
        regularization: f64,
        norm: KernelNorm,
    ) -> Result<Arc<TpsSystem>> {
        let key = SystemKey {
            height,
            width,
            landmarks,
            regularization_bits: regularization.to_bits(),
            norm,
        };
        let mut systems = self.systems.lock().expect("system cache poisoned");
        if let Some(system) = systems.get(&key) {
            return Ok(Arc::clone(system));
        }
        let source = LandmarkSet::grid_with_count(height, width, landmarks)?;
        self.factorizations.fetch_add(1, Ordering::Relaxed);
        let system = Arc::new(TpsSystem::build_with_norm(source, regularization, norm)?);
        systems.insert(key, Arc::clone(&system));
        Ok(system)
    }

    /// Number of inversions this cache has triggered.
    pub fn factorizations(&self) -> usize {
        self.factorizations.load(Ordering::Relaxed)
    }
}

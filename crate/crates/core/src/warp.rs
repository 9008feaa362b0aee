//! Images, bilinear rendering through a spline warp, and the analytic
//! gradient of the warp residual with respect to the target landmarks.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tps::{LandmarkSet, SamplingBasis, TpsSystem};

/// A row-major `height × width` grid of intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidValue(format!(
                "empty image shape {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::mismatch(
                format!("{} pixels for {height}x{width}", height * width),
                pixels.len(),
            ));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidValue("non-finite pixel".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Pixel value with zero padding outside the frame.
    #[inline]
    pub fn get_padded(&self, row: i64, col: i64) -> f64 {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            0.0
        } else {
            self.pixels[row as usize * self.width + col as usize]
        }
    }

    pub fn norm(&self) -> f64 {
        self.pixels.iter().map(|p| p * p).sum::<f64>().sqrt()
    }

    /// Unit-norm copy. An all-zero image is returned unchanged.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        out.normalize();
        out
    }

    pub fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            self.pixels.iter_mut().for_each(|p| *p /= n);
        }
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn squared_distance(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::mismatch(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }
}

/// Bilinear blend of the four grid neighbors of `(u, v)`, zero outside the
/// frame.
#[inline]
pub fn bilinear_sample(image: &Image, u: f64, v: f64) -> f64 {
    match cell(image, u, v) {
        Some(([p00, p01, p10, p11], fu, fv)) => {
            let top = p00 + fv * (p01 - p00);
            let bottom = p10 + fv * (p11 - p10);
            top + fu * (bottom - top)
        }
        None => 0.0,
    }
}

/// Value and partial derivatives `(∂/∂u, ∂/∂v)` of the bilinear interpolant.
/// On cell boundaries the derivative of the cell selected by `floor` is used.
#[inline]
pub fn sample_with_grad(image: &Image, u: f64, v: f64) -> (f64, f64, f64) {
    match cell(image, u, v) {
        Some(([p00, p01, p10, p11], fu, fv)) => {
            let top = p00 + fv * (p01 - p00);
            let bottom = p10 + fv * (p11 - p10);
            let value = top + fu * (bottom - top);
            let du = bottom - top;
            let dv = (1.0 - fu) * (p01 - p00) + fu * (p11 - p10);
            (value, du, dv)
        }
        None => (0.0, 0.0, 0.0),
    }
}

#[inline(always)]
fn floor_i64(x: f64) -> i64 {
    let t = x as i64;
    t - ((t as f64) > x) as i64
}

/// Corner values of the cell containing `(u, v)` and the offsets inside it;
/// `None` when all four corners lie outside the frame (or on NaN).
#[inline(always)]
fn cell(image: &Image, u: f64, v: f64) -> Option<([f64; 4], f64, f64)> {
    let (h, w) = (image.height, image.width);
    if !(u >= -1.0 && v >= -1.0 && u < h as f64 && v < w as f64) {
        return None;
    }
    let (ui, vi) = (floor_i64(u), floor_i64(v));
    let (fu, fv) = (u - ui as f64, v - vi as f64);
    let corners = if ui >= 0 && vi >= 0 && (ui as usize) + 1 < h && (vi as usize) + 1 < w {
        let base = ui as usize * w + vi as usize;
        let q = &image.pixels[base..base + w + 2];
        [q[0], q[1], q[w], q[w + 1]]
    } else {
        [
            image.get_padded(ui, vi),
            image.get_padded(ui, vi + 1),
            image.get_padded(ui + 1, vi),
            image.get_padded(ui + 1, vi + 1),
        ]
    };
    Some((corners, fu, fv))
}

/// Derivative of the residual loss with respect to the interleaved target
/// landmarks `[u'_1, v'_1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGradient {
    pub d_loss_d_landmarks: Vec<f64>,
}

/// Six affine parameters acting in frame-normalized coordinates.
///
/// With `c` the frame center and `h` the half extent per axis, a pixel `p`
/// samples the source at `c + h ⊙ (M·(p − c)/h + t)`, where
/// `M = [[m_uu, m_uv], [m_vu, m_vv]]` and `t = (t_u, t_v)`. The identity is
/// `[1, 0, 0, 1, 0, 0]` and reproduces every pixel position bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams(pub [f64; 6]);

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Renders images of one shape through splines of one [`TpsSystem`].
///
/// Holds the sampling basis for every pixel of the frame, so a warp costs
/// two small matrix-vector products plus the bilinear lookups.
#[derive(Debug, Clone)]
pub struct Warper {
    system: Arc<TpsSystem>,
    height: usize,
    width: usize,
    basis: SamplingBasis,
    center: [f64; 2],
    half: [f64; 2],
    /// Normalized coordinate of each row and of each column.
    norm_rows: Vec<f64>,
    norm_cols: Vec<f64>,
}

impl Warper {
    pub fn new(system: Arc<TpsSystem>, height: usize, width: usize) -> Self {
        let coords: Vec<[f64; 2]> = (0..height)
            .flat_map(|r| (0..width).map(move |c| [r as f64, c as f64]))
            .collect();
        let basis = system.sampling_basis(&coords);
        let center = [(height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0];
        let half = [height as f64 / 2.0, width as f64 / 2.0];
        Self {
            system,
            height,
            width,
            basis,
            center,
            half,
            norm_rows: (0..height)
                .map(|r| (r as f64 - center[0]) / half[0])
                .collect(),
            norm_cols: (0..width)
                .map(|c| (c as f64 - center[1]) / half[1])
                .collect(),
        }
    }

    pub fn system(&self) -> &Arc<TpsSystem> {
        &self.system
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn landmarks(&self) -> usize {
        self.system.len()
    }

    /// Half extent of the frame per axis, the unit of normalized coordinates.
    pub fn half_extent(&self) -> [f64; 2] {
        self.half
    }

    pub fn center(&self) -> [f64; 2] {
        self.center
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.shape() != (self.height, self.width) {
            return Err(Error::mismatch(
                format!("{}x{} image", self.height, self.width),
                format!("{}x{}", image.height, image.width),
            ));
        }
        Ok(())
    }

    /// Interleaved displacement `target − source`.
    pub fn displacement(&self, target: &LandmarkSet) -> Result<Vec<f64>> {
        if target.len() != self.system.len() {
            return Err(Error::mismatch(
                format!("{} landmarks", self.system.len()),
                target.len(),
            ));
        }
        Ok(target
            .points()
            .iter()
            .zip(self.system.source().points())
            .flat_map(|(t, s)| [t[0] - s[0], t[1] - s[1]])
            .collect())
    }

    /// Sampling position of every pixel for an interleaved landmark
    /// displacement.
    ///
    /// The spline reproduces the identity exactly, so positions are formed
    /// as `p + A·δ` rather than `A·target`; a zero displacement then samples
    /// the pixel centers without rounding.
    pub fn sample_positions(&self, displacement: &[f64]) -> Vec<[f64; 2]> {
        let l = self.system.len();
        let (du, dv) = split_axes(displacement, l);
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let (su, sv) = dot2(self.basis.row(r * self.width + c), &du, &dv);
                out.push([r as f64 + su, c as f64 + sv]);
            }
        }
        out
    }

    pub fn warp(&self, image: &Image, target: &LandmarkSet) -> Result<Image> {
        self.check_image(image)?;
        let d = self.displacement(target)?;
        Ok(self.warp_displacement(image, &d))
    }

    pub fn warp_displacement(&self, image: &Image, displacement: &[f64]) -> Image {
        let pixels = self
            .sample_positions(displacement)
            .into_iter()
            .map(|[u, v]| bilinear_sample(image, u, v))
            .collect();
        Image {
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    /// `‖warp(image, target) − centroid‖²` and its gradient with respect to
    /// the target landmarks.
    pub fn loss_and_grad(
        &self,
        image: &Image,
        centroid: &Image,
        target: &LandmarkSet,
    ) -> Result<(f64, WarpGradient)> {
        self.check_image(image)?;
        self.check_image(centroid)?;
        let d = self.displacement(target)?;
        let mut grad = vec![0.0; d.len()];
        let loss = self.loss_and_grad_displacement(image, centroid, &d, &mut grad);
        Ok((
            loss,
            WarpGradient {
                d_loss_d_landmarks: grad,
            },
        ))
    }

    /// Residual loss at an interleaved displacement; the gradient (with
    /// respect to the displacement, equivalently the target) is written to
    /// `grad`.
    pub fn loss_and_grad_displacement(
        &self,
        image: &Image,
        centroid: &Image,
        displacement: &[f64],
        grad: &mut [f64],
    ) -> f64 {
        let l = self.system.len();
        let (du, dv) = split_axes(displacement, l);
        let mut gu = vec![0.0; l];
        let mut gv = vec![0.0; l];
        let mut loss = 0.0;
        for r in 0..self.height {
            for c in 0..self.width {
                let p = r * self.width + c;
                let row = self.basis.row(p);
                let (su, sv) = dot2(row, &du, &dv);
                let (val, dval_du, dval_dv) = sample_with_grad(image, r as f64 + su, c as f64 + sv);
                let e = val - centroid.pixels[p];
                loss += e * e;
                let cu = 2.0 * e * dval_du;
                let cv = 2.0 * e * dval_dv;
                if cu != 0.0 || cv != 0.0 {
                    for j in 0..l {
                        gu[j] += row[j] * cu;
                        gv[j] += row[j] * cv;
                    }
                }
            }
        }
        for j in 0..l {
            grad[2 * j] = gu[j];
            grad[2 * j + 1] = gv[j];
        }
        loss
    }

    pub fn loss_displacement(&self, image: &Image, centroid: &Image, displacement: &[f64]) -> f64 {
        let l = self.system.len();
        let (du, dv) = split_axes(displacement, l);
        let mut loss = 0.0;
        for r in 0..self.height {
            for c in 0..self.width {
                let p = r * self.width + c;
                let (su, sv) = dot2(self.basis.row(p), &du, &dv);
                let e = bilinear_sample(image, r as f64 + su, c as f64 + sv) - centroid.pixels[p];
                loss += e * e;
            }
        }
        loss
    }

    /// Pixel-space form `p ↦ m·p + t` of affine parameters.
    pub fn affine_to_pixel(&self, a: &AffineParams) -> ([[f64; 2]; 2], [f64; 2]) {
        let [m_uu, m_uv, m_vu, m_vv, t_u, t_v] = a.0;
        let [cu, cv] = self.center;
        let [hu, hv] = self.half;
        let m = [[m_uu, m_uv * hu / hv], [m_vu * hv / hu, m_vv]];
        let t = [
            cu + hu * t_u - m[0][0] * cu - m[0][1] * cv,
            cv + hv * t_v - m[1][0] * cu - m[1][1] * cv,
        ];
        (m, t)
    }

    /// Source landmarks moved by the affine map.
    pub fn affine_landmarks(&self, a: &AffineParams) -> LandmarkSet {
        let (m, t) = self.affine_to_pixel(a);
        self.system.source().map_affine(m, t)
    }

    #[inline]
    fn affine_position(&self, a: &AffineParams, row: usize, col: usize) -> (f64, f64, f64, f64) {
        let [m_uu, m_uv, m_vu, m_vv, t_u, t_v] = a.0;
        let nu = self.norm_rows[row];
        let nv = self.norm_cols[col];
        let u = row as f64 + self.half[0] * ((m_uu - 1.0) * nu + m_uv * nv + t_u);
        let v = col as f64 + self.half[1] * (m_vu * nu + (m_vv - 1.0) * nv + t_v);
        (u, v, nu, nv)
    }

    /// Renders through an affine map directly. Equal, up to rounding, to
    /// [`Warper::warp`] with [`Warper::affine_landmarks`], since the spline
    /// reproduces affine maps exactly.
    pub fn warp_affine(&self, image: &Image, a: &AffineParams) -> Image {
        Image::from_fn(self.height, self.width, |r, c| {
            let (u, v, _, _) = self.affine_position(a, r, c);
            bilinear_sample(image, u, v)
        })
    }

    pub fn loss_affine(&self, image: &Image, centroid: &Image, a: &AffineParams) -> f64 {
        let mut loss = 0.0;
        for r in 0..self.height {
            for c in 0..self.width {
                let (u, v, _, _) = self.affine_position(a, r, c);
                let d = bilinear_sample(image, u, v) - centroid.pixels[r * self.width + c];
                loss += d * d;
            }
        }
        loss
    }

    pub fn loss_and_grad_affine(
        &self,
        image: &Image,
        centroid: &Image,
        a: &AffineParams,
        grad: &mut [f64; 6],
    ) -> f64 {
        let mut loss = 0.0;
        *grad = [0.0; 6];
        let [hu, hv] = self.half;
        for r in 0..self.height {
            for c in 0..self.width {
                let (u, v, nu, nv) = self.affine_position(a, r, c);
                let (val, dval_du, dval_dv) = sample_with_grad(image, u, v);
                let d = val - centroid.pixels[r * self.width + c];
                loss += d * d;
                let cu = 2.0 * d * dval_du * hu;
                let cv = 2.0 * d * dval_dv * hv;
                grad[0] += cu * nu;
                grad[1] += cu * nv;
                grad[2] += cv * nu;
                grad[3] += cv * nv;
                grad[4] += cu;
                grad[5] += cv;
            }
        }
        loss
    }
}

impl Warper {
    /// Raw residual of `(image, centroid)` together with the loss and
    /// gradient of the `(image_blurred, centroid_blurred)` pair, all at `a`.
    pub fn scored_grad_affine(
        &self,
        raw: (&Image, &Image),
        blurred: (&Image, &Image),
        a: &AffineParams,
        grad: &mut [f64; 6],
    ) -> (f64, f64) {
        let (image, centroid) = raw;
        let (image_b, centroid_b) = blurred;
        let mut raw_loss = 0.0;
        let mut loss = 0.0;
        *grad = [0.0; 6];
        let [hu, hv] = self.half;
        for r in 0..self.height {
            for c in 0..self.width {
                let p = r * self.width + c;
                let (u, v, nu, nv) = self.affine_position(a, r, c);
                let e = bilinear_sample(image, u, v) - centroid.pixels[p];
                raw_loss += e * e;
                let (val, dval_du, dval_dv) = sample_with_grad(image_b, u, v);
                let d = val - centroid_b.pixels[p];
                loss += d * d;
                let cu = 2.0 * d * dval_du * hu;
                let cv = 2.0 * d * dval_dv * hv;
                grad[0] += cu * nu;
                grad[1] += cu * nv;
                grad[2] += cv * nu;
                grad[3] += cv * nv;
                grad[4] += cu;
                grad[5] += cv;
            }
        }
        (raw_loss, loss)
    }
}

fn split_axes(interleaved: &[f64], l: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(interleaved.len(), 2 * l);
    let du = interleaved.iter().step_by(2).copied().collect();
    let dv = interleaved.iter().skip(1).step_by(2).copied().collect();
    (du, dv)
}

#[inline]
fn dot2(row: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = 0.0;
    let mut y = 0.0;
    for j in 0..row.len() {
        x += row[j] * a[j];
        y += row[j] * b[j];
    }
    (x, y)
}

/// Separable truncated Gaussian blur with radius `⌈4σ⌉`, renormalized to
/// unit Euclidean norm.
///
/// Near the border the kernel is cut to the in-frame taps and rescaled to
/// unit sum, so constant images stay constant.
pub fn low_pass(image: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let (h, w) = image.shape();
    let blur_axis = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let (pos, len) = if along_rows { (r, h) } else { (c, w) };
                let mut acc = 0.0;
                let mut weight = 0.0;
                for (ti, &t) in taps.iter().enumerate() {
                    let q = pos as i64 + ti as i64 - radius;
                    if q < 0 || q >= len as i64 {
                        continue;
                    }
                    let idx = if along_rows {
                        q as usize * w + c
                    } else {
                        r * w + q as usize
                    };
                    acc += t * src[idx];
                    weight += t;
                }
                out[r * w + c] = acc / weight;
            }
        }
        out
    };
    let tmp = blur_axis(image.pixels(), false);
    let pixels = blur_axis(&tmp, true);
    let mut out = Image {
        height: h,
        width: w,
        pixels,
    };
    out.normalize();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tps::TpsSystem;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| rng.gen::<f64>()).normalized()
    }

    fn warper(h: usize, w: usize, side: usize) -> Warper {
        let src = LandmarkSet::uniform_grid(h, w, side).unwrap();
        Warper::new(Arc::new(TpsSystem::build(src, 0.0).unwrap()), h, w)
    }

    #[test]
    fn bilinear_center_of_2x2() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&img, 0.5, 0.5), 1.5);
        assert_eq!(bilinear_sample(&img, -5.0, -5.0), 0.0);
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(bilinear_sample(&img, r as f64, c as f64), img.get(r, c));
            }
        }
    }

    #[test]
    fn bilinear_zero_pads_edges() {
        let img = Image::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(bilinear_sample(&img, 1.5, 0.0), 0.5);
        assert_eq!(bilinear_sample(&img, -0.5, -0.5), 0.25);
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = warper(12, 9, 3);
        let img = random_image(&mut rng, 12, 9);
        let out = w.warp(&img, w.system().source()).unwrap();
        assert_eq!(out, img);
        assert_eq!(w.warp_affine(&img, &AffineParams::IDENTITY), img);
    }

    #[test]
    fn unit_shift_matches_integer_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = warper(10, 10, 3);
        let img = random_image(&mut rng, 10, 10);
        let target = w
            .system()
            .source()
            .map_affine([[1.0, 0.0], [0.0, 1.0]], [1.0, 0.0]);
        let out = w.warp(&img, &target).unwrap();
        for r in 0..10 {
            for c in 0..10 {
                let expect = if r + 1 < 10 { img.get(r + 1, c) } else { 0.0 };
                assert_abs_diff_eq!(out.get(r, c), expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn half_turn_twice_returns_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = warper(16, 16, 4);
        let img = random_image(&mut rng, 16, 16);
        let c = 7.5;
        let target = w
            .system()
            .source()
            .map_affine([[-1.0, 0.0], [0.0, -1.0]], [2.0 * c, 2.0 * c]);
        let once = w.warp(&img, &target).unwrap();
        let twice = w.warp(&once, &target).unwrap();
        for r in 2..14 {
            for col in 2..14 {
                assert_abs_diff_eq!(twice.get(r, col), img.get(r, col), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn affine_path_matches_landmark_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = warper(20, 16, 4);
        let img = random_image(&mut rng, 20, 16);
        let a = AffineParams([1.05, 0.1, -0.08, 0.93, 0.05, -0.1]);
        let direct = w.warp_affine(&img, &a);
        let via = w.warp(&img, &w.affine_landmarks(&a)).unwrap();
        for (x, y) in direct.pixels().iter().zip(via.pixels()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn identity_pair_has_zero_loss_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = warper(14, 14, 3);
        let img = random_image(&mut rng, 14, 14);
        let (loss, grad) = w.loss_and_grad(&img, &img, w.system().source()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.d_loss_d_landmarks.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn flat_image_has_zero_grad_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = warper(14, 14, 3);
        let flat = Image::new(14, 14, vec![0.5; 196]).unwrap();
        let centroid = random_image(&mut rng, 14, 14);
        // A mild contraction keeps every sample strictly inside the frame.
        let target = w.affine_landmarks(&AffineParams([0.8, 0.0, 0.0, 0.8, 0.01, 0.02]));
        let (_, grad) = w.loss_and_grad(&flat, &centroid, &target).unwrap();
        for g in grad.d_loss_d_landmarks {
            assert_abs_diff_eq!(g, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn affine_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = warper(16, 16, 3);
        let img = low_pass(&random_image(&mut rng, 16, 16), 1.0).unwrap();
        let centroid = random_image(&mut rng, 16, 16);
        let a = AffineParams([1.02, 0.03, -0.04, 0.97, 0.013, -0.021]);
        let mut grad = [0.0; 6];
        w.loss_and_grad_affine(&img, &centroid, &a, &mut grad);
        for k in 0..6 {
            let h = 1e-6;
            let mut plus = a;
            plus.0[k] += h;
            let mut minus = a;
            minus.0[k] -= h;
            let fd = (w.loss_affine(&img, &centroid, &plus)
                - w.loss_affine(&img, &centroid, &minus))
                / (2.0 * h);
            assert_abs_diff_eq!(grad[k], fd, epsilon = 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn low_pass_keeps_constants() {
        let img = Image::new(9, 7, vec![3.0; 63]).unwrap();
        let out = low_pass(&img, 1.5).unwrap();
        let expect = img.normalized();
        for (a, b) in out.pixels().iter().zip(expect.pixels()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn low_pass_impulse_is_symmetric() {
        let img = Image::from_fn(11, 11, |r, c| if r == 5 && c == 5 { 1.0 } else { 0.0 });
        let out = low_pass(&img, 1.0).unwrap();
        for r in 0..11 {
            for c in 0..11 {
                assert_abs_diff_eq!(out.get(r, c), out.get(10 - r, c), epsilon = 1e-12);
                assert_abs_diff_eq!(out.get(r, c), out.get(r, 10 - c), epsilon = 1e-12);
            }
        }
        assert!(low_pass(&img, 0.0).is_err());
    }

    #[test]
    fn low_pass_reduces_high_frequency_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, 20, 20);
        let out = low_pass(&img, 2.0).unwrap();
        let roughness = |x: &Image| {
            let mut s = 0.0;
            for r in 0..20 {
                for c in 0..19 {
                    s += (x.get(r, c + 1) - x.get(r, c)).powi(2);
                }
            }
            for r in 0..19 {
                for c in 0..20 {
                    s += (x.get(r + 1, c) - x.get(r, c)).powi(2);
                }
            }
            s
        };
        assert!(roughness(&out) / roughness(&img) < 1.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let w = warper(8, 8, 3);
        let img = Image::zeros(8, 9);
        assert!(matches!(
            w.warp(&img, w.system().source()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}

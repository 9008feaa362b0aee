//! Independent oracles and fixtures shared by the integration suites and the
//! acceptance harness.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use dikm_core::datasets::{load_idx, LabeledDataset};
use dikm_core::{low_pass, Image, LandmarkSet, TpsSystem, Warper};
use rand::Rng;

pub fn mnist5k() -> LabeledDataset {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k");
    load_idx(
        &root.join("mnist5k-images-idx3-ubyte"),
        &root.join("mnist5k-labels-idx1-ubyte"),
    )
    .expect("bundled MNIST subset")
}

pub fn warper(h: usize, w: usize, landmarks: usize) -> Warper {
    let grid = LandmarkSet::grid_with_count(h, w, landmarks).unwrap();
    Warper::new(Arc::new(TpsSystem::build(grid, 0.0).unwrap()), h, w)
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _| rng.gen::<f64>())
}

/// A blurred random image with a zero border band of `margin` pixels,
/// unit norm.
pub fn smooth_image(rng: &mut impl Rng, h: usize, w: usize, margin: usize) -> Image {
    let raw = Image::from_fn(h, w, |r, c| {
        let inside = r >= margin && c >= margin && r + margin < h && c + margin < w;
        if inside {
            rng.gen::<f64>()
        } else {
            0.0
        }
    });
    low_pass(&raw, 1.0).unwrap().normalized()
}

/// A regular `side × side` grid over `h × w` with each point jittered by up
/// to `jitter` of a cell.
pub fn jittered_grid(
    rng: &mut impl Rng,
    h: usize,
    w: usize,
    side: usize,
    jitter: f64,
) -> LandmarkSet {
    let (cu, cv) = (h as f64 / side as f64, w as f64 / side as f64);
    let mut pts = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            pts.push([
                (i as f64 + 0.5) * cu + rng.gen_range(-jitter..=jitter) * cu,
                (j as f64 + 0.5) * cv + rng.gen_range(-jitter..=jitter) * cv,
            ]);
        }
    }
    LandmarkSet::new(pts).unwrap()
}

pub fn perturb(rng: &mut impl Rng, set: &LandmarkSet, scale: f64) -> LandmarkSet {
    LandmarkSet::new(
        set.points()
            .iter()
            .map(|p| {
                [
                    p[0] + rng.gen_range(-scale..=scale),
                    p[1] + rng.gen_range(-scale..=scale),
                ]
            })
            .collect(),
    )
    .unwrap()
}

/// `r² ln r²` of the L1 radius, written out independently.
fn u_l1(a: [f64; 2], b: [f64; 2]) -> f64 {
    let r = (a[0] - b[0]).abs() + (a[1] - b[1]).abs();
    if r == 0.0 {
        0.0
    } else {
        r * r * (r * r).ln()
    }
}

/// Bordered spline matrix assembled from the kernel definition.
pub fn oracle_matrix(points: &[[f64; 2]], lambda: f64) -> Vec<Vec<f64>> {
    let l = points.len();
    let mut m = vec![vec![0.0; l + 3]; l + 3];
    for i in 0..l {
        for j in 0..l {
            m[i][j] = u_l1(points[i], points[j]);
        }
        m[i][i] += lambda;
        let p = [1.0, points[i][0], points[i][1]];
        for (k, &pk) in p.iter().enumerate() {
            m[i][l + k] = pk;
            m[l + k][i] = pk;
        }
    }
    m
}

/// Solves `A·X = B` by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut aug: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().chain(rb).copied().collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, pivot);
        let d = aug[col][col];
        assert!(d != 0.0, "singular oracle system");
        for v in aug[col].iter_mut() {
            *v /= d;
        }
        for row in 0..n {
            if row != col {
                let f = aug[row][col];
                if f != 0.0 {
                    for k in 0..n + m {
                        aug[row][k] -= f * aug[col][k];
                    }
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Spline through `source → target` evaluated at `q` with the oracle solve.
pub fn oracle_map(source: &[[f64; 2]], target: &[[f64; 2]], q: [f64; 2]) -> [f64; 2] {
    let l = source.len();
    let a = oracle_matrix(source, 0.0);
    let mut rhs = vec![vec![0.0; 2]; l + 3];
    for (r, t) in rhs.iter_mut().zip(target) {
        *r = vec![t[0], t[1]];
    }
    let x = gauss_jordan(&a, &rhs);
    let mut out = [0.0; 2];
    for (axis, o) in out.iter_mut().enumerate() {
        *o = x[l][axis] + x[l + 1][axis] * q[0] + x[l + 2][axis] * q[1];
        for i in 0..l {
            *o += x[i][axis] * u_l1(q, source[i]);
        }
    }
    out
}

/// Largest componentwise deviation of analytic from central-difference
/// gradients, relative to the largest finite-difference component.
pub fn fd_relative_error(
    w: &Warper,
    image: &Image,
    centroid: &Image,
    displacement: &[f64],
    step: f64,
) -> f64 {
    let mut grad = vec![0.0; displacement.len()];
    w.loss_and_grad_displacement(image, centroid, displacement, &mut grad);
    let mut d = displacement.to_vec();
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..d.len() {
        let x = d[i];
        d[i] = x + step;
        let plus = w.loss_displacement(image, centroid, &d);
        d[i] = x - step;
        let minus = w.loss_displacement(image, centroid, &d);
        d[i] = x;
        let fd = (plus - minus) / (2.0 * step);
        worst = worst.max((fd - grad[i]).abs());
        scale = scale.max(fd.abs());
    }
    worst / scale.max(1e-12)
}

/// Smallest distance from any sampling position to a bilinear cell edge,
/// over all pixels, for a displacement and the positions it could reach
/// within `step`.
pub fn min_cell_margin(w: &Warper, displacement: &[f64]) -> f64 {
    w.sample_positions(displacement)
        .iter()
        .flat_map(|p| p.iter().map(|x| (x - x.round()).abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Best matched count over all bijections, by enumeration.
pub fn brute_force_matched(labels: &[usize], assignments: &[usize], k: usize) -> usize {
    let mut table = vec![vec![0usize; k]; k];
    for (&l, &a) in labels.iter().zip(assignments) {
        table[a][l] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        best = best.max(p.iter().enumerate().map(|(c, &l)| table[c][l]).sum());
    });
    best
}

fn permute(p: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
    if i == p.len() {
        f(p);
        return;
    }
    for j in i..p.len() {
        p.swap(i, j);
        permute(p, i + 1, f);
        p.swap(i, j);
    }
}

/// `Σ ‖t_i − μ‖²`.
pub fn cluster_objective(members: &[Image], mu: &[f64]) -> f64 {
    members
        .iter()
        .map(|t| {
            t.pixels()
                .iter()
                .zip(mu)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// Projected gradient descent of [`cluster_objective`] on the unit sphere
/// from a random start.
pub fn projected_gradient(members: &[Image], rng: &mut impl Rng, steps: usize) -> f64 {
    let dim = members[0].len();
    let unit = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut mu: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    unit(&mut mu);
    let rate = 0.5 / members.len() as f64;
    for _ in 0..steps {
        let mut g = vec![0.0; dim];
        for t in members {
            for (gi, (m, x)) in g.iter_mut().zip(mu.iter().zip(t.pixels())) {
                *gi += 2.0 * (m - x);
            }
        }
        for (m, gi) in mu.iter_mut().zip(&g) {
            *m -= rate * gi;
        }
        unit(&mut mu);
    }
    cluster_objective(members, &mu)
}

//! Lloyd iteration with warp-fitted distances.
//!
//! Every (sample, centroid) pair owns a [`WarpFit`] that persists across
//! epochs. Each assignment pass warm-starts all fits from where they stopped,
//! refines them for a small step budget against the current centroids, and
//! assigns each sample to its closest centroid. The centroid update is the
//! unit-norm projection of the mean of the members' warped images.
//!
//! Because fitting keeps its best iterate, the argmin can only lower a
//! sample's distance, and the normalized warped mean is the exact
//! constrained minimizer of the within-cluster residual, the recorded
//! distortion is non-increasing from epoch to epoch.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optimizer::{FitConfig, PreparedImage, WarpFit};
use crate::similarity::{distance, warped_representation, MetricKind};
use crate::tps::{KernelNorm, SystemCache};
use crate::warp::{Image, Warper};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: MetricKind,
    pub k: usize,
    pub landmarks: usize,
    pub fit: FitConfig,
    pub max_epochs: usize,
    /// Refresh fits over shuffled chunks of this many samples. `None`
    /// processes the whole set as one batch. Chunking only changes the order
    /// in which fits are refreshed, never their values.
    pub batch_size: Option<usize>,
    /// Training stops once the fraction of samples changing cluster drops
    /// below this.
    pub change_tolerance: f64,
    pub regularization: f64,
    pub kernel_norm: KernelNorm,
    pub parallel: bool,
    /// Fit refresh rounds per test pair in [`Clusterer::assign_test`].
    pub test_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: MetricKind::DeformationInvariant,
            k: 10,
            landmarks: 16,
            fit: FitConfig::default(),
            max_epochs: 150,
            batch_size: None,
            change_tolerance: 1e-3,
            regularization: 0.0,
            kernel_norm: KernelNorm::L1,
            parallel: true,
            test_rounds: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterState {
    pub centroids: Vec<Image>,
    pub assignments: Vec<usize>,
    /// Most recent distances, `N × K` row-major. `NaN` marks pairs whose
    /// fit was reset and has not been evaluated since.
    pub distances: Vec<f64>,
    /// Warp fits, `N × K` row-major.
    pub fits: Vec<WarpFit>,
    pub epoch: usize,
    pub distortion_history: Vec<f64>,
    /// Fraction of samples that changed cluster at each epoch.
    pub change_history: Vec<f64>,
    /// Indices of the K-means++ seeds.
    pub seed_indices: Vec<usize>,
    /// System inversions performed to build this state's warper.
    pub factorizations: usize,
}

impl ClusterState {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn n(&self) -> usize {
        self.assignments.len()
    }

    pub fn distance(&self, i: usize, k: usize) -> f64 {
        self.distances[i * self.k() + k]
    }

    pub fn fit(&self, i: usize, k: usize) -> &WarpFit {
        &self.fits[i * self.k() + k]
    }

    /// Sum of cached distances of every sample to its assigned centroid.
    pub fn distortion(&self) -> f64 {
        self.assignments
            .iter()
            .enumerate()
            .map(|(i, &a)| self.distance(i, a))
            .sum()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Outcome of assigning held-out samples to fixed centroids.
#[derive(Debug, Clone)]
pub struct TestAssignment {
    pub assignments: Vec<usize>,
    /// `N × K` row-major.
    pub distances: Vec<f64>,
    pub fits: Vec<WarpFit>,
}

/// K-means++ seeding under the Euclidean distance. Returns the indices of
/// the chosen samples.
pub fn kmeanspp_init(images: &[Image], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = images.len();
    if k == 0 {
        return Err(Error::InvalidValue("K must be positive".into()));
    }
    if n < k {
        return Err(Error::InsufficientData {
            needed: k,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = images
        .iter()
        .map(|x| x.squared_distance(&images[chosen[0]]))
        .collect();
    d2[chosen[0]] = 0.0;
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(&mut rng),
            // Every remaining point coincides with a seed.
            Err(_) => {
                let rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                rest[rng.gen_range(0..rest.len())]
            }
        };
        chosen.push(next);
        for (i, x) in images.iter().enumerate() {
            d2[i] = d2[i].min(x.squared_distance(&images[next]));
        }
        for &c in &chosen {
            d2[c] = 0.0;
        }
    }
    Ok(chosen)
}

fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &d) in row.iter().enumerate().skip(1) {
        if d < row[best] || row[best].is_nan() {
            best = k;
        }
    }
    best
}

/// Training and inference for one configuration and image shape.
#[derive(Debug)]
pub struct Clusterer {
    config: TrainConfig,
    warper: Warper,
    factorizations: usize,
}

impl Clusterer {
    pub fn new(config: TrainConfig, height: usize, width: usize) -> Result<Self> {
        Self::with_cache(config, height, width, &SystemCache::new())
    }

    /// Like [`Clusterer::new`], reusing systems already held by `cache`.
    pub fn with_cache(
        config: TrainConfig,
        height: usize,
        width: usize,
        cache: &SystemCache,
    ) -> Result<Self> {
        if config.fit.blur_sigma.is_nan() || config.fit.blur_sigma <= 0.0 {
            return Err(Error::InvalidValue("blur sigma must be positive".into()));
        }
        let before = cache.factorizations();
        let system = cache.grid_system(
            height,
            width,
            config.landmarks,
            config.regularization,
            config.kernel_norm,
        )?;
        let factorizations = cache.factorizations() - before;
        Ok(Self {
            warper: Warper::new(system, height, width),
            config,
            factorizations,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn warper(&self) -> &Warper {
        &self.warper
    }

    fn check_images(&self, images: &[Image]) -> Result<()> {
        let shape = self.warper.shape();
        for img in images {
            if img.shape() != shape {
                return Err(Error::mismatch(
                    format!("{}x{} images", shape.0, shape.1),
                    format!("{}x{}", img.height(), img.width()),
                ));
            }
        }
        Ok(())
    }

    /// K-means++ seeds and fresh fits; no distances evaluated yet.
    pub fn init_state(&self, images: &[Image], seed: u64) -> Result<ClusterState> {
        self.check_images(images)?;
        let k = self.config.k;
        let seeds = kmeanspp_init(images, k, seed)?;
        let n = images.len();
        Ok(ClusterState {
            centroids: seeds.iter().map(|&i| images[i].normalized()).collect(),
            assignments: vec![0; n],
            distances: vec![f64::NAN; n * k],
            fits: vec![WarpFit::identity(); n * k],
            epoch: 0,
            distortion_history: Vec::new(),
            change_history: Vec::new(),
            seed_indices: seeds,
            factorizations: self.factorizations,
        })
    }

    /// Refreshes every fit against the current centroids and reassigns each
    /// sample to its closest centroid. Returns how many samples changed
    /// cluster.
    pub fn assign(&self, state: &mut ClusterState, images: &[Image], round: u64) -> Result<usize> {
        self.check_images(images)?;
        let k = state.k();
        let sigma = self.config.fit.blur_sigma;
        let centroids: Vec<PreparedImage> = state
            .centroids
            .iter()
            .map(|c| PreparedImage::new(c, sigma))
            .collect();
        let kind = self.config.kind;
        let warper = &self.warper;
        let fit_cfg = &self.config.fit;

        let refresh = |(i, fits, dists): (usize, &mut [WarpFit], &mut [f64])| -> Result<()> {
            let image = PreparedImage::new(&images[i], sigma);
            for (kk, centroid) in centroids.iter().enumerate() {
                dists[kk] = distance(kind, warper, &image, centroid, &mut fits[kk], fit_cfg)?;
            }
            Ok(())
        };

        let mut rows: Vec<(usize, &mut [WarpFit], &mut [f64])> = state
            .fits
            .chunks_mut(k)
            .zip(state.distances.chunks_mut(k))
            .enumerate()
            .map(|(i, (f, d))| (i, f, d))
            .collect();
        let n = rows.len();
        let batch = match self.config.batch_size {
            Some(b) if b > 0 && b < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(round);
                rows.shuffle(&mut rng);
                b
            }
            _ => n.max(1),
        };
        for chunk in rows.chunks_mut(batch) {
            if self.config.parallel {
                chunk
                    .par_iter_mut()
                    .try_for_each(|(i, f, d)| refresh((*i, &mut **f, &mut **d)))?;
            } else {
                chunk
                    .iter_mut()
                    .try_for_each(|(i, f, d)| refresh((*i, &mut **f, &mut **d)))?;
            }
        }

        let mut changed = 0;
        for i in 0..n {
            let best = argmin(&state.distances[i * k..(i + 1) * k]);
            if best != state.assignments[i] {
                changed += 1;
            }
            state.assignments[i] = best;
        }
        Ok(changed)
    }

    /// Sets each centroid to the normalized mean of its members' warped
    /// images. An empty cluster is reseeded with the sample farthest from
    /// its own centroid, and its fits are reset.
    pub fn update_centroids(&self, state: &mut ClusterState, images: &[Image]) {
        let k = state.k();
        let n = state.n();
        let kind = self.config.kind;
        let warper = &self.warper;
        let render = |i: usize| {
            warped_representation(
                kind,
                warper,
                &images[i],
                &state.fits[i * k + state.assignments[i]],
            )
        };
        let warped: Vec<Image> = if self.config.parallel {
            (0..n).into_par_iter().map(render).collect()
        } else {
            (0..n).map(render).collect()
        };

        let (h, w) = warper.shape();
        let mut sums = vec![Image::zeros(h, w); k];
        let mut counts = vec![0usize; k];
        for (i, img) in warped.iter().enumerate() {
            let a = state.assignments[i];
            counts[a] += 1;
            for (s, p) in sums[a].pixels_mut().iter_mut().zip(img.pixels()) {
                *s += p;
            }
        }

        let mut by_distance: Vec<usize> = (0..n).collect();
        by_distance.sort_by(|&a, &b| {
            let da = state.distance(a, state.assignments[a]);
            let db = state.distance(b, state.assignments[b]);
            db.total_cmp(&da).then(a.cmp(&b))
        });
        let mut donors = by_distance.into_iter();

        for kk in 0..k {
            if counts[kk] > 0 {
                let inv = 1.0 / counts[kk] as f64;
                let mut mean = std::mem::replace(&mut sums[kk], Image::zeros(h, w));
                mean.pixels_mut().iter_mut().for_each(|p| *p *= inv);
                mean.normalize();
                state.centroids[kk] = mean;
            } else if let Some(donor) = donors.next() {
                log::debug!("cluster {kk} empty; reseeding from sample {donor}");
                state.centroids[kk] = images[donor].normalized();
                for i in 0..n {
                    state.fits[i * k + kk] = WarpFit::identity();
                    state.distances[i * k + kk] = f64::NAN;
                }
            }
        }
    }

    /// Seeds with K-means++, then alternates centroid updates and
    /// assignment passes until `max_epochs` or until fewer than
    /// `change_tolerance` of the samples change cluster.
    pub fn train(&self, images: &[Image], seed: u64) -> Result<ClusterState> {
        self.train_with(images, seed, |_| {})
    }

    /// [`Clusterer::train`], calling `on_epoch` after the initial assignment
    /// and after every epoch.
    pub fn train_with(
        &self,
        images: &[Image],
        seed: u64,
        mut on_epoch: impl FnMut(&ClusterState),
    ) -> Result<ClusterState> {
        let mut state = self.init_state(images, seed)?;
        let n = images.len() as f64;
        self.assign(&mut state, images, seed)?;
        state.distortion_history.push(state.distortion());
        state.change_history.push(1.0);
        on_epoch(&state);
        for epoch in 1..=self.config.max_epochs {
            self.update_centroids(&mut state, images);
            let round = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(epoch as u64);
            let changed = self.assign(&mut state, images, round)?;
            state.epoch = epoch;
            let fraction = changed as f64 / n;
            state.distortion_history.push(state.distortion());
            state.change_history.push(fraction);
            log::info!(
                "epoch {epoch}: distortion {:.6}, changed {changed}",
                state.distortion()
            );
            on_epoch(&state);
            if fraction < self.config.change_tolerance {
                break;
            }
        }
        Ok(state)
    }

    /// Assigns `images` to fixed `centroids` with freshly fitted warps.
    pub fn assign_test(&self, centroids: &[Image], images: &[Image]) -> Result<TestAssignment> {
        self.check_images(images)?;
        self.check_images(centroids)?;
        let k = centroids.len();
        if k == 0 {
            return Err(Error::EmptyInput("centroids"));
        }
        let sigma = self.config.fit.blur_sigma;
        let prepared: Vec<PreparedImage> = centroids
            .iter()
            .map(|c| PreparedImage::new(c, sigma))
            .collect();
        let rounds = self.config.test_rounds.max(1);
        let kind = self.config.kind;
        let one = |img: &Image| -> Result<(Vec<f64>, Vec<WarpFit>)> {
            let pi = PreparedImage::new(img, sigma);
            let mut fits = vec![WarpFit::identity(); k];
            let mut dists = vec![0.0; k];
            for (kk, c) in prepared.iter().enumerate() {
                let r = if kind == MetricKind::Euclidean {
                    1
                } else {
                    rounds
                };
                for _ in 0..r {
                    dists[kk] =
                        distance(kind, &self.warper, &pi, c, &mut fits[kk], &self.config.fit)?;
                }
            }
            Ok((dists, fits))
        };
        let rows: Vec<(Vec<f64>, Vec<WarpFit>)> = if self.config.parallel {
            images.par_iter().map(one).collect::<Result<_>>()?
        } else {
            images.iter().map(one).collect::<Result<_>>()?
        };
        let mut out = TestAssignment {
            assignments: Vec::with_capacity(images.len()),
            distances: Vec::with_capacity(images.len() * k),
            fits: Vec::with_capacity(images.len() * k),
        };
        for (d, f) in rows {
            out.assignments.push(argmin(&d));
            out.distances.extend(d);
            out.fits.extend(f);
        }
        Ok(out)
    }
}

/// Trains with a fresh system cache.
pub fn train(images: &[Image], config: &TrainConfig, seed: u64) -> Result<ClusterState> {
    let first = images.first().ok_or(Error::InsufficientData {
        needed: config.k.max(1),
        available: 0,
    })?;
    let clusterer = Clusterer::new(config.clone(), first.height(), first.width())?;
    clusterer.train(images, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noisy_groups(
        prototypes: &[Image],
        per: usize,
        noise: f64,
        seed: u64,
    ) -> (Vec<Image>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..per {
            for (c, p) in prototypes.iter().enumerate() {
                let mut x = p.clone();
                x.pixels_mut()
                    .iter_mut()
                    .for_each(|v| *v += noise * (rng.gen::<f64>() - 0.5));
                images.push(x.normalized());
                labels.push(c);
            }
        }
        (images, labels)
    }

    fn prototypes(k: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| Image::from_fn(8, 8, |_, _| rng.gen::<f64>()).normalized())
            .collect()
    }

    #[test]
    fn kmeanspp_selects_everything_when_k_equals_n() {
        let images = prototypes(6, 1);
        let mut idx = kmeanspp_init(&images, 6, 3).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn kmeanspp_splits_duplicated_groups() {
        let a = Image::from_fn(4, 4, |r, _| if r < 2 { 1.0 } else { 0.0 }).normalized();
        let b = Image::from_fn(4, 4, |r, _| if r >= 2 { 1.0 } else { 0.0 }).normalized();
        let images = vec![a.clone(), a.clone(), a, b.clone(), b.clone(), b];
        for seed in 0..50 {
            let idx = kmeanspp_init(&images, 2, seed).unwrap();
            assert_ne!(idx[0] < 3, idx[1] < 3, "seed {seed}");
        }
    }

    #[test]
    fn kmeanspp_is_deterministic_and_checks_size() {
        let images = prototypes(10, 2);
        assert_eq!(
            kmeanspp_init(&images, 4, 9).unwrap(),
            kmeanspp_init(&images, 4, 9).unwrap()
        );
        assert!(matches!(
            kmeanspp_init(&images, 11, 0),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn euclidean_training_recovers_groups() {
        let protos = prototypes(3, 5);
        let (images, labels) = noisy_groups(&protos, 8, 0.05, 6);
        let config = TrainConfig {
            kind: MetricKind::Euclidean,
            k: 3,
            landmarks: 9,
            ..TrainConfig::default()
        };
        let state = train(&images, &config, 4).unwrap();
        assert!(state.epoch <= 3, "took {} epochs", state.epoch);
        for c in 0..3 {
            let members: Vec<usize> = (0..images.len()).filter(|&i| labels[i] == c).collect();
            let a = state.assignments[members[0]];
            assert!(members.iter().all(|&i| state.assignments[i] == a));
        }
        for c in &state.centroids {
            assert!((c.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_epochs_keeps_the_seeds() {
        let protos = prototypes(3, 7);
        let (images, _) = noisy_groups(&protos, 4, 0.05, 8);
        let config = TrainConfig {
            kind: MetricKind::Euclidean,
            k: 3,
            landmarks: 9,
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let state = train(&images, &config, 1).unwrap();
        for (c, &i) in state.centroids.iter().zip(&state.seed_indices) {
            assert_eq!(*c, images[i].normalized());
        }
        assert_eq!(state.distortion_history.len(), 1);
    }

    #[test]
    fn single_cluster_assigns_everything_to_zero() {
        let protos = prototypes(2, 9);
        let (images, _) = noisy_groups(&protos, 3, 0.1, 10);
        let config = TrainConfig {
            kind: MetricKind::DeformationInvariant,
            k: 1,
            landmarks: 9,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let state = train(&images, &config, 2).unwrap();
        assert!(state.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn dataset_equal_to_centroids_assigns_to_itself() {
        let images = prototypes(4, 12);
        let config = TrainConfig {
            kind: MetricKind::DeformationInvariant,
            k: 4,
            landmarks: 9,
            ..TrainConfig::default()
        };
        let clusterer = Clusterer::new(config, 8, 8).unwrap();
        let mut state = clusterer.init_state(&images, 0).unwrap();
        state.centroids = images.clone();
        clusterer.assign(&mut state, &images, 0).unwrap();
        assert_eq!(state.assignments, vec![0, 1, 2, 3]);
        for i in 0..4 {
            assert_eq!(state.distance(i, i), 0.0);
        }
        assert_eq!(state.distortion(), 0.0);
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let images = prototypes(5, 13);
        let config = TrainConfig {
            kind: MetricKind::Euclidean,
            k: 2,
            landmarks: 9,
            ..TrainConfig::default()
        };
        let clusterer = Clusterer::new(config, 8, 8).unwrap();
        let mut state = clusterer.init_state(&images, 0).unwrap();
        clusterer.assign(&mut state, &images, 0).unwrap();
        state.assignments = vec![0; 5];
        clusterer.update_centroids(&mut state, &images);
        let far = (0..5)
            .max_by(|&a, &b| {
                state
                    .distance(a, 0)
                    .total_cmp(&state.distance(b, 0))
                    .then(b.cmp(&a))
            })
            .unwrap();
        assert_eq!(state.centroids[1], images[far].normalized());
        assert!((0..5).all(|i| state.distance(i, 1).is_nan()));
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let protos = prototypes(3, 14);
        let (images, _) = noisy_groups(&protos, 4, 0.3, 15);
        let mut config = TrainConfig {
            kind: MetricKind::DeformationInvariant,
            k: 3,
            landmarks: 9,
            max_epochs: 3,
            batch_size: Some(5),
            ..TrainConfig::default()
        };
        let a = train(&images, &config, 3).unwrap();
        config.parallel = false;
        config.batch_size = None;
        let b = train(&images, &config, 3).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.distortion_history, b.distortion_history);
        assert_eq!(a.centroids, b.centroids);
    }
}

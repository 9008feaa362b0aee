//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dikm_core::datasets::{
    base_exemplars, gen_affine_mnist, gen_diffeo_mnist, AffineRanges, Split,
};
use dikm_core::{
    clustering_accuracy, crossval_select, warped_representation, ClusterState, Clusterer, Image,
    LabeledDataset, LandmarkSet, SweepRun, SystemCache, WarpFit,
};

use crate::checkpoint::{Checkpoint, LandmarkCache};
use crate::config::RunConfig;
use crate::source::{save_split, DataSource};
use crate::NumericalFailure;

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.dikm";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenKind {
    Affine,
    Diffeo,
}

#[derive(Debug, Clone)]
pub struct GenOptions {
    pub kind: GenKind,
    pub per_class: usize,
    pub seed: u64,
    pub sigma: f64,
    pub base: DataSource,
    pub out: PathBuf,
}

pub fn gen(opts: &GenOptions) -> Result<()> {
    let base = opts.base.load(Split::Train)?;
    let exemplars = base_exemplars(&base)?;
    let ranges = AffineRanges::default();
    let split = match opts.kind {
        GenKind::Affine => gen_affine_mnist(&exemplars, opts.per_class, &ranges, opts.seed)?,
        GenKind::Diffeo => {
            gen_diffeo_mnist(&exemplars, opts.per_class, &ranges, opts.sigma, opts.seed)?
        }
    };
    fs::create_dir_all(&opts.out)?;
    save_split(&opts.out, &split.train, Split::Train)?;
    save_split(&opts.out, &split.test, Split::Test)?;
    let mut prov = String::new();
    let kind = match opts.kind {
        GenKind::Affine => "affine",
        GenKind::Diffeo => "diffeo",
    };
    writeln!(prov, "kind = {kind}")?;
    writeln!(prov, "seed = {}", opts.seed)?;
    writeln!(prov, "per_class = {}", opts.per_class)?;
    if opts.kind == GenKind::Diffeo {
        writeln!(prov, "sigma = {:?}", opts.sigma)?;
    }
    writeln!(prov, "rotation_deg = {:?}", ranges.rotation_deg)?;
    writeln!(prov, "scale = {:?}..{:?}", ranges.scale.0, ranges.scale.1)?;
    writeln!(prov, "shear = {:?}", ranges.shear)?;
    writeln!(prov, "shift = {:?}", ranges.shift)?;
    writeln!(prov, "base = {}", opts.base)?;
    writeln!(prov, "train = {}", split.train.len())?;
    writeln!(prov, "test = {}", split.test.len())?;
    fs::write(opts.out.join("provenance.txt"), prov)?;
    log::info!(
        "wrote {} train / {} test samples to {}",
        split.train.len(),
        split.test.len(),
        opts.out.display()
    );
    Ok(())
}

fn load_data(cfg: &RunConfig, source: &str, split: Split) -> Result<LabeledDataset> {
    let ds = source.parse::<DataSource>()?.load(split)?;
    match cfg.per_class {
        Some(p) => Ok(ds.stratified(p, 0)?),
        None => Ok(ds),
    }
}

fn train_source(cfg: &RunConfig) -> Result<&str> {
    cfg.data
        .as_deref()
        .context("no dataset given (--data or `data = ...`)")
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)
        .with_context(|| format!("creating output directory {}", cfg.out.display()))?;
    fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

fn shape_of(ds: &LabeledDataset) -> Result<(usize, usize)> {
    ds.shape().context("dataset is empty")
}

pub fn checkpoint_of(clusterer: &Clusterer, state: &ClusterState) -> Checkpoint {
    let warper = clusterer.warper();
    let (height, width) = warper.shape();
    let k = state.k();
    let mut targets = Vec::with_capacity(state.n() * 2 * warper.landmarks());
    for (i, &a) in state.assignments.iter().enumerate() {
        targets.extend(state.fits[i * k + a].target(warper).to_interleaved());
    }
    Checkpoint {
        metric: clusterer.config().kind,
        landmarks: warper.landmarks(),
        height,
        width,
        centroids: state.centroids.clone(),
        cache: Some(LandmarkCache {
            assignments: state.assignments.iter().map(|&a| a as u32).collect(),
            targets,
        }),
    }
}

fn check_finite(state: &ClusterState) -> Result<()> {
    let d = state.distortion();
    if !d.is_finite() {
        return Err(NumericalFailure(format!("distortion is {d}")).into());
    }
    Ok(())
}

/// Outcome of one seeded training run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub epochs: usize,
    pub distortion: f64,
    pub accuracy: Option<f64>,
}

pub fn train(
    cfg: &RunConfig,
    runs: usize,
    test: Option<&str>,
    parallel: bool,
) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    if runs == 0 {
        bail!("--runs must be at least 1");
    }
    let data = load_data(cfg, train_source(cfg)?, Split::Train)?;
    let test_data = test.map(|t| load_data(cfg, t, Split::Test)).transpose()?;
    let (h, w) = shape_of(&data)?;
    prepare_out(cfg)?;

    let cache = SystemCache::new();
    let clusterer = Clusterer::with_cache(cfg.train_config(parallel), h, w, &cache)?;
    let mut history = csv::Writer::from_path(cfg.out.join("history.csv"))?;
    history.write_record([
        "run",
        "seed",
        "epoch",
        "distortion",
        "change_fraction",
        "wall_time_s",
    ])?;

    let base_seed = cfg.seed.unwrap_or(0);
    let mut summaries = Vec::with_capacity(runs);
    let mut best: Option<(f64, Checkpoint)> = None;
    for run in 0..runs {
        let seed = base_seed.wrapping_add(run as u64);
        let start = Instant::now();
        let mut rows = Vec::new();
        let state = clusterer.train_with(&data.images, seed, |s| {
            rows.push([
                run.to_string(),
                seed.to_string(),
                s.epoch.to_string(),
                format!("{:?}", s.distortion()),
                format!("{:?}", s.change_history.last().copied().unwrap_or(1.0)),
                format!("{:.3}", start.elapsed().as_secs_f64()),
            ]);
        })?;
        for r in rows {
            history.write_record(&r)?;
        }
        history.flush()?;
        check_finite(&state)?;

        let accuracy = match &test_data {
            Some(t) => {
                let out = clusterer.assign_test(&state.centroids, &t.images)?;
                Some(clustering_accuracy(&t.labels, &out.assignments, cfg.k)?.accuracy)
            }
            None => None,
        };
        let ck = checkpoint_of(&clusterer, &state);
        if runs > 1 {
            ck.save(&cfg.out.join(format!("run_{run}.dikm")))?;
        }
        let distortion = state.distortion();
        log::info!(
            "run {run} (seed {seed}): {} epochs, distortion {distortion:.6}{}",
            state.epoch,
            accuracy
                .map(|a| format!(", test accuracy {a:.4}"))
                .unwrap_or_default()
        );
        if best.as_ref().map_or(true, |(d, _)| distortion < *d) {
            best = Some((distortion, ck));
        }
        summaries.push(RunSummary {
            run,
            seed,
            epochs: state.epoch,
            distortion,
            accuracy,
        });
    }
    let (_, ck) = best.expect("at least one run");
    ck.save(&cfg.out.join(CHECKPOINT_FILE))?;
    write_runs(cfg, &summaries)?;
    log::info!("system factorizations: {}", cache.factorizations());
    Ok(summaries)
}

fn write_runs(cfg: &RunConfig, runs: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(cfg.out.join("runs.csv"))?;
    w.write_record([
        "run_id",
        "seed",
        "metric",
        "landmarks",
        "learning_rate",
        "epochs",
        "distortion",
        "accuracy",
    ])?;
    for r in runs {
        w.write_record([
            r.run.to_string(),
            r.seed.to_string(),
            cfg.metric.name().to_string(),
            cfg.landmarks.to_string(),
            format!("{:?}", cfg.learning_rate),
            r.epochs.to_string(),
            format!("{:?}", r.distortion),
            r.accuracy.map(|a| format!("{a:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut report = String::new();
    writeln!(
        report,
        "{:>4} {:>20} {:>7} {:>14} {:>9}",
        "run", "seed", "epochs", "distortion", "accuracy"
    )?;
    for r in runs {
        writeln!(
            report,
            "{:>4} {:>20} {:>7} {:>14.6} {:>9}",
            r.run,
            r.seed,
            r.epochs,
            r.distortion,
            r.accuracy
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "-".into())
        )?;
    }
    let selected = runs
        .iter()
        .min_by(|a, b| a.distortion.total_cmp(&b.distortion))
        .expect("non-empty");
    writeln!(report, "selected (min distortion): run {}", selected.run)?;
    if let Some(acc) = selected.accuracy {
        writeln!(report, "selected accuracy: {acc:.4}")?;
    }
    if let Some(best) = runs.iter().filter_map(|r| r.accuracy).reduce(f64::max) {
        writeln!(report, "best-of-{} accuracy: {best:.4}", runs.len())?;
        let mean = runs.iter().filter_map(|r| r.accuracy).sum::<f64>() / runs.len() as f64;
        writeln!(report, "mean accuracy: {mean:.4}")?;
    }
    print!("{report}");
    fs::write(cfg.out.join("report.txt"), report)?;
    Ok(())
}

/// Overrides metric, K and landmark count with the checkpoint's.
fn adopt_checkpoint(cfg: &mut RunConfig, ck: &Checkpoint) {
    if cfg.metric != ck.metric {
        log::warn!(
            "metric {} from the checkpoint overrides {}",
            ck.metric.name(),
            cfg.metric.name()
        );
    }
    cfg.metric = ck.metric;
    cfg.k = ck.k();
    cfg.landmarks = ck.landmarks;
}

fn clusterer_for(cfg: &RunConfig, ck: &Checkpoint, parallel: bool) -> Result<Clusterer> {
    Ok(Clusterer::new(
        cfg.train_config(parallel),
        ck.height,
        ck.width,
    )?)
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    source: &str,
    split: Split,
    parallel: bool,
) -> Result<f64> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = cfg.clone();
    adopt_checkpoint(&mut cfg, &ck);
    let data = load_data(&cfg, source, split)?;
    prepare_out(&cfg)?;
    let clusterer = clusterer_for(&cfg, &ck, parallel)?;
    let out = clusterer.assign_test(&ck.centroids, &data.images)?;
    let report = clustering_accuracy(&data.labels, &out.assignments, ck.k())?;

    let mut w = csv::Writer::from_path(cfg.out.join("accuracy.csv"))?;
    w.write_record(["metric", "n", "matched", "accuracy"])?;
    w.write_record([
        cfg.metric.name().to_string(),
        data.len().to_string(),
        report.matched.to_string(),
        format!("{:?}", report.accuracy),
    ])?;
    w.flush()?;

    let mut w = csv::Writer::from_path(cfg.out.join("mapping.csv"))?;
    w.write_record(["cluster", "label", "size"])?;
    for (c, &l) in report.mapping.iter().enumerate() {
        w.write_record([
            c.to_string(),
            l.to_string(),
            report.per_cluster_sizes[c].to_string(),
        ])?;
    }
    w.flush()?;

    let k = ck.k();
    let mut w = csv::Writer::from_path(cfg.out.join("assignments.csv"))?;
    w.write_record(["index", "label", "cluster", "distance"])?;
    for (i, (&a, &l)) in out.assignments.iter().zip(&data.labels).enumerate() {
        w.write_record([
            i.to_string(),
            l.to_string(),
            a.to_string(),
            format!("{:?}", out.distances[i * k + a]),
        ])?;
    }
    w.flush()?;
    println!(
        "accuracy {:.4} ({}/{}) metric {}",
        report.accuracy,
        report.matched,
        data.len(),
        cfg.metric.name()
    );
    Ok(report.accuracy)
}

/// Centroids side by side on a square-ish grid with a one-pixel black
/// gutter, each rescaled so its own minimum maps to 0 and maximum to 255.
/// A constant centroid renders as mid gray.
pub fn centroid_grid(centroids: &[Image]) -> image::GrayImage {
    let k = centroids.len().max(1);
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let (h, w) = centroids.first().map(|c| c.shape()).unwrap_or((0, 0));
    let mut out = image::GrayImage::new(
        (cols * (w + 1) - 1).max(1) as u32,
        (rows * (h + 1) - 1).max(1) as u32,
    );
    for (n, c) in centroids.iter().enumerate() {
        let (lo, hi) = c
            .pixels()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            });
        let (r0, c0) = ((n / cols) * (h + 1), (n % cols) * (w + 1));
        for r in 0..h {
            for col in 0..w {
                let v = if hi > lo {
                    ((c.get(r, col) - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    128
                };
                out.put_pixel((c0 + col) as u32, (r0 + r) as u32, image::Luma([v]));
            }
        }
    }
    out
}

pub fn export(
    cfg: &RunConfig,
    checkpoint: &Path,
    source: &str,
    split: Split,
    parallel: bool,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = cfg.clone();
    adopt_checkpoint(&mut cfg, &ck);
    let data = load_data(&cfg, source, split)?;
    prepare_out(&cfg)?;
    centroid_grid(&ck.centroids).save(cfg.out.join("centroids.png"))?;

    let clusterer = clusterer_for(&cfg, &ck, parallel)?;
    let warper = clusterer.warper();
    let cached = ck
        .cache
        .as_ref()
        .filter(|c| c.assignments.len() == data.len());
    let fits: Vec<WarpFit> = match cached {
        Some(cache) => {
            let per = 2 * ck.landmarks;
            cache
                .targets
                .chunks_exact(per)
                .map(|t| WarpFit::from_target(warper, &LandmarkSet::from_interleaved(t)?))
                .collect::<dikm_core::Result<_>>()?
        }
        None => {
            let out = clusterer.assign_test(&ck.centroids, &data.images)?;
            let k = ck.k();
            out.assignments
                .iter()
                .enumerate()
                .map(|(i, &a)| out.fits[i * k + a].clone())
                .collect()
        }
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(cfg.out.join("warped.csv"))?;
    for (img, fit) in data.images.iter().zip(&fits) {
        let warped = warped_representation(ck.metric, warper, img, fit);
        w.write_record(warped.pixels().iter().map(|p| format!("{p:?}")))?;
    }
    w.flush()?;
    println!(
        "exported {} centroids and {} warped samples to {}",
        ck.k(),
        data.len(),
        cfg.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub landmarks: usize,
    pub learning_rate: f64,
}

pub fn sweep(
    cfg: &RunConfig,
    landmark_grid: &[usize],
    lr_grid: &[f64],
    test: Option<&str>,
    parallel: bool,
) -> Result<Vec<SweepRun<Cell>>> {
    if landmark_grid.is_empty() || lr_grid.is_empty() {
        bail!("sweep grids must be non-empty");
    }
    let data = load_data(cfg, train_source(cfg)?, Split::Train)?;
    let test_data = test.map(|t| load_data(cfg, t, Split::Test)).transpose()?;
    let (h, w) = shape_of(&data)?;
    prepare_out(cfg)?;
    let cache = SystemCache::new();
    let seed = cfg.seed.unwrap_or(0);
    let mut runs = Vec::new();
    for &landmarks in landmark_grid {
        for &learning_rate in lr_grid {
            let cell = RunConfig {
                landmarks,
                learning_rate,
                ..cfg.clone()
            };
            cell.validate()?;
            let clusterer = Clusterer::with_cache(cell.train_config(parallel), h, w, &cache)?;
            let state = clusterer.train(&data.images, seed)?;
            check_finite(&state)?;
            let accuracy = match &test_data {
                Some(t) => {
                    let out = clusterer.assign_test(&state.centroids, &t.images)?;
                    Some(clustering_accuracy(&t.labels, &out.assignments, cfg.k)?.accuracy)
                }
                None => None,
            };
            log::info!(
                "cell landmarks={landmarks} lr={learning_rate}: distortion {:.6}",
                state.distortion()
            );
            runs.push(SweepRun {
                params: Cell {
                    landmarks,
                    learning_rate,
                },
                distortion: state.distortion(),
                accuracy,
            });
        }
    }
    let mut w = csv::Writer::from_path(cfg.out.join("sweep.csv"))?;
    w.write_record([
        "run_id",
        "landmarks",
        "learning_rate",
        "distortion",
        "accuracy",
    ])?;
    for (i, r) in runs.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.params.landmarks.to_string(),
            format!("{:?}", r.params.learning_rate),
            format!("{:?}", r.distortion),
            r.accuracy.map(|a| format!("{a:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let selected = crossval_select(&runs)?;
    let chosen = RunConfig {
        landmarks: selected.params.landmarks,
        learning_rate: selected.params.learning_rate,
        ..cfg.clone()
    };
    fs::write(cfg.out.join("selected.txt"), chosen.to_text())?;
    println!(
        "selected landmarks={} learning_rate={} (distortion {:.6}{})",
        selected.params.landmarks,
        selected.params.learning_rate,
        selected.distortion,
        selected
            .accuracy
            .map(|a| format!(", accuracy {a:.4}"))
            .unwrap_or_default()
    );
    Ok(runs)
}

//! Dataset source descriptors.
//!
//! * `idx:IMAGES,LABELS` - an IDX image/label pair.
//! * `png:ROOT` or `png:ROOT@HxW` - a directory per class, optionally resized.
//! * any other string - a directory written by `dikm gen`, holding
//!   `train-*` and `test-*` IDX pairs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use dikm_core::datasets::{load_idx, load_png_dir, save_idx, Split};
use dikm_core::LabeledDataset;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Png {
        root: PathBuf,
        resize: Option<(usize, usize)>,
    },
    Dir(PathBuf),
}

impl FromStr for DataSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("idx:") {
            let (images, labels) = rest
                .split_once(',')
                .context("idx source needs `idx:IMAGES,LABELS`")?;
            return Ok(DataSource::Idx {
                images: images.into(),
                labels: labels.into(),
            });
        }
        if let Some(rest) = s.strip_prefix("png:") {
            let (root, resize) = match rest.rsplit_once('@') {
                Some((root, size)) => {
                    let (h, w) = size
                        .split_once('x')
                        .with_context(|| format!("bad size {size:?}, expected HxW"))?;
                    (root, Some((h.parse()?, w.parse()?)))
                }
                None => (rest, None),
            };
            return Ok(DataSource::Png {
                root: root.into(),
                resize,
            });
        }
        if s.is_empty() {
            bail!("empty data source");
        }
        Ok(DataSource::Dir(s.into()))
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Idx { images, labels } => {
                write!(f, "idx:{},{}", images.display(), labels.display())
            }
            DataSource::Png { root, resize: None } => write!(f, "png:{}", root.display()),
            DataSource::Png {
                root,
                resize: Some((h, w)),
            } => write!(f, "png:{}@{h}x{w}", root.display()),
            DataSource::Dir(d) => write!(f, "{}", d.display()),
        }
    }
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// Paths of the IDX pair for `split` inside a generated directory.
pub fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let name = split_name(split);
    (
        dir.join(format!("{name}-images-idx3-ubyte")),
        dir.join(format!("{name}-labels-idx1-ubyte")),
    )
}

pub fn save_split(dir: &Path, dataset: &LabeledDataset, split: Split) -> Result<()> {
    let (images, labels) = split_paths(dir, split);
    save_idx(dataset, &images, &labels)?;
    Ok(())
}

impl DataSource {
    /// Loads the source. `split` picks the file pair of a generated
    /// directory; single-file sources ignore it.
    pub fn load(&self, split: Split) -> Result<LabeledDataset> {
        let mut ds = match self {
            DataSource::Idx { images, labels } => load_idx(images, labels)?,
            DataSource::Png { root, resize } => load_png_dir(root, &[], *resize)?,
            DataSource::Dir(dir) => {
                let (images, labels) = split_paths(dir, split);
                load_idx(&images, &labels)?
            }
        };
        ds.split = split;
        Ok(ds)
    }
}

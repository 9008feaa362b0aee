//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DIKM"  version:u32  K:u32  H:u32  W:u32  landmarks:u32  metric:u8  has_cache:u8  0:u16
//! K·H·W f64 centroid pixels, row-major per centroid
//! if has_cache:  N:u32  N × assignment:u32  N × 2·landmarks f64 target landmarks
//! CRC32 of every preceding byte:u32
//! ```

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use dikm_core::{Image, MetricKind};

pub const MAGIC: &[u8; 4] = b"DIKM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

/// Per-sample assignment and the target landmarks of its fit against the
/// assigned centroid, interleaved `[u0, v0, u1, v1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkCache {
    pub assignments: Vec<u32>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metric: MetricKind,
    pub landmarks: usize,
    pub height: usize,
    pub width: usize,
    pub centroids: Vec<Image>,
    pub cache: Option<LandmarkCache>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .context("checkpoint size overflow")?;
        ensure!(end <= self.bytes.len(), "checkpoint is truncated");
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).context("checkpoint size overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.k() * self.height * self.width * 8 + 4);
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.k() as u32,
            self.height as u32,
            self.width as u32,
            self.landmarks as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.metric.code());
        out.push(self.cache.is_some() as u8);
        out.extend_from_slice(&[0, 0]);
        for c in &self.centroids {
            for p in c.pixels() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        if let Some(cache) = &self.cache {
            out.extend_from_slice(&(cache.assignments.len() as u32).to_le_bytes());
            for a in &cache.assignments {
                out.extend_from_slice(&a.to_le_bytes());
            }
            for t in &cache.targets {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= HEADER_LEN + 4, "checkpoint is truncated");
        ensure!(&bytes[..4] == MAGIC, "not a checkpoint (bad magic)");
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            bail!("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}");
        }
        let mut r = Reader {
            bytes: body,
            pos: 4,
        };
        let version = r.u32()?;
        ensure!(
            version == VERSION,
            "unsupported checkpoint version {version}"
        );
        let k = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let landmarks = r.u32()? as usize;
        let flags = r.take(4)?;
        let metric = MetricKind::from_code(flags[0])
            .with_context(|| format!("unknown metric code {}", flags[0]))?;
        let has_cache = match flags[1] {
            0 => false,
            1 => true,
            other => bail!("bad cache flag {other}"),
        };
        let mut centroids = Vec::with_capacity(k);
        for _ in 0..k {
            let px = r.f64s(height * width)?;
            centroids.push(Image::new(height, width, px)?);
        }
        let cache = if has_cache {
            let n = r.u32()? as usize;
            let assignments = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if let Some(a) = assignments.iter().find(|&&a| a as usize >= k) {
                bail!("cached assignment {a} out of range for K = {k}");
            }
            let targets = r.f64s(n * 2 * landmarks)?;
            Some(LandmarkCache {
                assignments,
                targets,
            })
        } else {
            None
        };
        ensure!(r.pos == body.len(), "trailing bytes in checkpoint");
        Ok(Self {
            metric,
            landmarks,
            height,
            width,
            centroids,
            cache,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())
            .with_context(|| format!("writing checkpoint {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::warp::Image;

/// Bilinear resize with pixel centers aligned and edge clamping.
pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Image {
    let (h, w) = image.shape();
    if (h, w) == (height, width) {
        return image.clone();
    }
    let su = h as f64 / height as f64;
    let sv = w as f64 / width as f64;
    Image::from_fn(height, width, |r, c| {
        let u = ((r as f64 + 0.5) * su - 0.5).clamp(0.0, (h - 1) as f64);
        let v = ((c as f64 + 0.5) * sv - 0.5).clamp(0.0, (w - 1) as f64);
        let (u0, v0) = (u.floor() as usize, v.floor() as usize);
        let (u1, v1) = ((u0 + 1).min(h - 1), (v0 + 1).min(w - 1));
        let (fu, fv) = (u - u0 as f64, v - v0 as f64);
        let top = image.get(u0, v0) * (1.0 - fv) + image.get(u0, v1) * fv;
        let bottom = image.get(u1, v0) * (1.0 - fv) + image.get(u1, v1) * fv;
        top * (1.0 - fu) + bottom * fu
    })
}

fn read_gray(path: &Path) -> Result<Image> {
    let unreadable = |reason: String| Error::UnreadableImage {
        path: path.to_owned(),
        reason,
    };
    let rgb = image::open(path)
        .map_err(|e| unreadable(e.to_string()))?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb
        .pixels()
        .map(|p| {
            (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])) / 255.0
        })
        .collect();
    Image::new(h as usize, w as usize, pixels).map_err(|e| unreadable(e.to_string()))
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            if want_dirs {
                p.is_dir()
            } else {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            }
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Loads a directory-per-class tree of PNG files.
///
/// Classes are the subdirectories of `root` in sorted order, or only those
/// named in `class_subdirs` (in that order) when it is non-empty. Images
/// are converted to luma, resized to `resize_to` when given, and
/// normalized.
pub fn load_png_dir(
    root: &Path,
    class_subdirs: &[String],
    resize_to: Option<(usize, usize)>,
) -> Result<LabeledDataset> {
    let classes: Vec<PathBuf> = if class_subdirs.is_empty() {
        sorted_entries(root, true)?
    } else {
        class_subdirs.iter().map(|c| root.join(c)).collect()
    };
    if classes.is_empty() {
        return Err(Error::EmptyInput("class directories"));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let files = sorted_entries(dir, false)?;
        if files.is_empty() {
            return Err(Error::EmptyClass(dir.clone()));
        }
        for f in files {
            let mut img = read_gray(&f)?;
            if let Some((h, w)) = resize_to {
                img = resize_bilinear(&img, h, w);
            }
            images.push(img.normalized());
            labels.push(label);
        }
    }
    LabeledDataset::new(images, labels, Split::Train, root.display().to_string())
}

//! PNG frames in and out.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array3, Array4, ArrayView3, Axis};

/// Image or frame directory loaded as `[frames, 3, H, W]` in `[0, 1]`.
pub struct Loaded {
    pub pixels: Array4<f64>,
    /// Files read, in frame order.
    pub files: Vec<PathBuf>,
}

/// Sorted `frame_*.png` files of a directory.
pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "png")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("frame_"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("{} contains no frame_*.png files", dir.display());
    }
    Ok(files)
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        bail!("input {} does not exist", path.display());
    }
    Ok(image::open(path)
        .with_context(|| format!("cannot decode {}", path.display()))?
        .to_rgb8())
}

fn to_array(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

/// Loads a PNG or a directory of frames, optionally resized to `size`.
pub fn load(path: &Path, size: Option<(u32, u32)>) -> Result<Loaded> {
    let files = if path.is_dir() { frame_files(path)? } else { vec![path.to_path_buf()] };
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let mut img = read_rgb(f)?;
        if let Some((w, h)) = size {
            if img.dimensions() != (w, h) {
                img = image::imageops::resize(&img, w, h, FilterType::Triangle);
            }
        }
        frames.push(to_array(&img));
    }
    let dims = frames[0].dim();
    if let Some(bad) = frames.iter().position(|f| f.dim() != dims) {
        bail!("{} has a different size than the first frame", files[bad].display());
    }
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    let pixels = ndarray::stack(Axis(0), &views)?;
    Ok(Loaded { pixels, files })
}

pub fn to_image(frame: ArrayView3<f64>) -> Result<RgbImage> {
    let (c, h, w) = frame.dim();
    if c != 3 {
        bail!("expected 3 channels, got {c}");
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|ch| (frame[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

/// Writes `[frames, 3, H, W]` as `<stem>.png`, or as `<stem>/frame_%04d.png`
/// when there is more than one frame. Returns the written files.
pub fn save(dir: &Path, stem: &str, pixels: &Array4<f64>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if pixels.dim().0 == 1 {
        let path = dir.join(format!("{stem}.png"));
        to_image(pixels.index_axis(Axis(0), 0))?.save(&path).with_context(|| format!("cannot write {}", path.display()))?;
        written.push(path);
    } else {
        let sub = dir.join(stem);
        fs::create_dir_all(&sub)?;
        for (i, frame) in pixels.outer_iter().enumerate() {
            let path = sub.join(format!("frame_{i:04}.png"));
            to_image(frame)?.save(&path).with_context(|| format!("cannot write {}", path.display()))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// `[H, W, 3]` values in `[0, 1]` as a PNG.
pub fn save_hwc(path: &Path, rgb: &Array3<f64>) -> Result<()> {
    let chw = rgb.view().permuted_axes([2, 0, 1]);
    to_image(chw)?.save(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

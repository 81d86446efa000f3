//! On-disk dataset layout:
//!
//! ```text
//! <root>/<split>/A/<id>.png          t1 image
//! <root>/<split>/B/<id>.png          t2 image
//! <root>/<split>/label/<id>.png      8-bit mask, 0 or 255
//! <root>/<split>/plabel_<h>x<w>/<id>.png   exported patch labels (expanded, 0 or 255)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma, Rgb};

use crate::data::grid::{BinaryMask, Grid, RgbImage};
use crate::data::patch::{generate_patch_labels, PatchLabelGrid};
use crate::data::sample::BiTemporalSample;
use crate::error::{Error, Result};

pub const T1_DIR: &str = "A";
pub const T2_DIR: &str = "B";
pub const LABEL_DIR: &str = "label";

pub fn plabel_dir_name(patch_h: usize, patch_w: usize) -> String {
    format!("plabel_{patch_h}x{patch_w}")
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::file(dir, e.to_string()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::file(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    RgbImage::new(h as usize, w as usize, data)
}

/// Reads an 8-bit mask; accepts exactly the values {0, 255}.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| Error::file(path, e.to_string()))?.to_luma8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for &v in img.as_raw() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::file(path, format!("mask value {other} is neither 0 nor 255")));
            }
        }
    }
    Grid::new(h as usize, w as usize, data)
}

pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let mut out = image::RgbImage::new(image.width() as u32, image.height() as u32);
    for r in 0..image.height() {
        for c in 0..image.width() {
            let px = image.pixel(r, c).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            out.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
    out.save_with_format(path, ImageFormat::Png).map_err(|e| Error::file(path, e.to_string()))
}

/// Writes a binary mask as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let mut out = GrayImage::new(mask.width() as u32, mask.height() as u32);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            out.put_pixel(c as u32, r as u32, Luma([if mask.get(r, c) != 0 { 255 } else { 0 }]));
        }
    }
    out.save_with_format(path, ImageFormat::Png).map_err(|e| Error::file(path, e.to_string()))
}

/// Loads every sample of a split, sorted by id. Problems are collected across all
/// files and reported together.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<BiTemporalSample>> {
    let base = root.join(split);
    let dir_a = base.join(T1_DIR);
    let dir_b = base.join(T2_DIR);
    let dir_label = base.join(LABEL_DIR);
    if !dir_a.is_dir() {
        return Err(Error::MissingFile(dir_a));
    }
    let has_labels = dir_label.is_dir();
    let mut ids = png_ids(&dir_a)?;
    // t2 images without a t1 counterpart are reported too
    if dir_b.is_dir() {
        for id in png_ids(&dir_b)? {
            if ids.binary_search(&id).is_err() {
                ids.push(id);
            }
        }
        ids.sort();
    }

    let mut samples = Vec::with_capacity(ids.len());
    let mut problems = Vec::new();
    for id in ids {
        let file = format!("{id}.png");
        let paths: Vec<PathBuf> = if has_labels {
            vec![dir_a.join(&file), dir_b.join(&file), dir_label.join(&file)]
        } else {
            vec![dir_a.join(&file), dir_b.join(&file)]
        };
        let missing: Vec<_> = paths.iter().filter(|p| !p.is_file()).collect();
        if !missing.is_empty() {
            for p in missing {
                problems.push(format!("{id}: missing {}", p.display()));
            }
            continue;
        }
        let loaded = (|| -> Result<BiTemporalSample> {
            let t1 = read_rgb(&paths[0])?;
            let t2 = read_rgb(&paths[1])?;
            let mask = if has_labels { Some(read_mask(&paths[2])?) } else { None };
            BiTemporalSample::new(id.clone(), t1, t2, mask)
                .map_err(|e| Error::file(&paths[0], e.to_string()))
        })();
        match loaded {
            Ok(s) => samples.push(s),
            Err(e) => problems.push(format!("{id}: {e}")),
        }
    }
    if problems.is_empty() {
        Ok(samples)
    } else {
        Err(Error::Dataset(problems))
    }
}

/// Saves a sample into the standard layout (mask only if present).
pub fn save_sample(root: &Path, split: &str, sample: &BiTemporalSample) -> Result<()> {
    let base = root.join(split);
    for d in [T1_DIR, T2_DIR, LABEL_DIR] {
        fs::create_dir_all(base.join(d))?;
    }
    let file = format!("{}.png", sample.id);
    write_rgb(&base.join(T1_DIR).join(&file), &sample.image_t1)?;
    write_rgb(&base.join(T2_DIR).join(&file), &sample.image_t2)?;
    if let Some(mask) = &sample.pixel_mask {
        write_mask(&base.join(LABEL_DIR).join(&file), mask)?;
    }
    Ok(())
}

/// Exports the expanded patch labels of every mask in a split. Returns the output
/// directory; errors are listed per offending file.
pub fn export_patch_labels(root: &Path, split: &str, patch_h: usize, patch_w: usize) -> Result<PathBuf> {
    let base = root.join(split);
    let label_dir = base.join(LABEL_DIR);
    if !label_dir.is_dir() {
        return Err(Error::MissingFile(label_dir));
    }
    let out_dir = base.join(plabel_dir_name(patch_h, patch_w));
    let mut problems = Vec::new();
    let mut outputs = Vec::new();
    for id in png_ids(&label_dir)? {
        let path = label_dir.join(format!("{id}.png"));
        match read_mask(&path).and_then(|m| {
            generate_patch_labels(&m, patch_h, patch_w).map_err(|e| Error::file(&path, e.to_string()))
        }) {
            Ok(labels) => outputs.push((id, labels)),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems));
    }
    fs::create_dir_all(&out_dir)?;
    for (id, labels) in outputs {
        write_mask(&out_dir.join(format!("{id}.png")), &labels.expanded)?;
    }
    Ok(out_dir)
}

/// Reads previously exported patch labels back into a grid.
pub fn read_patch_labels(path: &Path, patch_h: usize, patch_w: usize) -> Result<PatchLabelGrid> {
    let expanded = read_mask(path)?;
    let labels = generate_patch_labels(&expanded, patch_h, patch_w)?;
    if labels.expanded != expanded {
        return Err(Error::file(path, "labels are not block-constant over the patch grid"));
    }
    Ok(labels)
}

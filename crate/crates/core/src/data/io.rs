use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Rgb, Rgba};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelMask, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetLayout {
    /// `root/images/<stem>.{png,tif,tiff}` paired with `root/labels/<stem>.png`.
    #[default]
    FolderPairs,
}

/// Documented aerial label colours and their indices; clutter maps to ignore.
pub const ISPRS_CLASSES: [(&str, [u8; 3], Option<u8>); 6] = [
    ("impervious_surfaces", [255, 255, 255], Some(0)),
    ("building", [0, 0, 255], Some(1)),
    ("low_vegetation", [0, 255, 255], Some(2)),
    ("tree", [0, 255, 0], Some(3)),
    ("car", [255, 255, 0], Some(4)),
    ("clutter", [255, 0, 0], None),
];

fn file_err(path: &Path, message: impl Into<String>) -> Error {
    Error::File {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| file_err(path, e.to_string()))
}

/// Reads an RGB or four-band raster as `bands x H x W`.
pub fn read_image(path: &Path) -> Result<Array3<u8>> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (bands, raw) = if img.color().channel_count() == 4 {
        (4, img.to_rgba8().into_raw())
    } else {
        (3, img.to_rgb8().into_raw())
    };
    let hwc = Array3::from_shape_vec((h, w, bands), raw).expect("buffer matches dims");
    Ok(hwc.permuted_axes([2, 0, 1]).as_standard_layout().to_owned())
}

/// Reads a single-band class-index raster.
pub fn read_labels(path: &Path, num_classes: usize, ignore_index: u8) -> Result<LabelMask> {
    let img = open(path)?;
    if img.color().channel_count() != 1 {
        return Err(file_err(
            path,
            format!("labels must be single-band, found {:?}", img.color()),
        ));
    }
    let g = img.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let arr = Array2::from_shape_vec((h, w), g.into_raw()).expect("buffer matches dims");
    LabelMask::new(arr, num_classes, ignore_index).map_err(|e| file_err(path, e.to_string()))
}

fn stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| file_err(dir, e.to_string()))?;
    for entry in entries {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if let (Some(ext), Some(stem)) = (ext, path.file_stem().and_then(|s| s.to_str())) {
            if exts.contains(&ext.as_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Loads every image/label pair under `root`, sorted by stem.
pub fn load_dataset(root: &Path, layout: DatasetLayout, num_classes: usize, ignore_index: u8) -> Result<Dataset> {
    let DatasetLayout::FolderPairs = layout;
    let (img_dir, lab_dir) = (root.join("images"), root.join("labels"));
    if !img_dir.is_dir() || !lab_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "no samples: {} must contain images/ and labels/",
            root.display()
        )));
    }
    let images = stems(&img_dir, &["png", "tif", "tiff"])?;
    let labels = stems(&lab_dir, &["png", "tif", "tiff"])?;
    if images.is_empty() && labels.is_empty() {
        return Err(Error::Dataset(format!("no samples under {}", root.display())));
    }
    if let Some(stem) = images.keys().find(|s| !labels.contains_key(*s)) {
        return Err(Error::Dataset(format!("image {stem} has no label file in {}", lab_dir.display())));
    }
    if let Some(stem) = labels.keys().find(|s| !images.contains_key(*s)) {
        return Err(Error::Dataset(format!("label {stem} has no image file in {}", img_dir.display())));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, ipath) in &images {
        let lpath = &labels[stem];
        let image = read_image(ipath)?;
        let labels = read_labels(lpath, num_classes, ignore_index)?;
        if (image.dim().1, image.dim().2) != (labels.height(), labels.width()) {
            return Err(file_err(
                lpath,
                format!(
                    "label raster {}x{} does not match image {}x{}",
                    labels.height(),
                    labels.width(),
                    image.dim().1,
                    image.dim().2
                ),
            ));
        }
        samples.push(Sample {
            name: stem.clone(),
            image,
            labels,
        });
    }
    Dataset::new(samples, num_classes)
}

/// Writes a dataset in the folder-pairs layout as PNG files.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let (img_dir, lab_dir) = (root.join("images"), root.join("labels"));
    std::fs::create_dir_all(&img_dir)?;
    std::fs::create_dir_all(&lab_dir)?;
    for s in dataset.samples() {
        let (bands, h, w) = s.image.dim();
        let hwc: Vec<u8> = s.image.view().permuted_axes([1, 2, 0]).iter().copied().collect();
        let ipath = img_dir.join(format!("{}.png", s.name));
        let res = if bands == 4 {
            ImageBuffer::<Rgba<u8>, _>::from_raw(w as u32, h as u32, hwc)
                .expect("buffer matches dims")
                .save(&ipath)
        } else {
            ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, hwc)
                .expect("buffer matches dims")
                .save(&ipath)
        };
        res.map_err(|e| file_err(&ipath, e.to_string()))?;
        let lpath = lab_dir.join(format!("{}.png", s.name));
        GrayImage::from_raw(w as u32, h as u32, s.labels.data().iter().copied().collect())
            .expect("buffer matches dims")
            .save(&lpath)
            .map_err(|e| file_err(&lpath, e.to_string()))?;
    }
    Ok(())
}

/// Converts a colour-coded aerial label raster (`3 x H x W`) to class indices.
pub fn isprs_colors_to_labels(rgb: &Array3<u8>, ignore_index: u8) -> Result<LabelMask> {
    let (bands, h, w) = rgb.dim();
    if bands < 3 {
        return Err(Error::InvalidArgument(format!("colour labels need 3 bands, got {bands}")));
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let px = [rgb[[0, y, x]], rgb[[1, y, x]], rgb[[2, y, x]]];
            let (_, _, idx) = ISPRS_CLASSES
                .iter()
                .find(|(_, c, _)| *c == px)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown label colour {px:?} at ({y}, {x})")))?;
            out[[y, x]] = idx.unwrap_or(ignore_index);
        }
    }
    LabelMask::new(out, 5, ignore_index)
}

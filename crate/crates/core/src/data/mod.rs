//! Samples, datasets, tiling and the synthetic generator.

mod io;
mod mask;
mod synthetic;
mod tiling;

pub use io::{isprs_colors_to_labels, load_dataset, read_image, read_labels, write_dataset, DatasetLayout, ISPRS_CLASSES};
pub use mask::{LabelMask, DEFAULT_IGNORE_INDEX};
pub use synthetic::{generate_synthetic, ShapeFamily, SyntheticDataset, SyntheticSpec};
pub use tiling::{stitch_predictions, tile_positions, tile_raster, PadMode, Tile, TileSpec};

use drd_nn::Tensor;
use ndarray::{Array3, Axis};

use crate::error::{Error, Result};

const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    /// `bands x H x W`, 3 or 4 bands.
    pub image: Array3<u8>,
    pub labels: LabelMask,
}

impl Sample {
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Self {
        let mut image = self.image.clone();
        let mut labels = self.labels.clone();
        if horizontal {
            image.invert_axis(Axis(2));
            labels = labels.flip_horizontal();
        }
        if vertical {
            image.invert_axis(Axis(1));
            labels = labels.flip_vertical();
        }
        Self {
            name: self.name.clone(),
            image: image.as_standard_layout().to_owned(),
            labels,
        }
    }
}

/// Immutable, validated collection of samples sharing one label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        for s in &samples {
            if s.labels.num_classes() != num_classes {
                return Err(Error::Dataset(format!(
                    "{}: labels declare {} classes, dataset has {num_classes}",
                    s.name,
                    s.labels.num_classes()
                )));
            }
            let (bands, h, w) = s.image.dim();
            if !(bands == 3 || bands == 4) || (h, w) != (s.labels.height(), s.labels.width()) {
                return Err(Error::Dataset(format!(
                    "{}: image {:?} does not match labels {:?}",
                    s.name,
                    s.image.shape(),
                    s.labels.data().shape()
                )));
            }
        }
        Ok(Self { samples, num_classes })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_pixel_counts(&self) -> Vec<usize> {
        let mut total = vec![0; self.num_classes];
        for s in &self.samples {
            for (t, c) in total.iter_mut().zip(s.labels.class_histogram()) {
                *t += c;
            }
        }
        total
    }
}

/// Stacks images into a normalised `N x bands x H x W` tensor.
pub fn images_to_tensor(images: &[&Array3<u8>]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?
        .dim();
    let mut data = Vec::with_capacity(images.len() * first.0 * first.1 * first.2);
    for img in images {
        if img.dim() != first {
            return Err(Error::ShapeMismatch {
                what: "image batch",
                left: vec![first.0, first.1, first.2],
                right: img.shape().to_vec(),
            });
        }
        data.extend(img.iter().map(|&v| (v as f32 / 255.0 - PIXEL_MEAN) / PIXEL_STD));
    }
    Ok(Tensor::from_vec(&[images.len(), first.0, first.1, first.2], data)?)
}

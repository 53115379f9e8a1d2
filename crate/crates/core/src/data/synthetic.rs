//! Procedural segmentation dataset. Every class pairs a base colour with a
//! texture; classes sharing a colour differ only in texture, so recognising
//! them needs spatial context rather than a per-pixel colour lookup.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelMask, Sample, DEFAULT_IGNORE_INDEX};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Rects,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub size: (usize, usize),
    pub num_classes: usize,
    pub shape_family: ShapeFamily,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > PALETTE.len() * TEXTURES {
            return Err(Error::InvalidArgument(format!(
                "synthetic num_classes must be in [2, {}], got {}",
                PALETTE.len() * TEXTURES,
                self.num_classes
            )));
        }
        if self.num_images == 0 {
            return Err(Error::InvalidArgument("synthetic num_images must be positive".into()));
        }
        let (h, w) = self.size;
        let side = grid_side(self.num_classes);
        if h < 4 * side || w < 4 * side {
            return Err(Error::InvalidArgument(format!(
                "synthetic size {h}x{w} too small for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

pub struct SyntheticDataset {
    pub train: Dataset,
    pub val: Dataset,
}

const PALETTE: [[f32; 3]; 4] = [
    [200.0, 70.0, 60.0],
    [70.0, 160.0, 80.0],
    [70.0, 90.0, 190.0],
    [190.0, 180.0, 80.0],
];
const TEXTURES: usize = 3;
const TEXTURE_AMPLITUDE: f32 = 40.0;
const NOISE: f32 = 14.0;
const JITTER: f32 = 12.0;

fn grid_side(classes: usize) -> usize {
    (classes as f64).sqrt().ceil() as usize
}

/// Texture value in `[-1, 1]`: flat, horizontal stripes or a checkerboard.
fn texture(kind: usize, y: usize, x: usize) -> f32 {
    match kind {
        0 => 0.0,
        1 => {
            if (y / 2).is_multiple_of(2) {
                1.0
            } else {
                -1.0
            }
        }
        _ => {
            if ((y / 2) + (x / 2)).is_multiple_of(2) {
                1.0
            } else {
                -1.0
            }
        }
    }
}

fn class_style(class: usize, num_classes: usize) -> (usize, usize) {
    // spread classes over colours first so small class counts stay colour-separable
    let colours = num_classes.min(PALETTE.len());
    (class % colours, class / colours)
}

fn paint_region(labels: &mut Array2<u8>, family: ShapeFamily, class: u8, (y0, x0, y1, x1): (usize, usize, usize, usize)) {
    match family {
        ShapeFamily::Rects => labels.slice_mut(ndarray::s![y0..y1, x0..x1]).fill(class),
        ShapeFamily::Blobs => {
            let cy = (y0 + y1) as f64 / 2.0;
            let cx = (x0 + x1) as f64 / 2.0;
            let ry = ((y1 - y0) as f64 / 2.0).max(0.5);
            let rx = ((x1 - x0) as f64 / 2.0).max(0.5);
            for y in y0..y1 {
                for x in x0..x1 {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        labels[[y, x]] = class;
                    }
                }
            }
        }
    }
}

fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize, min: usize, max: usize) -> (usize, usize, usize, usize) {
    let bh = rng.gen_range(min..=max.min(h));
    let bw = rng.gen_range(min..=max.min(w));
    let y0 = rng.gen_range(0..=h - bh);
    let x0 = rng.gen_range(0..=w - bw);
    (y0, x0, y0 + bh, x0 + bw)
}

fn generate_labels(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Array2<u8> {
    let (h, w) = spec.size;
    let k = spec.num_classes;
    let mut labels = Array2::from_elem((h, w), rng.gen_range(0..k) as u8);
    let extra = rng.gen_range(k / 2..=k);
    for _ in 0..extra {
        let b = random_box(rng, h, w, h.min(w) / 6, h.min(w) / 2);
        paint_region(&mut labels, spec.shape_family, rng.gen_range(0..k) as u8, b);
    }
    // One guaranteed region per class, each inside its own grid cell, painted last.
    let side = grid_side(k);
    let (ch, cw) = (h / side, w / side);
    let mut cells: Vec<usize> = (0..side * side).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.gen_range(0..=i));
    }
    for (class, &cell) in cells.iter().take(k).enumerate() {
        let (gy, gx) = (cell / side * ch, cell % side * cw);
        let bh = rng.gen_range(ch / 2..=ch);
        let bw = rng.gen_range(cw / 2..=cw);
        let y0 = gy + rng.gen_range(0..=ch - bh);
        let x0 = gx + rng.gen_range(0..=cw - bw);
        // blobs are inscribed ellipses, so force a solid core as well
        paint_region(&mut labels, spec.shape_family, class as u8, (y0, x0, y0 + bh, x0 + bw));
        let (my, mx) = (y0 + bh / 2, x0 + bw / 2);
        labels[[my, mx]] = class as u8;
    }
    labels
}

fn render(rng: &mut ChaCha8Rng, labels: &Array2<u8>, num_classes: usize) -> Array3<u8> {
    let (h, w) = labels.dim();
    let jitter: Vec<[f32; 3]> = (0..num_classes)
        .map(|_| [0; 3].map(|_| rng.gen_range(-JITTER..JITTER)))
        .collect();
    let mut img = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let c = labels[[y, x]] as usize;
            let (colour, tex) = class_style(c, num_classes);
            let t = texture(tex, y, x) * TEXTURE_AMPLITUDE;
            for b in 0..3 {
                let n: f32 = rng.gen_range(-NOISE..NOISE);
                let v = PALETTE[colour][b] + jitter[c][b] + t + n;
                img[[b, y, x]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

/// Deterministic per seed; the first 80% of the images form the training split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let labels = generate_labels(&mut rng, spec);
        let image = render(&mut rng, &labels, spec.num_classes);
        samples.push(Sample {
            name: format!("syn_{i:05}"),
            image,
            labels: LabelMask::new(labels, spec.num_classes, DEFAULT_IGNORE_INDEX)?,
        });
    }
    let n_train = if spec.num_images == 1 {
        1
    } else {
        ((spec.num_images as f64 * 0.8).round() as usize).clamp(1, spec.num_images - 1)
    };
    let val = samples.split_off(n_train);
    Ok(SyntheticDataset {
        train: Dataset::new(samples, spec.num_classes)?,
        val: Dataset::new(val, spec.num_classes)?,
    })
}

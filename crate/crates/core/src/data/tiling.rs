use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::LabelMask;
use crate::distill::{ScoreKind, ScoreMap};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Reflect,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub tile_h: usize,
    pub tile_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_mode: PadMode,
}

impl TileSpec {
    pub fn new(tile_h: usize, tile_w: usize, stride_h: usize, stride_w: usize, pad_mode: PadMode) -> Result<Self> {
        let s = Self {
            tile_h,
            tile_w,
            stride_h,
            stride_w,
            pad_mode,
        };
        s.validate()?;
        Ok(s)
    }

    /// Square tiles with a square stride.
    pub fn square(tile: usize, stride: usize, pad_mode: PadMode) -> Result<Self> {
        Self::new(tile, tile, stride, stride, pad_mode)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_h == 0 || self.tile_w == 0 {
            return Err(Error::InvalidArgument("tile size must be positive".into()));
        }
        if self.stride_h == 0 || self.stride_h > self.tile_h || self.stride_w == 0 || self.stride_w > self.tile_w {
            return Err(Error::InvalidArgument(format!(
                "stride ({}, {}) must be in (0, tile] for tile ({}, {})",
                self.stride_h, self.stride_w, self.tile_h, self.tile_w
            )));
        }
        Ok(())
    }
}

/// Tile start offsets along one axis: step by `stride` until a tile reaches the end.
pub fn tile_positions(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut p = 0;
    while p + tile < len {
        p += stride;
        out.push(p);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub image: Array3<u8>,
    pub labels: LabelMask,
    /// `(row, col)` of the tile's top-left corner in the source raster.
    pub origin: (usize, usize),
    /// Pixels of the tile that lie outside the source raster.
    pub padded_pixels: usize,
}

fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len {
        r
    } else {
        period - r
    }
}

/// Cuts a `bands x H x W` raster and its labels into tiles covering every pixel.
pub fn tile_raster(image: &Array3<u8>, labels: &LabelMask, spec: &TileSpec) -> Result<Vec<Tile>> {
    spec.validate()?;
    let (bands, h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("raster must be at least 1x1".into()));
    }
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            what: "tiling (image vs labels)",
            left: image.shape().to_vec(),
            right: labels.data().shape().to_vec(),
        });
    }
    let ignore = labels.ignore_index();
    let mut tiles = Vec::new();
    for &r0 in &tile_positions(h, spec.tile_h, spec.stride_h) {
        for &c0 in &tile_positions(w, spec.tile_w, spec.stride_w) {
            let mut img = Array3::zeros((bands, spec.tile_h, spec.tile_w));
            let mut lab = Array2::from_elem((spec.tile_h, spec.tile_w), ignore);
            let mut padded = 0;
            for ty in 0..spec.tile_h {
                let y = r0 + ty;
                for tx in 0..spec.tile_w {
                    let x = c0 + tx;
                    if y < h && x < w {
                        lab[[ty, tx]] = labels.data()[[y, x]];
                        for b in 0..bands {
                            img[[b, ty, tx]] = image[[b, y, x]];
                        }
                    } else {
                        padded += 1;
                        if spec.pad_mode == PadMode::Reflect {
                            let (sy, sx) = (reflect(y, h), reflect(x, w));
                            for b in 0..bands {
                                img[[b, ty, tx]] = image[[b, sy, sx]];
                            }
                        }
                    }
                }
            }
            tiles.push(Tile {
                image: img,
                labels: LabelMask::new(lab, labels.num_classes(), ignore)?,
                origin: (r0, c0),
                padded_pixels: padded,
            });
        }
    }
    Ok(tiles)
}

/// Averages overlapping probability tiles back into an `out_h x out_w` map.
/// Tile pixels falling outside the output are dropped.
pub fn stitch_predictions(tiles: &[(ScoreMap, (usize, usize))], out_h: usize, out_w: usize) -> Result<ScoreMap> {
    let classes = match tiles.first() {
        Some((m, _)) => m.classes(),
        None => return Err(Error::Uncovered { row: 0, col: 0 }),
    };
    let mut mean = Array3::<f64>::zeros((classes, out_h, out_w));
    let mut count = Array2::<u32>::zeros((out_h, out_w));
    for (map, (r0, c0)) in tiles {
        if map.kind() != ScoreKind::Probabilities {
            return Err(Error::InvalidArgument("stitching expects probability tiles".into()));
        }
        if map.classes() != classes {
            return Err(Error::InvalidArgument(format!(
                "tile at ({r0}, {c0}) has {} classes, expected {classes}",
                map.classes()
            )));
        }
        for ty in 0..map.height() {
            let y = r0 + ty;
            if y >= out_h {
                break;
            }
            for tx in 0..map.width() {
                let x = c0 + tx;
                if x >= out_w {
                    break;
                }
                count[[y, x]] += 1;
                let n = count[[y, x]] as f64;
                // running mean, exact when every tile agrees
                for k in 0..classes {
                    let v = map.data()[[k, ty, tx]];
                    let m = &mut mean[[k, y, x]];
                    *m += (v - *m) / n;
                }
            }
        }
    }
    if let Some(((row, col), _)) = count.indexed_iter().find(|(_, &c)| c == 0) {
        return Err(Error::Uncovered { row, col });
    }
    ScoreMap::new(mean, ScoreKind::Probabilities)
}

use ndarray::Array2;

use crate::error::{Error, Result};

pub const DEFAULT_IGNORE_INDEX: u8 = 255;

/// `H x W` class-index raster. Every entry is a class in `[0, num_classes)`
/// or the reserved ignore index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    data: Array2<u8>,
    num_classes: usize,
    ignore_index: u8,
}

impl LabelMask {
    pub fn new(data: Array2<u8>, num_classes: usize, ignore_index: u8) -> Result<Self> {
        if num_classes < 2 || num_classes > ignore_index as usize {
            return Err(Error::InvalidArgument(format!(
                "num_classes {num_classes} must be in [2, {ignore_index}]"
            )));
        }
        if let Some(((r, c), &v)) = data
            .indexed_iter()
            .find(|(_, &v)| v as usize >= num_classes && v != ignore_index)
        {
            return Err(Error::InvalidArgument(format!(
                "label {v} at ({r}, {c}) is outside [0, {num_classes}) and is not the ignore index {ignore_index}"
            )));
        }
        Ok(Self {
            data,
            num_classes,
            ignore_index,
        })
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_ignored(&self, row: usize, col: usize) -> bool {
        self.data[[row, col]] == self.ignore_index
    }

    pub fn ignored_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == self.ignore_index).count()
    }

    /// Pixel count per class (ignored pixels excluded).
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &v in &self.data {
            if v != self.ignore_index {
                h[v as usize] += 1;
            }
        }
        h
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut d = self.data.clone();
        d.invert_axis(ndarray::Axis(1));
        Self { data: d, ..*self }
    }

    pub fn flip_vertical(&self) -> Self {
        let mut d = self.data.clone();
        d.invert_axis(ndarray::Axis(0));
        Self { data: d, ..*self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_out_of_range_labels() {
        let err = LabelMask::new(array![[0, 250]], 6, 255).unwrap_err().to_string();
        assert!(err.contains("250"), "{err}");
        assert!(LabelMask::new(array![[0, 255, 5]], 6, 255).is_ok());
    }

    #[test]
    fn histogram_skips_ignore() {
        let m = LabelMask::new(array![[0, 1, 255], [1, 1, 0]], 3, 255).unwrap();
        assert_eq!(m.class_histogram(), vec![2, 3, 0]);
        assert_eq!(m.ignored_count(), 1);
    }
}

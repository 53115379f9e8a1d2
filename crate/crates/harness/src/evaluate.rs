//! Tiled inference, stitching and metric reports.

use anyhow::{bail, Result};
use drd_core::data::{images_to_tensor, stitch_predictions, tile_raster, Dataset, LabelMask, TileSpec};
use drd_core::distill::{softmax_scores, ScoreKind, ScoreMap};
use drd_core::metrics::{f1_scores, mean_iou, overall_accuracy, ConfusionMatrix};
use drd_core::models::SegModel;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

const TILE_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub per_class_f1: Vec<f64>,
    pub per_class_iou: Vec<f64>,
    /// Classes that occur in ground truth or prediction and enter the means.
    pub counted: Vec<bool>,
    pub mean_f1: f64,
    pub miou: f64,
    pub oa: f64,
    /// Ground-truth pixels per class.
    pub pixel_counts: Vec<u64>,
    pub evaluated_pixels: u64,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix, num_images: usize) -> Result<Self> {
        let f1 = f1_scores(cm);
        let iou = mean_iou(cm);
        Ok(Self {
            num_images,
            per_class_f1: f1.per_class,
            per_class_iou: iou.per_class,
            counted: iou.counted,
            mean_f1: f1.mean,
            miou: iou.mean,
            oa: overall_accuracy(cm)?,
            pixel_counts: (0..cm.num_classes()).map(|k| cm.row_sum(k)).collect(),
            evaluated_pixels: cm.total(),
        })
    }
}

/// Full-resolution probability map of one raster, predicted tile by tile.
pub fn predict_raster(model: &mut SegModel, image: &ndarray::Array3<u8>, tile: &TileSpec) -> Result<ScoreMap> {
    let (_, h, w) = image.dim();
    let dummy = LabelMask::new(Array2::zeros((h, w)), model.num_classes(), 255)?;
    let tiles = tile_raster(image, &dummy, tile)?;
    let mut maps = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(TILE_BATCH) {
        let imgs: Vec<_> = chunk.iter().map(|t| &t.image).collect();
        let (logits, _) = model.predict(images_to_tensor(&imgs)?)?;
        for (i, t) in chunk.iter().enumerate() {
            let probs = softmax_scores(&ScoreMap::from_tensor(&logits, i, ScoreKind::Logits)?)?;
            maps.push((probs, t.origin));
        }
    }
    Ok(stitch_predictions(&maps, h, w)?)
}

/// Tiles, predicts, stitches and scores every image. In oracle mode the
/// prediction is the ground truth itself.
pub fn evaluate_model(model: &mut SegModel, data: &Dataset, tile: &TileSpec, oracle: bool) -> Result<EvalReport> {
    if model.num_classes() != data.num_classes() {
        bail!(
            "model predicts {} classes, dataset has {}",
            model.num_classes(),
            data.num_classes()
        );
    }
    if data.is_empty() {
        bail!("nothing to evaluate: dataset is empty");
    }
    let k = data.num_classes();
    let mut cm = ConfusionMatrix::new(k);
    for s in data.samples() {
        let pred = if oracle {
            let ignore = s.labels.ignore_index();
            s.labels.data().mapv(|v| if v == ignore { 0 } else { v })
        } else {
            predict_raster(model, &s.image, tile)?.argmax()
        };
        cm.accumulate(&LabelMask::new(pred, k, s.labels.ignore_index())?, &s.labels)?;
    }
    EvalReport::from_confusion(&cm, data.len())
}

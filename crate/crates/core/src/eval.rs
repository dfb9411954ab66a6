//! Dataset-level evaluation of a model.

use crate::dataset::Dataset;
use crate::error::Result;
use crate::metrics::{ConfusionMatrix, MiouResult, PqAccumulator, PqResult};
use crate::model::{pad_to_multiple, Model};
use crate::postprocess::{panoptic_inference, semantic_inference, PanopticMap, PostprocessConfig, SemanticMap};
use crate::head::SegmentPrediction;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub semantic: MiouResult,
    pub panoptic: PqResult,
    pub images: usize,
}

/// Prediction for an arbitrary-size image: reflect-padded to a multiple of
/// 32, returned with the padded size.
pub fn predict_padded(model: &Model, image: &Tensor) -> Result<(SegmentPrediction, (usize, usize))> {
    let padded = pad_to_multiple(image, 32)?;
    let (_, ph, pw) = padded.dims3()?;
    Ok((model.predict(&padded)?, (ph, pw)))
}

pub fn infer_semantic(model: &Model, image: &Tensor, pp: &PostprocessConfig) -> Result<SemanticMap> {
    let (_, h, w) = image.dims3()?;
    let (pred, size) = predict_padded(model, image)?;
    semantic_inference(&pred, size, pp)?.crop(h, w)
}

pub fn infer_panoptic(
    model: &Model,
    image: &Tensor,
    table: &crate::classes::ClassTable,
    pp: &PostprocessConfig,
) -> Result<PanopticMap> {
    let (_, h, w) = image.dims3()?;
    let (pred, size) = predict_padded(model, image)?;
    panoptic_inference(&pred, table, pp, size)?.crop(h, w)
}

/// Runs every record through the model (in parallel) and accumulates mIoU
/// and PQ in record order.
pub fn evaluate(model: &Model, dataset: &Dataset, pp: &PostprocessConfig) -> Result<Evaluation> {
    let images: Vec<Tensor> = dataset.records.iter().map(|r| r.image.clone()).collect();
    let preds = model.predict_many(&images)?;
    let mut cm = ConfusionMatrix::new(dataset.table.num_classes());
    let mut pq = PqAccumulator::new();
    for (r, pred) in dataset.records.iter().zip(&preds) {
        let size = r.size();
        let sem = semantic_inference(pred, size, pp)?;
        cm.add(&sem, &r.semantic, dataset.table.ignore_label)?;
        let pan = panoptic_inference(pred, &dataset.table, pp, size)?;
        pq.add(&pan, &r.panoptic(&dataset.table)?)?;
    }
    Ok(Evaluation {
        semantic: MiouResult {
            miou: cm.miou(),
            class_iou: cm.class_iou(),
        },
        panoptic: pq.result(&dataset.table),
        images: dataset.records.len(),
    })
}

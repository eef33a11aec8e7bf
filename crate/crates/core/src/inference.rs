//! Running a trained model over every proposal of a dataset.

use std::path::Path;

use ndarray::Array3;

use crate::data::{render_image, Dataset, PairedProposal};
use crate::eval::{Detection, GroundTruth};
use crate::geometry::BBox;
use crate::network::{PmfNet, RelationPrediction, Sample};
use crate::training::TrainError;

/// A proposal together with the model's scores for it.
#[derive(Debug, Clone)]
pub struct PairPrediction {
    pub pair: PairedProposal,
    pub prediction: RelationPrediction,
}

/// Scores every proposal of one image in a single batch.
pub fn predict_image(
    model: &PmfNet,
    image: &Array3<f64>,
    pairs: Vec<PairedProposal>,
) -> Result<Vec<PairPrediction>, TrainError> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let samples: Vec<Sample<'_>> = pairs
        .iter()
        .map(|p| Sample {
            image: 0,
            proposal: &p.proposal,
        })
        .collect();
    let preds = model.predict(std::slice::from_ref(image), &samples)?;
    Ok(pairs
        .into_iter()
        .zip(preds)
        .map(|(pair, prediction)| PairPrediction { pair, prediction })
        .collect())
}

/// Scores every proposal of every image, in dataset order.
pub fn predict_dataset(
    model: &PmfNet,
    ds: &Dataset,
    base_dir: Option<&Path>,
) -> Result<Vec<PairPrediction>, TrainError> {
    let mut out = Vec::new();
    for img in &ds.images {
        let pixels = render_image(ds, img.id, base_dir)?;
        out.extend(predict_image(model, &pixels, ds.pair_proposals(img.id)?)?);
    }
    Ok(out)
}

/// One detection per (proposal, action), scored with the final score `R`.
pub fn detections(preds: &[PairPrediction]) -> Vec<Detection> {
    preds
        .iter()
        .flat_map(|p| {
            p.prediction
                .r
                .iter()
                .enumerate()
                .map(move |(a, &score)| Detection {
                    image_id: p.pair.image_id,
                    human_box: p.pair.proposal.human,
                    object_box: p.pair.proposal.object,
                    object_class: p.pair.proposal.object_class,
                    action_id: a as u32,
                    score,
                })
        })
        .collect()
}

/// Evaluation records of every annotated interaction.
pub fn ground_truth_records(ds: &Dataset) -> Result<Vec<GroundTruth>, TrainError> {
    let mut out = Vec::new();
    for img in &ds.images {
        for lp in ds.ground_truth(img.id)? {
            for &a in &lp.actions {
                out.push(GroundTruth {
                    image_id: img.id,
                    human_box: lp.pair.human,
                    object_box: lp.pair.object,
                    object_class: lp.object_class,
                    action_id: a,
                });
            }
        }
    }
    Ok(out)
}

/// Convenience for tests and the CLI: box of a record array.
pub fn bbox(v: &[f64; 4]) -> BBox {
    BBox {
        x1: v[0],
        y1: v[1],
        x2: v[2],
        y2: v[3],
    }
}

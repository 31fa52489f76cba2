use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::qrn::MATCH_IOU;

/// Fraction of predictions whose IoU with the aligned ground truth exceeds `thresh`.
pub fn accuracy_at_iou(predictions: &[BBox], gts: &[BBox], thresh: f64) -> Result<f64> {
    if predictions.len() != gts.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} boxes",
            predictions.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::UndefinedMetric("accuracy over zero queries".into()));
    }
    let hits = predictions
        .iter()
        .zip(gts)
        .filter(|(p, g)| iou(p, g) > thresh)
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

fn coverage_counts(proposals: &[Vec<BBox>], gts: &[Vec<BBox>]) -> Result<Vec<usize>> {
    if proposals.len() != gts.len() {
        return Err(Error::LengthMismatch(format!(
            "{} proposal sets for {} images",
            proposals.len(),
            gts.len()
        )));
    }
    let counts: Vec<usize> = proposals
        .iter()
        .zip(gts)
        .flat_map(|(ps, gs)| {
            gs.iter()
                .map(move |g| ps.iter().filter(|p| iou(p, g) > MATCH_IOU).count())
        })
        .collect();
    if counts.is_empty() {
        return Err(Error::UndefinedMetric("no ground-truth boxes".into()));
    }
    Ok(counts)
}

/// Fraction of ground-truth boxes covered (IoU > 0.5) by at least one proposal
/// of their image.
pub fn ubp(proposals: &[Vec<BBox>], gts: &[Vec<BBox>]) -> Result<f64> {
    let c = coverage_counts(proposals, gts)?;
    Ok(c.iter().filter(|&&k| k > 0).count() as f64 / c.len() as f64)
}

/// Mean number of proposals covering each ground-truth box.
pub fn bpg(proposals: &[Vec<BBox>], gts: &[Vec<BBox>]) -> Result<f64> {
    let c = coverage_counts(proposals, gts)?;
    Ok(c.iter().sum::<usize>() as f64 / c.len() as f64)
}

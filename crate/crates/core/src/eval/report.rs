use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::pipeline::{boxes, Model, TrainConfig};
use crate::qrn::{encode_queries, ground, qrn_forward, NormMode, MATCH_IOU};
use crate::synthdata::{featurize, parse_phrase, FeatureGrid, GroundingExample};
use crate::tensor::{Tape, Tensor};

use super::metrics::{bpg, ubp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub n_queries: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fraction of queries whose final box has IoU > 0.5 with the target.
    pub accuracy: f64,
    /// Same, using the chosen proposal before regression.
    pub proposal_accuracy: f64,
    pub ubp: f64,
    pub bpg: f64,
    /// Accuracy by the shape named in the query.
    pub per_category: BTreeMap<String, CategoryStats>,
    pub n_queries: usize,
    pub n_proposals: usize,
    pub config: TrainConfig,
}

/// Outcome for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scene_id: u64,
    pub phrase_index: usize,
    pub query: String,
    pub proposal_box: BBox,
    pub regressed_box: BBox,
    pub gt_box: BBox,
}

/// Grounds every phrase of every example; returns predictions in corpus order
/// together with each example's proposal boxes.
pub fn predict_all(
    model: &Model<f32>,
    config: &TrainConfig,
    examples: &[&GroundingExample],
) -> Result<(Vec<Prediction>, Vec<Vec<BBox>>)> {
    let mut preds = Vec::new();
    let mut all_boxes = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let grids: Vec<FeatureGrid> = chunk.iter().map(|e| featurize(&e.scene)).collect();
        let refs: Vec<&FeatureGrid> = grids.iter().collect();
        let proposals = model.propose(config, &refs)?;
        let mut queries: Vec<&[u32]> = Vec::new();
        let mut owners: Vec<(usize, usize)> = Vec::new();
        let mut flat: Vec<f32> = Vec::new();
        for (e, (ex, props)) in chunk.iter().zip(&proposals).enumerate() {
            for (pi, phrase) in ex.phrases.iter().enumerate() {
                queries.push(&phrase.tokens);
                owners.push((e, pi));
                flat.extend(
                    props
                        .iter()
                        .flat_map(|p| p.feature.iter().map(|&v| v as f32)),
                );
            }
        }
        if queries.is_empty() {
            all_boxes.extend(proposals.iter().map(|p| boxes(p)));
            continue;
        }
        let n = config.n;
        let d_v = model.qrn.config.d_v;
        let mut tape = Tape::new();
        let q = encode_queries(&mut tape, &model.store, &model.qrn, &queries)?;
        let feats = Tensor::new(vec![queries.len() * n, d_v], flat)?;
        let (out, _) = qrn_forward(
            &mut tape,
            &model.store,
            &model.qrn,
            q,
            feats,
            n,
            NormMode::Running,
        )?;
        for (b, &(e, pi)) in owners.iter().enumerate() {
            let ex = chunk[e];
            let bs = boxes(&proposals[e]);
            let (choice, regressed) = ground(
                &bs,
                &out.probs(&tape, b),
                &out.codes(&tape, b),
                ex.scene.width(),
                ex.scene.height(),
                !config.disable_regression,
            )?;
            let phrase = &ex.phrases[pi];
            preds.push(Prediction {
                scene_id: ex.scene.id,
                phrase_index: pi,
                query: phrase.text.clone(),
                proposal_box: bs[choice],
                regressed_box: regressed,
                gt_box: phrase.gt_box,
            });
        }
        all_boxes.extend(proposals.iter().map(|p| boxes(p)));
    }
    Ok((preds, all_boxes))
}

/// Accuracy, proposal coverage and per-shape breakdown over `examples`.
pub fn evaluate(
    model: &Model<f32>,
    config: &TrainConfig,
    examples: &[&GroundingExample],
) -> Result<EvalReport> {
    let (preds, proposal_boxes) = predict_all(model, config, examples)?;
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("no queries to evaluate".into()));
    }
    let gts: Vec<Vec<BBox>> = examples.iter().map(|e| e.gt_boxes()).collect();
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut hits, mut raw_hits) = (0usize, 0usize);
    let mut i = 0;
    for ex in examples {
        for phrase in &ex.phrases {
            let p = &preds[i];
            i += 1;
            let hit = iou(&p.regressed_box, &p.gt_box) > MATCH_IOU;
            hits += hit as usize;
            raw_hits += (iou(&p.proposal_box, &p.gt_box) > MATCH_IOU) as usize;
            let key = parse_phrase(&phrase.tokens)?.shape.name().to_string();
            let slot = per.entry(key).or_default();
            slot.0 += 1;
            slot.1 += hit as usize;
        }
    }
    let n = preds.len();
    Ok(EvalReport {
        accuracy: hits as f64 / n as f64,
        proposal_accuracy: raw_hits as f64 / n as f64,
        ubp: ubp(&proposal_boxes, &gts)?,
        bpg: bpg(&proposal_boxes, &gts)?,
        per_category: per
            .into_iter()
            .map(|(k, (total, h))| {
                (
                    k,
                    CategoryStats {
                        n_queries: total,
                        accuracy: h as f64 / total as f64,
                    },
                )
            })
            .collect(),
        n_queries: n,
        n_proposals: config.n,
        config: config.clone(),
    })
}

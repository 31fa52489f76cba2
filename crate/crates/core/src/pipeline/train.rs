use serde::{Deserialize, Serialize};

use crate::cpn::{
    mean_features, policy_term, predict_reward, reward_function, reward_loss, select_k,
    RewardContext,
};
use crate::error::{Error, Result};
use crate::geometry::{encode_regression, BBox};
use crate::pgn::{
    gen_loss, pgn_forward, proposal_feature, sample_targets, select_top_proposals, GenTargets,
};
use crate::qrn::{
    cls_loss, encode_queries, positive_index, qrn_forward, reg_loss, regression_targets, NormMode,
    RegTarget,
};
use crate::synthdata::{featurize, FeatureGrid, GroundingExample, Split};
use crate::tensor::{
    AdamConfig, AdamState, BatchStats, Group, Rng, Scalar, Stream, Tape, Tensor, Var,
};

use super::model::{boxes, Model};
use super::TrainConfig;

/// Stage of the alternating schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Generation network alone on its own loss.
    Generation,
    /// Generation network frozen; ranking/regression and context policy train.
    Grounding,
    /// Everything trains together.
    Joint,
}

impl Phase {
    pub const ORDER: [Phase; 3] = [Phase::Generation, Phase::Grounding, Phase::Joint];

    /// Groups whose parameters are updated in this phase under `config`.
    pub fn trained_groups(self, config: &TrainConfig) -> Vec<Group> {
        let mut g = Vec::new();
        if self != Phase::Grounding && config.uses_pgn() {
            g.push(Group::Pgn);
        }
        if self != Phase::Generation {
            g.push(Group::Qrn);
            if !config.disable_cpn {
                g.push(Group::Cpn);
            }
        }
        g
    }
}

/// One training query: an example, which of its phrases is the query, and
/// optionally precomputed proposal boxes for its scene.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub example: &'a GroundingExample,
    pub query: usize,
    pub proposals: Option<&'a [BBox]>,
}

/// Recorded loss terms of one objective evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Components {
    pub l_gen: Option<Var>,
    pub l_cls: Option<Var>,
    pub l_reg: Option<Var>,
    pub l_rwd: Option<Var>,
    pub j: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Objective<T> {
    /// `L_gen + L_cls + lambda L_reg + J + L_rwd`.
    pub total: Var,
    pub parts: Components,
    pub bn_stats: Option<BatchStats<T>>,
    pub f_values: Vec<f64>,
    pub r_values: Vec<f64>,
    pub skipped: usize,
}

/// Records the full training objective of `phase` for `items` on `tape`.
///
/// Gradient routing: proposal boxes and features are constants, the query
/// encoding enters the reward head detached, and the predicted reward scales
/// the policy term as a plain number. Groups not trained in `phase` are frozen.
pub fn build_objective<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    config: &TrainConfig,
    items: &[BatchItem],
    phase: Phase,
    rng: &mut Rng,
) -> Result<Objective<T>> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let trained = phase.trained_groups(config);
    for g in Group::MODEL {
        if !trained.contains(&g) {
            tape.freeze(g);
        }
    }
    let grids: Vec<FeatureGrid> = items
        .iter()
        .map(|it| featurize(&it.example.scene))
        .collect();
    let grid_refs: Vec<&FeatureGrid> = grids.iter().collect();
    let (img_w, img_h) = (grids[0].img_w(), grids[0].img_h());
    let anchors = config.anchors.anchors(img_w, img_h)?;
    let mut parts = Components::default();
    let mut live_boxes: Option<Vec<Vec<BBox>>> = None;

    if trained.contains(&Group::Pgn) {
        let out = pgn_forward(tape, &model.store, &model.pgn, &grid_refs)?;
        let targets: Vec<GenTargets> = items
            .iter()
            .map(|it| sample_targets(&anchors, &it.example.gt_boxes(), config.sampling, rng))
            .collect();
        parts.l_gen = Some(gen_loss(tape, &out, &targets, config.lambda_g)?);
        if phase == Phase::Joint && items.iter().any(|it| it.proposals.is_none()) {
            let mut all = Vec::with_capacity(items.len());
            for s in 0..items.len() {
                let props = select_top_proposals(
                    &out.objectness(tape, s),
                    &out.codes(tape, s),
                    &anchors,
                    config.n,
                    img_w,
                    img_h,
                )?;
                all.push(boxes(&props));
            }
            live_boxes = Some(all);
        }
    }

    let mut objective = Objective {
        total: match parts.l_gen {
            Some(v) => v,
            None => tape.constant(Tensor::scalar(T::zero()))?,
        },
        parts,
        bn_stats: None,
        f_values: Vec::new(),
        r_values: Vec::new(),
        skipped: 0,
    };
    if phase == Phase::Generation {
        return Ok(objective);
    }

    // Supplied proposals take precedence, then the live generator output,
    // then inference with the current model.
    let mut proposal_boxes: Vec<Vec<BBox>> = Vec::with_capacity(items.len());
    let mut missing = Vec::new();
    for (i, it) in items.iter().enumerate() {
        match (it.proposals, &live_boxes) {
            (Some(p), _) => proposal_boxes.push(p.to_vec()),
            (None, Some(live)) => proposal_boxes.push(live[i].clone()),
            (None, None) => {
                proposal_boxes.push(Vec::new());
                missing.push(i);
            }
        }
    }
    if !missing.is_empty() {
        let gs: Vec<&FeatureGrid> = missing.iter().map(|&i| &grids[i]).collect();
        for (&i, props) in missing.iter().zip(model.propose(config, &gs)?) {
            proposal_boxes[i] = boxes(&props);
        }
    }
    let n = config.n;
    if proposal_boxes.iter().any(|b| b.len() != n) {
        return Err(Error::shape(
            "build_objective",
            format!("every query needs {n} proposals"),
        ));
    }
    let d_v = model.qrn.config.d_v;
    let mut feats: Vec<Vec<Vec<f64>>> = Vec::with_capacity(items.len());
    let mut flat = Vec::with_capacity(items.len() * n * d_v);
    for (g, bs) in grids.iter().zip(&proposal_boxes) {
        let f: Vec<Vec<f64>> = bs.iter().map(|b| proposal_feature(g, b)).collect();
        flat.extend(f.iter().flatten().map(|&v| T::c(v)));
        feats.push(f);
    }
    let features = Tensor::new(vec![items.len() * n, d_v], flat)?;

    let queries: Vec<&[u32]> = items
        .iter()
        .map(|it| it.example.phrases[it.query].tokens.as_slice())
        .collect();
    let q = encode_queries(tape, &model.store, &model.qrn, &queries)?;
    let (out, stats) = qrn_forward(
        tape,
        &model.store,
        &model.qrn,
        q,
        features,
        n,
        NormMode::Batch,
    )?;
    objective.bn_stats = stats;
    let inv_b = 1.0 / items.len() as f64;
    let gts: Vec<BBox> = items
        .iter()
        .map(|it| it.example.phrases[it.query].gt_box)
        .collect();
    let positives: Vec<Option<usize>> = proposal_boxes
        .iter()
        .zip(&gts)
        .map(|(b, g)| positive_index(b, g))
        .collect();
    objective.skipped = positives.iter().filter(|p| p.is_none()).count();

    let l_cls = cls_loss(tape, &out, &positives, inv_b)?;
    objective.parts.l_cls = Some(l_cls);
    let mut total = tape.add(objective.total, l_cls)?;
    if !config.disable_regression {
        let targets: Vec<RegTarget> = positives
            .iter()
            .zip(&proposal_boxes)
            .zip(&gts)
            .map(|((p, bs), g)| match p {
                None => RegTarget::Skip,
                Some(i) if config.reg_positive_only => {
                    RegTarget::Positive(*i, encode_regression(&bs[*i], g))
                }
                Some(_) => RegTarget::All(regression_targets(bs, g)),
            })
            .collect();
        let l_reg = reg_loss(tape, &out, &targets, inv_b)?;
        objective.parts.l_reg = Some(l_reg);
        let weighted = tape.scale(l_reg, config.lambda)?;
        total = tape.add(total, weighted)?;
    }
    // Queries without a positive proposal are skipped by the policy as well.
    let active: Vec<usize> = (0..items.len())
        .filter(|&b| positives[b].is_some())
        .collect();
    if !config.disable_cpn && !active.is_empty() {
        let mut top = Vec::with_capacity(active.len());
        let mut pooled = Vec::with_capacity(active.len() * d_v);
        let mut rewards = Vec::with_capacity(active.len());
        for &b in &active {
            let t = select_k(&out.probs(tape, b), config.k, config.selection, rng)?;
            pooled.extend(mean_features(&feats[b], &t)?.into_iter().map(T::c));
            let ctx = RewardContext::new(&proposal_boxes[b], &gts[b], &items[b].example.gt_boxes());
            rewards.push(reward_function(&t, &ctx, config.beta));
            top.push(t);
        }
        let qd = tape.detach(q)?;
        let qd = tape.gather_rows(qd, &active)?;
        let f = predict_reward(
            tape,
            &model.store,
            &model.cpn,
            Tensor::new(vec![active.len(), d_v], pooled)?,
            qd,
        )?;
        let f_values: Vec<f64> = tape.value(f).data().iter().map(|v| v.f64()).collect();
        let l_rwd = reward_loss(tape, f, &rewards, inv_b)?;
        let weights = if config.use_raw_reward {
            &rewards
        } else {
            &f_values
        };
        let log_p = tape.gather_rows(out.log_p, &active)?;
        let j = policy_term(tape, log_p, &top, weights, inv_b)?;
        objective.parts.l_rwd = Some(l_rwd);
        objective.parts.j = Some(j);
        total = tape.add(total, j)?;
        total = tape.add(total, l_rwd)?;
        objective.f_values = f_values;
        objective.r_values = rewards;
    }
    objective.total = total;
    debug_assert!(routing_holds(tape, &objective.parts));
    Ok(objective)
}

/// Which parameter groups each loss term may reach.
pub fn routing_holds<T: Scalar>(tape: &Tape<T>, parts: &Components) -> bool {
    let within = |v: Option<Var>, allowed: u8| v.is_none_or(|v| tape.group_mask(v) & !allowed == 0);
    let (pgn, qrn, cpn) = (Group::Pgn.bit(), Group::Qrn.bit(), Group::Cpn.bit());
    within(parts.l_gen, pgn)
        && within(parts.l_cls, qrn | pgn)
        && within(parts.l_reg, qrn | pgn)
        && within(parts.j, qrn)
        && within(parts.l_rwd, cpn)
}

/// Per-step metrics; absent terms are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub phase: Phase,
    #[serde(rename = "L_gen")]
    pub l_gen: Option<f64>,
    #[serde(rename = "L_cls")]
    pub l_cls: Option<f64>,
    #[serde(rename = "L_reg")]
    pub l_reg: Option<f64>,
    #[serde(rename = "L_rwd")]
    pub l_rwd: Option<f64>,
    #[serde(rename = "J")]
    pub j: Option<f64>,
    #[serde(rename = "F_mean")]
    pub f_mean: Option<f64>,
    #[serde(rename = "R_mean")]
    pub r_mean: Option<f64>,
    pub skipped: usize,
    /// The step produced a non-finite value and was not applied.
    pub aborted: bool,
}

/// Parameters, optimizer states and counters of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model<f32>,
    /// One optimizer per group, in [`Group::MODEL`] order.
    pub adam: Vec<AdamState<f32>>,
    /// Completed epochs over all phases.
    pub epoch: usize,
    pub step: u64,
    pub skipped_queries: u64,
    pub nan_steps: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let adam_cfg = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        let adam = Group::MODEL
            .iter()
            .map(|&g| AdamState::new(&model.store, g, adam_cfg))
            .collect();
        Ok(TrainState {
            config: config.clone(),
            model,
            adam,
            epoch: 0,
            step: 0,
            skipped_queries: 0,
            nan_steps: 0,
        })
    }

    pub fn adam_for(&mut self, group: Group) -> &mut AdamState<f32> {
        let i = Group::MODEL
            .iter()
            .position(|&g| g == group)
            .expect("model group");
        &mut self.adam[i]
    }
}

fn value_of<T: Scalar>(tape: &Tape<T>, v: Option<Var>) -> Option<f64> {
    v.map(|v| tape.scalar(v).f64())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// One optimization step of `phase` on `items`. A non-finite loss or gradient
/// aborts the step: nothing is updated and the NaN counter grows.
pub fn joint_step(
    state: &mut TrainState,
    items: &[BatchItem],
    phase: Phase,
    rng: &mut Rng,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let config = state.config.clone();
    let mut record = StepLosses {
        step: state.step,
        phase,
        l_gen: None,
        l_cls: None,
        l_reg: None,
        l_rwd: None,
        j: None,
        f_mean: None,
        r_mean: None,
        skipped: 0,
        aborted: false,
    };
    let objective = match build_objective(&mut tape, &state.model, &config, items, phase, rng) {
        Ok(o) => o,
        Err(Error::NonFinite { op }) => {
            log::warn!("step {} aborted: non-finite value in {op}", state.step);
            state.nan_steps += 1;
            state.step += 1;
            record.aborted = true;
            return Ok(record);
        }
        Err(e) => return Err(e),
    };
    let p = objective.parts;
    record.l_gen = value_of(&tape, p.l_gen);
    record.l_cls = value_of(&tape, p.l_cls);
    record.l_reg = value_of(&tape, p.l_reg);
    record.l_rwd = value_of(&tape, p.l_rwd);
    record.j = value_of(&tape, p.j);
    record.f_mean = mean(&objective.f_values);
    record.r_mean = mean(&objective.r_values);
    record.skipped = objective.skipped;

    let mut grads = tape.backward(objective.total, &state.model.store)?;
    if !tape.scalar(objective.total).is_finite() || !grads.is_finite() {
        log::warn!("step {} aborted: non-finite gradient", state.step);
        state.nan_steps += 1;
        state.step += 1;
        record.aborted = true;
        return Ok(record);
    }
    for group in phase.trained_groups(&config) {
        grads.clip_group(&state.model.store, group, config.grad_clip);
        let i = Group::MODEL
            .iter()
            .position(|&g| g == group)
            .expect("model group");
        state.adam[i].step(&mut state.model.store, &grads)?;
    }
    if let Some(stats) = &objective.bn_stats {
        state
            .model
            .qrn
            .update_running_stats(&mut state.model.store, stats);
    }
    state.step += 1;
    state.skipped_queries += objective.skipped as u64;
    Ok(record)
}

/// Result of a full schedule.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepLosses>,
}

const ORDER_STREAM: u64 = 1 << 40;
const STEP_STREAM: u64 = 2 << 40;

/// Runs `config.cycles` passes of the generation, grounding and joint phases
/// over the training split of `corpus`.
pub fn alternating_schedule(
    config: &TrainConfig,
    corpus: &[GroundingExample],
) -> Result<TrainOutcome> {
    let train: Vec<&GroundingExample> = corpus
        .iter()
        .filter(|e| Split::of(e.scene.id) == Split::Train)
        .collect();
    train_on(TrainState::new(config)?, &train, |_| Ok(()))
}

/// Trains `state` on exactly `examples`, reporting each step to `sink`.
pub fn train_on(
    mut state: TrainState,
    examples: &[&GroundingExample],
    mut sink: impl FnMut(&StepLosses) -> Result<()>,
) -> Result<TrainOutcome> {
    if examples.is_empty() || examples.iter().any(|e| e.phrases.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let config = state.config.clone();
    let sampling = Rng::stream(config.seed, Stream::Sampling);
    let mut log = Vec::new();
    let mut cache: Option<Vec<Vec<BBox>>> = None;
    for _ in 0..config.cycles {
        for (phase, &epochs) in Phase::ORDER.iter().zip(&config.epochs) {
            if epochs == 0 || (*phase == Phase::Generation && !config.uses_pgn()) {
                continue;
            }
            // Frozen generators give fixed proposals; compute them once per phase.
            let frozen = *phase == Phase::Grounding || !config.uses_pgn();
            if frozen && (config.uses_pgn() || cache.is_none()) {
                cache = Some(propose_all(&state.model, &config, examples)?);
            }
            for _ in 0..epochs {
                let mut order_rng = sampling.substream(ORDER_STREAM + state.epoch as u64);
                let mut order: Vec<usize> = (0..examples.len()).collect();
                order_rng.shuffle(&mut order);
                let picks: Vec<usize> = order
                    .iter()
                    .map(|&i| order_rng.below(examples[i].phrases.len()))
                    .collect();
                let (mut sum, mut count, mut aborted) = (0.0, 0usize, 0usize);
                for (chunk, qs) in order
                    .chunks(config.batch_size)
                    .zip(picks.chunks(config.batch_size))
                {
                    let items: Vec<BatchItem> = chunk
                        .iter()
                        .zip(qs)
                        .map(|(&i, &q)| BatchItem {
                            example: examples[i],
                            query: q,
                            proposals: if frozen {
                                cache.as_ref().map(|c| c[i].as_slice())
                            } else {
                                None
                            },
                        })
                        .collect();
                    let mut step_rng = sampling.substream(STEP_STREAM + state.step);
                    let rec = joint_step(&mut state, &items, *phase, &mut step_rng)?;
                    if rec.aborted {
                        aborted += 1;
                    } else {
                        sum += [rec.l_gen, rec.l_cls, rec.l_reg]
                            .iter()
                            .flatten()
                            .sum::<f64>();
                        count += 1;
                    }
                    sink(&rec)?;
                    log.push(rec);
                }
                if count == 0 {
                    return Err(Error::NonFinite {
                        op: "training epoch",
                    });
                }
                state.epoch += 1;
                log::info!(
                    "epoch {} ({phase:?}): mean loss {:.4}, {aborted} aborted steps",
                    state.epoch,
                    sum / count as f64
                );
            }
        }
    }
    Ok(TrainOutcome { state, log })
}

/// Proposal boxes of every example under the current model.
pub fn propose_all(
    model: &Model<f32>,
    config: &TrainConfig,
    examples: &[&GroundingExample],
) -> Result<Vec<Vec<BBox>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let grids: Vec<FeatureGrid> = chunk.iter().map(|e| featurize(&e.scene)).collect();
        let refs: Vec<&FeatureGrid> = grids.iter().collect();
        out.extend(model.propose(config, &refs)?.iter().map(|p| boxes(p)));
    }
    Ok(out)
}

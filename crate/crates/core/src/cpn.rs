//! Context policy: rank the relevance distribution, keep the top K, predict a
//! reward for that set, score it against the description's context, and turn
//! the predicted reward into a policy-gradient term on the ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::pgn::top_indices;
use crate::qrn::MATCH_IOU;
use crate::tensor::{init_params, Init, ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct CpnParams {
    pub d_in: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl CpnParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        d_v: usize,
        d_q: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        store.add(
            "cpn.w",
            init_params(&[d_v + d_q, 1], Init::FanScaledUniform, rng)?,
        );
        store.add("cpn.b", Tensor::zeros(&[1]));
        Self::bind(store, d_v, d_q)
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, d_v: usize, d_q: usize) -> Result<Self> {
        let w = store
            .id("cpn.w")
            .ok_or_else(|| Error::MissingTensor("cpn.w".into()))?;
        let b = store
            .id("cpn.b")
            .ok_or_else(|| Error::MissingTensor("cpn.b".into()))?;
        if store.get(w).shape() != [d_v + d_q, 1] || store.get(b).shape() != [1] {
            return Err(Error::shape(
                "cpn",
                "reward head does not match feature widths",
            ));
        }
        Ok(CpnParams {
            d_in: d_v + d_q,
            w,
            b,
        })
    }
}

/// How the policy picks the K proposals it is rewarded for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// The K most relevant proposals.
    #[default]
    Ranked,
    /// K independent draws from the relevance distribution; the sum of their
    /// log-probabilities is then the exact score function of the draw.
    Sampled,
}

/// `k` independent draws from the categorical distribution `p`.
pub fn sample_k(p: &[f64], k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k == 0 || p.is_empty() {
        return Err(Error::Contract(
            "sampling needs K >= 1 and a non-empty distribution".into(),
        ));
    }
    let total: f64 = p.iter().sum();
    Ok((0..k)
        .map(|_| {
            let mut u = rng.next_f64() * total;
            for (i, &pi) in p.iter().enumerate() {
                if u < pi {
                    return i;
                }
                u -= pi;
            }
            p.len() - 1
        })
        .collect())
}

pub fn select_k(p: &[f64], k: usize, selection: Selection, rng: &mut Rng) -> Result<Vec<usize>> {
    match selection {
        Selection::Ranked => select_top_k(p, k),
        Selection::Sampled => sample_k(p, k, rng),
    }
}

/// The `k` most relevant proposals, descending, ties by lower index.
pub fn select_top_k(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Contract("top-K needs K >= 1".into()));
    }
    top_indices(p, k)
}

/// Proposal membership in the query set (IoU > 0.5 with the query's box) and
/// the background set (IoU < 0.5 with every mentioned box).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewardContext {
    pub in_query: Vec<bool>,
    pub in_background: Vec<bool>,
}

impl RewardContext {
    pub fn new(proposals: &[BBox], query_gt: &BBox, mentioned: &[BBox]) -> Self {
        let in_query = proposals
            .iter()
            .map(|p| iou(p, query_gt) > MATCH_IOU)
            .collect();
        let in_background = proposals
            .iter()
            .map(|p| {
                iou(p, query_gt) < MATCH_IOU && mentioned.iter().all(|g| iou(p, g) < MATCH_IOU)
            })
            .collect();
        RewardContext {
            in_query,
            in_background,
        }
    }
}

/// `(|top_k in S_q| + beta * |top_k in neither S_q nor S_bg|) / K`.
pub fn reward_function(top_k: &[usize], ctx: &RewardContext, beta: f64) -> f64 {
    if top_k.is_empty() {
        return 0.0;
    }
    let hits = top_k.iter().filter(|&&i| ctx.in_query[i]).count();
    let context = top_k
        .iter()
        .filter(|&&i| !ctx.in_query[i] && !ctx.in_background[i])
        .count();
    (hits as f64 + beta * context as f64) / top_k.len() as f64
}

/// Element-wise mean of the selected feature rows.
pub fn mean_features(features: &[Vec<f64>], idx: &[usize]) -> Result<Vec<f64>> {
    let Some(&first) = idx.first() else {
        return Err(Error::Contract("empty top-K set".into()));
    };
    let mut out = vec![0.0; features[first].len()];
    for &i in idx {
        out.iter_mut().zip(&features[i]).for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / idx.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

/// `sigmoid(W_c (v_c || q) + b_c)` per row, `[B, 1]`. `pooled` is `[B, d_v]`;
/// `q` should be detached so the reward head is the only trainable input.
pub fn predict_reward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &CpnParams,
    pooled: Tensor<T>,
    q: Var,
) -> Result<Var> {
    let v = tape.constant(pooled)?;
    let x = tape.concat_cols(&[v, q])?;
    let w = tape.param(store, params.w)?;
    let b = tape.param(store, params.b)?;
    let z = tape.linear(x, w, b)?;
    tape.sigmoid(z)
}

/// `scale * sum_b (F_b - R_b)^2`.
pub fn reward_loss<T: Scalar>(tape: &mut Tape<T>, f: Var, r: &[f64], scale: f64) -> Result<Var> {
    if tape.value(f).len() != r.len() {
        return Err(Error::shape(
            "reward_loss",
            format!(
                "{} predictions for {} rewards",
                tape.value(f).len(),
                r.len()
            ),
        ));
    }
    let rv = tape.constant(Tensor::new(
        tape.value(f).shape().to_vec(),
        r.iter().map(|&v| T::c(v)).collect(),
    )?)?;
    let d = tape.sub(f, rv)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, scale)
}

/// `-scale * sum_b weight_b * sum_{i in top_k[b]} log p_{b,i}` where `log_p` is
/// `[B, N]` and the weights are plain numbers (no gradient path).
pub fn policy_term<T: Scalar>(
    tape: &mut Tape<T>,
    log_p: Var,
    top_k: &[Vec<usize>],
    weights: &[f64],
    scale: f64,
) -> Result<Var> {
    let n = tape.value(log_p).last_dim();
    if top_k.len() != weights.len() {
        return Err(Error::shape(
            "policy_term",
            "one weight per top-K set expected",
        ));
    }
    let mut idx = Vec::new();
    let mut w = Vec::new();
    for (b, (set, &f)) in top_k.iter().zip(weights).enumerate() {
        for &i in set {
            idx.push(b * n + i);
            w.push(T::c(-scale * f));
        }
    }
    if idx.is_empty() {
        return tape.constant(Tensor::scalar(T::zero()));
    }
    let picked = tape.pick(log_p, &idx)?;
    let wv = tape.constant(Tensor::vector(w))?;
    let prod = tape.mul(picked, wv)?;
    tape.sum(prod)
}

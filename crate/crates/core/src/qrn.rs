//! Query-guided regression: an LSTM phrase encoder, fusion of the phrase with
//! every proposal feature, a 5-way head (relevance logit plus regression), and
//! the classification and regression losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_regression, encode_regression, iou, BBox, RegressionCode};
use crate::synthdata::MAX_QUERY_LEN;
use crate::tensor::{
    init_params, lstm_step, BatchStats, Init, ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var,
};

/// Strict IoU threshold for the positive proposal and for accuracy.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrnConfig {
    pub vocab: usize,
    pub d_embed: usize,
    pub d_q: usize,
    pub d_v: usize,
    pub m: usize,
    pub bn_eps: f64,
    /// Weight kept by running statistics at each update.
    pub bn_momentum: f64,
}

impl QrnConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.vocab, self.d_embed, self.d_q, self.d_v, self.m].contains(&0) {
            return Err(Error::Config("qrn dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("invalid standardization settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QrnParams {
    pub config: QrnConfig,
    pub embed: ParamId,
    pub lstm_w: ParamId,
    pub lstm_b: ParamId,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Std of the regression columns of the output head at initialization, so
/// regressed boxes start out at their proposals.
const REG_INIT_STD: f64 = 1e-3;

enum Fill {
    Init(Init),
    Ones,
    /// Relevance column fan-scaled, regression columns near zero.
    Head,
}

impl QrnParams {
    fn layout(c: &QrnConfig) -> [(&'static str, Vec<usize>, Fill, bool); 11] {
        let (e, d, m) = (c.d_embed, c.d_q, c.m);
        [
            (
                "qrn.embed",
                vec![c.vocab, e],
                Fill::Init(Init::FanScaledUniform),
                true,
            ),
            (
                "qrn.lstm.w",
                vec![e + d, 4 * d],
                Fill::Init(Init::FanScaledUniform),
                true,
            ),
            ("qrn.lstm.b", vec![4 * d], Fill::Init(Init::Zeros), true),
            (
                "qrn.fuse.w",
                vec![d + c.d_v, m],
                Fill::Init(Init::FanScaledNormal),
                true,
            ),
            ("qrn.fuse.b", vec![m], Fill::Init(Init::Zeros), true),
            ("qrn.bn.gamma", vec![m], Fill::Ones, true),
            ("qrn.bn.beta", vec![m], Fill::Init(Init::Zeros), true),
            (
                "qrn.bn.running_mean",
                vec![m],
                Fill::Init(Init::Zeros),
                false,
            ),
            ("qrn.bn.running_var", vec![m], Fill::Ones, false),
            ("qrn.head.w", vec![m, 5], Fill::Head, true),
            ("qrn.head.b", vec![5], Fill::Init(Init::Zeros), true),
        ]
    }

    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &QrnConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        for (name, shape, fill, trainable) in Self::layout(config) {
            let value = match fill {
                Fill::Init(i) => init_params(&shape, i, rng)?,
                Fill::Ones => Tensor::full(&shape, T::one()),
                Fill::Head => {
                    let rel = init_params::<T>(&[shape[0], 1], Init::FanScaledUniform, rng)?;
                    let reg = init_params::<T>(&[shape[0], 4], Init::Normal(REG_INIT_STD), rng)?;
                    let data = (0..shape[0]).flat_map(|r| {
                        [rel.data()[r]]
                            .into_iter()
                            .chain(reg.row(r).iter().copied())
                    });
                    Tensor::new(shape.clone(), data.collect())?
                }
            };
            if trainable {
                store.add(name, value);
            } else {
                store.add_buffer(name, value);
            }
        }
        Self::bind(store, config)
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, config: &QrnConfig) -> Result<Self> {
        let mut ids = Vec::with_capacity(11);
        for (name, shape, _, _) in Self::layout(config) {
            let id = store
                .id(name)
                .ok_or_else(|| Error::MissingTensor(name.into()))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "qrn",
                    format!("{name}: {:?} vs {shape:?}", store.get(id).shape()),
                ));
            }
            ids.push(id);
        }
        Ok(QrnParams {
            config: config.clone(),
            embed: ids[0],
            lstm_w: ids[1],
            lstm_b: ids[2],
            fuse_w: ids[3],
            fuse_b: ids[4],
            bn_gamma: ids[5],
            bn_beta: ids[6],
            bn_mean: ids[7],
            bn_var: ids[8],
            head_w: ids[9],
            head_b: ids[10],
        })
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running_stats<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        stats: &BatchStats<T>,
    ) {
        let keep = T::c(self.config.bn_momentum);
        let take = T::one() - keep;
        for (id, batch) in [(self.bn_mean, &stats.mean), (self.bn_var, &stats.var)] {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(batch)
                .for_each(|(r, &b)| *r = keep * *r + take * b);
        }
    }
}

fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Contract("empty query".into()));
    }
    if tokens.len() > MAX_QUERY_LEN {
        return Err(Error::Contract(format!(
            "query of {} tokens exceeds {MAX_QUERY_LEN}",
            tokens.len()
        )));
    }
    match tokens.iter().find(|&&t| t == 0 || t as usize >= vocab) {
        Some(&t) => Err(Error::UnknownToken(t)),
        None => Ok(()),
    }
}

/// Encodes each query as the LSTM's last hidden state over its own length,
/// giving `[B, d_q]`.
pub fn encode_queries<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &QrnParams,
    queries: &[&[u32]],
) -> Result<Var> {
    if queries.is_empty() {
        return Err(Error::Contract("no queries".into()));
    }
    for q in queries {
        check_tokens(q, params.config.vocab)?;
    }
    let (b, d) = (queries.len(), params.config.d_q);
    let embed = tape.param(store, params.embed)?;
    let w = tape.param(store, params.lstm_w)?;
    let bias = tape.param(store, params.lstm_b)?;
    let mut h = tape.constant(Tensor::zeros(&[b, d]))?;
    let mut c = tape.constant(Tensor::zeros(&[b, d]))?;
    let steps = queries.iter().map(|q| q.len()).max().unwrap_or(0);
    for t in 0..steps {
        let ids: Vec<usize> = queries
            .iter()
            .map(|q| q.get(t).map_or(0, |&i| i as usize))
            .collect();
        let x = tape.gather_rows(embed, &ids)?;
        let (h_next, c_next) = lstm_step(tape, x, h, c, w, bias)?;
        if queries.iter().all(|q| t < q.len()) {
            h = h_next;
            c = c_next;
            continue;
        }
        // Finished queries carry their state forward unchanged.
        let mut on = Vec::with_capacity(b * d);
        for q in queries {
            let v = if t < q.len() { T::one() } else { T::zero() };
            on.extend(std::iter::repeat_n(v, d));
        }
        let off: Vec<T> = on.iter().map(|&v| T::one() - v).collect();
        let on = tape.constant(Tensor::new(vec![b, d], on)?)?;
        let off = tape.constant(Tensor::new(vec![b, d], off)?)?;
        h = blend(tape, h_next, h, on, off)?;
        c = blend(tape, c_next, c, on, off)?;
    }
    Ok(h)
}

fn blend<T: Scalar>(tape: &mut Tape<T>, new: Var, old: Var, on: Var, off: Var) -> Result<Var> {
    let a = tape.mul(new, on)?;
    let b = tape.mul(old, off)?;
    tape.add(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Standardize by the statistics of the current rows.
    Batch,
    /// Standardize by the stored running statistics.
    Running,
}

/// Head outputs for `queries` groups of `n` proposals each.
#[derive(Debug, Clone, Copy)]
pub struct QrnOutput {
    /// `[B * N, 5]`: relevance logit, then four regression values.
    pub scores: Var,
    /// `[B, N]` log-softmax of the relevance logits within each query.
    pub log_p: Var,
    pub queries: usize,
    pub n: usize,
}

/// Fuses each query with its `n` proposal features (`features` is `[B * n, d_v]`,
/// query-major) and applies the head. In [`NormMode::Batch`] the batch
/// statistics are returned for the running averages.
pub fn qrn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &QrnParams,
    q: Var,
    features: Tensor<T>,
    n: usize,
    mode: NormMode,
) -> Result<(QrnOutput, Option<BatchStats<T>>)> {
    let b = tape.value(q).as_matrix_dims().map(|d| d.0).unwrap_or(0);
    if n == 0 {
        return Err(Error::Contract("no proposals".into()));
    }
    if features.shape() != [b * n, params.config.d_v] {
        return Err(Error::shape(
            "qrn_forward",
            format!(
                "features {:?} for {b} queries x {n} proposals",
                features.shape()
            ),
        ));
    }
    let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let qr = tape.gather_rows(q, &rows)?;
    let v = tape.constant(features)?;
    let (fused, stats) = fuse(tape, store, params, qr, v, mode)?;
    let hw = tape.param(store, params.head_w)?;
    let hb = tape.param(store, params.head_b)?;
    let scores = tape.linear(fused, hw, hb)?;
    let logits = tape.slice_cols(scores, 0, 1)?;
    let logits = tape.reshape(logits, &[b, n])?;
    let log_p = tape.log_softmax(logits)?;
    Ok((
        QrnOutput {
            scores,
            log_p,
            queries: b,
            n,
        },
        stats,
    ))
}

/// `relu(standardize(W_m (q || v) + b_m))` for row-aligned `q` and `v`.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &QrnParams,
    q: Var,
    v: Var,
    mode: NormMode,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let qv = tape.concat_cols(&[q, v])?;
    let w = tape.param(store, params.fuse_w)?;
    let bias = tape.param(store, params.fuse_b)?;
    let z = tape.linear(qv, w, bias)?;
    let gamma = tape.param(store, params.bn_gamma)?;
    let beta = tape.param(store, params.bn_beta)?;
    let eps = params.config.bn_eps;
    let (y, stats) = match mode {
        NormMode::Batch => {
            let (y, s) = tape.batch_norm_train(z, gamma, beta, eps)?;
            (y, Some(s))
        }
        NormMode::Running => {
            let mean = store.get(params.bn_mean).data().to_vec();
            let var = store.get(params.bn_var).data().to_vec();
            (
                tape.batch_norm_eval(z, gamma, beta, &mean, &var, eps)?,
                None,
            )
        }
    };
    Ok((tape.relu(y)?, stats))
}

impl QrnOutput {
    /// Relevance distribution of query `b`.
    pub fn probs<T: Scalar>(&self, tape: &Tape<T>, b: usize) -> Vec<f64> {
        let lp = tape.value(self.log_p).data();
        lp[b * self.n..(b + 1) * self.n]
            .iter()
            .map(|v| v.f64().exp())
            .collect()
    }

    /// Predicted regression codes of query `b`'s proposals.
    pub fn codes<T: Scalar>(&self, tape: &Tape<T>, b: usize) -> Vec<RegressionCode> {
        let s = tape.value(self.scores).data();
        (b * self.n..(b + 1) * self.n)
            .map(|r| {
                RegressionCode([
                    s[5 * r + 1].f64(),
                    s[5 * r + 2].f64(),
                    s[5 * r + 3].f64(),
                    s[5 * r + 4].f64(),
                ])
            })
            .collect()
    }
}

/// Proposal with the largest IoU against `gt` if that IoU exceeds 0.5; ties
/// go to the lower index.
pub fn positive_index(proposals: &[BBox], gt: &BBox) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in proposals.iter().enumerate() {
        let o = iou(p, gt);
        if best.is_none_or(|(_, b)| o > b) {
            best = Some((i, o));
        }
    }
    best.filter(|&(_, o)| o > MATCH_IOU).map(|(i, _)| i)
}

/// `-log p_{i*}` summed over queries with a positive, times `scale`.
/// Queries without a positive contribute nothing.
pub fn cls_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &QrnOutput,
    positives: &[Option<usize>],
    scale: f64,
) -> Result<Var> {
    if positives.len() != out.queries {
        return Err(Error::shape(
            "cls_loss",
            "one positive slot per query expected",
        ));
    }
    let idx: Vec<usize> = positives
        .iter()
        .enumerate()
        .filter_map(|(b, p)| p.map(|i| b * out.n + i))
        .collect();
    if idx.is_empty() {
        return tape.constant(Tensor::scalar(T::zero()));
    }
    let picked = tape.pick(out.log_p, &idx)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -scale)
}

/// Regression targets: every proposal's code toward the query's box.
pub fn regression_targets(proposals: &[BBox], gt: &BBox) -> Vec<RegressionCode> {
    proposals.iter().map(|p| encode_regression(p, gt)).collect()
}

/// Which proposals a query's regression loss covers.
#[derive(Debug, Clone, PartialEq)]
pub enum RegTarget {
    /// No positive proposal: the query is skipped.
    Skip,
    /// Average over all proposals.
    All(Vec<RegressionCode>),
    /// Only the positive proposal.
    Positive(usize, RegressionCode),
}

/// `(1/(4N)) sum_i sum_j smooth_l1(s_i[j+1] - target_i[j])` per query
/// (or `1/4` over the positive alone), summed over queries, times `scale`.
pub fn reg_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &QrnOutput,
    targets: &[RegTarget],
    scale: f64,
) -> Result<Var> {
    if targets.len() != out.queries {
        return Err(Error::shape("reg_loss", "one target per query expected"));
    }
    let n = out.n;
    let mut rows = Vec::new();
    let mut codes = Vec::new();
    let mut weights = Vec::new();
    for (b, t) in targets.iter().enumerate() {
        match t {
            RegTarget::Skip => {}
            RegTarget::All(all) => {
                if all.len() != n {
                    return Err(Error::shape(
                        "reg_loss",
                        format!("{} targets for {n} proposals", all.len()),
                    ));
                }
                let w = T::c(scale / (4.0 * n as f64));
                for (i, c) in all.iter().enumerate() {
                    rows.push(b * n + i);
                    codes.extend(c.0.iter().map(|&v| T::c(v)));
                    weights.extend([w; 4]);
                }
            }
            RegTarget::Positive(i, c) => {
                rows.push(b * n + i);
                codes.extend(c.0.iter().map(|&v| T::c(v)));
                weights.extend([T::c(scale / 4.0); 4]);
            }
        }
    }
    if rows.is_empty() {
        return tape.constant(Tensor::scalar(T::zero()));
    }
    let picked = tape.gather_rows(out.scores, &rows)?;
    let pred = tape.slice_cols(picked, 1, 5)?;
    let target = tape.constant(Tensor::new(vec![rows.len(), 4], codes)?)?;
    let diff = tape.sub(pred, target)?;
    let l = tape.smooth_l1(diff)?;
    let w = tape.constant(Tensor::new(vec![rows.len(), 4], weights)?)?;
    let lw = tape.mul(l, w)?;
    tape.sum(lw)
}

/// Most relevant proposal (ties to the lower index) and its final box: the
/// proposal regressed by its predicted code and clipped, or the raw proposal
/// when regression is disabled.
pub fn ground(
    proposals: &[BBox],
    probs: &[f64],
    codes: &[RegressionCode],
    img_w: f64,
    img_h: f64,
    regress: bool,
) -> Result<(usize, BBox)> {
    if proposals.is_empty() || probs.len() != proposals.len() || codes.len() != proposals.len() {
        return Err(Error::Contract(
            "ground needs matching, non-empty proposals".into(),
        ));
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    let b = if regress {
        decode_regression(&proposals[best], &codes[best]).clip(img_w, img_h)
    } else {
        proposals[best]
    };
    Ok((best, b))
}

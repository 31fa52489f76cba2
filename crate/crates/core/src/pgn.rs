//! Proposal generation: an MLP over each cell's 3x3 feature neighborhood that
//! scores and regresses the anchors of that cell, plus top-N selection and
//! RoI feature pooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    decode_regression, encode_regression, label_anchors, spatial_augment, AnchorConfig,
    AnchorLabel, BBox, RegressionCode, SpatialMode,
};
use crate::synthdata::{FeatureGrid, ATTR_CHANNELS};
use crate::tensor::{init_params, Init, ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Side of the square cell neighborhood fed to the trunk.
const WINDOW: usize = 3;
/// RoI pooling output is `POOL x POOL` sub-cells.
pub const POOL: usize = 2;
pub const SPATIAL: SpatialMode = SpatialMode::FiveD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgnConfig {
    pub d_feat: usize,
    pub hidden: usize,
    pub anchors: AnchorConfig,
}

impl Default for PgnConfig {
    fn default() -> Self {
        PgnConfig {
            d_feat: crate::synthdata::FEATURE_DIM,
            hidden: 64,
            anchors: AnchorConfig::default(),
        }
    }
}

impl PgnConfig {
    pub fn input_dim(&self) -> usize {
        WINDOW * WINDOW * self.d_feat
    }

    /// Length of a proposal's visual feature.
    pub fn d_v(&self) -> usize {
        POOL * POOL * self.d_feat + SPATIAL.dim()
    }
}

/// Handles of the PGN tensors inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct PgnParams {
    pub config: PgnConfig,
    pub trunk_w: ParamId,
    pub trunk_b: ParamId,
    pub obj_w: ParamId,
    pub obj_b: ParamId,
    pub reg_w: ParamId,
    pub reg_b: ParamId,
}

impl PgnParams {
    fn shapes(config: &PgnConfig) -> [(&'static str, Vec<usize>, Init); 6] {
        let (i, h, a) = (config.input_dim(), config.hidden, config.anchors.per_cell());
        [
            ("pgn.trunk.w", vec![i, h], Init::FanScaledNormal),
            ("pgn.trunk.b", vec![h], Init::Zeros),
            ("pgn.obj.w", vec![h, 2 * a], Init::FanScaledUniform),
            ("pgn.obj.b", vec![2 * a], Init::Zeros),
            ("pgn.reg.w", vec![h, 4 * a], Init::Normal(1e-3)),
            ("pgn.reg.b", vec![4 * a], Init::Zeros),
        ]
    }

    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &PgnConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        for (name, shape, init) in Self::shapes(config) {
            store.add(name, init_params(&shape, init, rng)?);
        }
        Self::bind(store, config)
    }

    /// Looks the tensors up by name, checking their shapes.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, config: &PgnConfig) -> Result<Self> {
        let mut ids = Vec::with_capacity(6);
        for (name, shape, _) in Self::shapes(config) {
            let id = store
                .id(name)
                .ok_or_else(|| Error::MissingTensor(name.into()))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "pgn",
                    format!("{name}: {:?} vs {shape:?}", store.get(id).shape()),
                ));
            }
            ids.push(id);
        }
        Ok(PgnParams {
            config: config.clone(),
            trunk_w: ids[0],
            trunk_b: ids[1],
            obj_w: ids[2],
            obj_b: ids[3],
            reg_w: ids[4],
            reg_b: ids[5],
        })
    }
}

/// Zero-padded 3x3 neighborhoods of every cell, `[grid_h * grid_w, 9 * d_feat]`.
pub fn neighborhoods<T: Scalar>(grid: &FeatureGrid) -> Tensor<T> {
    let (gh, gw, d) = (grid.grid_h, grid.grid_w, grid.d_feat);
    let width = WINDOW * WINDOW * d;
    let mut out = vec![T::zero(); gh * gw * width];
    let half = (WINDOW / 2) as isize;
    for r in 0..gh {
        for c in 0..gw {
            let row = &mut out[(r * gw + c) * width..(r * gw + c + 1) * width];
            for dr in -half..=half {
                for dc in -half..=half {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= gh as isize || cc >= gw as isize {
                        continue;
                    }
                    let slot = ((dr + half) as usize * WINDOW + (dc + half) as usize) * d;
                    for (o, &v) in row[slot..slot + d]
                        .iter_mut()
                        .zip(grid.cell(rr as usize, cc as usize))
                    {
                        *o = T::c(v);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, width], out).expect("sizes agree")
}

/// Per-anchor outputs for a batch of grids, stacked scene-major.
#[derive(Debug, Clone, Copy)]
pub struct PgnOutput {
    /// `[scenes * anchors, 2]` log-probabilities; column 1 is "object".
    pub log_probs: Var,
    /// `[scenes * anchors, 4]` regression codes.
    pub reg: Var,
    pub anchors_per_scene: usize,
    pub scenes: usize,
}

pub fn pgn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &PgnParams,
    grids: &[&FeatureGrid],
) -> Result<PgnOutput> {
    let Some(first) = grids.first() else {
        return Err(Error::shape("pgn_forward", "no grids"));
    };
    let cells = first.grid_h * first.grid_w;
    let width = params.config.input_dim();
    let mut data = Vec::with_capacity(grids.len() * cells * width);
    for g in grids {
        if g.grid_h * g.grid_w != cells || g.d_feat != params.config.d_feat {
            return Err(Error::shape(
                "pgn_forward",
                "grids differ in size or feature width",
            ));
        }
        data.extend(neighborhoods::<T>(g).into_data());
    }
    let x = tape.constant(Tensor::new(vec![grids.len() * cells, width], data)?)?;
    let a = params.config.anchors.per_cell();
    let tw = tape.param(store, params.trunk_w)?;
    let tb = tape.param(store, params.trunk_b)?;
    let pre = tape.linear(x, tw, tb)?;
    let h = tape.relu(pre)?;
    let ow = tape.param(store, params.obj_w)?;
    let ob = tape.param(store, params.obj_b)?;
    let logits = tape.linear(h, ow, ob)?;
    let logits = tape.reshape(logits, &[grids.len() * cells * a, 2])?;
    let log_probs = tape.log_softmax(logits)?;
    let rw = tape.param(store, params.reg_w)?;
    let rb = tape.param(store, params.reg_b)?;
    let reg = tape.linear(h, rw, rb)?;
    let reg = tape.reshape(reg, &[grids.len() * cells * a, 4])?;
    Ok(PgnOutput {
        log_probs,
        reg,
        anchors_per_scene: cells * a,
        scenes: grids.len(),
    })
}

impl PgnOutput {
    /// Objectness probability of every anchor of scene `s`.
    pub fn objectness<T: Scalar>(&self, tape: &Tape<T>, s: usize) -> Vec<f64> {
        let lp = tape.value(self.log_probs).data();
        let range = s * self.anchors_per_scene..(s + 1) * self.anchors_per_scene;
        range.map(|i| lp[2 * i + 1].f64().exp()).collect()
    }

    /// Regression codes of every anchor of scene `s`.
    pub fn codes<T: Scalar>(&self, tape: &Tape<T>, s: usize) -> Vec<RegressionCode> {
        let t = tape.value(self.reg).data();
        let range = s * self.anchors_per_scene..(s + 1) * self.anchors_per_scene;
        range
            .map(|i| {
                RegressionCode([
                    t[4 * i].f64(),
                    t[4 * i + 1].f64(),
                    t[4 * i + 2].f64(),
                    t[4 * i + 3].f64(),
                ])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub batch: usize,
    pub max_positive: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            batch: 256,
            max_positive: 128,
        }
    }
}

/// Classification and regression targets of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GenTargets {
    /// Sampled `(anchor, class)` pairs; class 1 is object.
    pub sampled: Vec<(usize, usize)>,
    /// Every positive anchor with its target code.
    pub positives: Vec<(usize, RegressionCode)>,
    /// Regression normalizer: the number of anchors.
    pub n_reg: usize,
}

/// Labels anchors against `gts` and samples up to `max_positive` positives,
/// filling the rest of the minibatch with negatives.
pub fn sample_targets(
    anchors: &[BBox],
    gts: &[BBox],
    config: SamplingConfig,
    rng: &mut Rng,
) -> GenTargets {
    let labels = label_anchors(anchors, gts);
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    let mut positives = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match *l {
            AnchorLabel::Positive(g) => {
                pos.push(i);
                positives.push((i, encode_regression(&anchors[i], &gts[g])));
            }
            AnchorLabel::Negative => neg.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    pos.truncate(config.max_positive);
    neg.truncate(config.batch.saturating_sub(pos.len()));
    let mut sampled: Vec<(usize, usize)> = pos
        .iter()
        .map(|&i| (i, 1))
        .chain(neg.iter().map(|&i| (i, 0)))
        .collect();
    sampled.sort_unstable();
    GenTargets {
        sampled,
        positives,
        n_reg: anchors.len(),
    }
}

/// Generation loss averaged over the scenes of `out`:
/// `-(1/N_cls) sum log p(class) + (lambda_g/N_reg) sum_pos smooth_l1(t - t*)`.
pub fn gen_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &PgnOutput,
    targets: &[GenTargets],
    lambda_g: f64,
) -> Result<Var> {
    if targets.len() != out.scenes {
        return Err(Error::shape(
            "gen_loss",
            format!("{} targets for {} scenes", targets.len(), out.scenes),
        ));
    }
    let inv_s = 1.0 / out.scenes as f64;
    let mut idx = Vec::new();
    let mut weights = Vec::new();
    let mut rows = Vec::new();
    let mut codes = Vec::new();
    let mut row_w = Vec::new();
    for (s, t) in targets.iter().enumerate() {
        if t.sampled.is_empty() {
            return Err(Error::DegenerateBatch(
                "no anchors sampled for the generation loss".into(),
            ));
        }
        let base = s * out.anchors_per_scene;
        let w = -inv_s / t.sampled.len() as f64;
        for &(a, class) in &t.sampled {
            idx.push(2 * (base + a) + class);
            weights.push(T::c(w));
        }
        let w = lambda_g * inv_s / t.n_reg as f64;
        for (a, code) in &t.positives {
            rows.push(base + a);
            codes.extend(code.0.iter().map(|&v| T::c(v)));
            row_w.extend([T::c(w); 4]);
        }
    }
    let picked = tape.pick(out.log_probs, &idx)?;
    let wv = tape.constant(Tensor::vector(weights))?;
    let weighted = tape.mul(picked, wv)?;
    let cls = tape.sum(weighted)?;
    if rows.is_empty() {
        return Ok(cls);
    }
    let t = tape.gather_rows(out.reg, &rows)?;
    let target = tape.constant(Tensor::new(vec![rows.len(), 4], codes)?)?;
    let diff = tape.sub(t, target)?;
    let l = tape.smooth_l1(diff)?;
    let rw = tape.constant(Tensor::new(vec![rows.len(), 4], row_w)?)?;
    let lw = tape.mul(l, rw)?;
    let reg = tape.sum(lw)?;
    tape.add(cls, reg)
}

/// A candidate box with its pooled visual feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub anchor: usize,
    pub feature: Vec<f64>,
}

/// Indices of the `n` highest scores, descending, ties by lower index.
pub fn top_indices(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if n > scores.len() {
        return Err(Error::Contract(format!(
            "asked for {n} of {} candidates",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if n < order.len() {
        order.select_nth_unstable_by(n, cmp);
        order.truncate(n);
    }
    order.sort_unstable_by(cmp);
    Ok(order)
}

/// Top-`n` anchors by objectness, each decoded with its regression and clipped.
/// Features are left empty; see [`attach_features`].
pub fn select_top_proposals(
    objectness: &[f64],
    codes: &[RegressionCode],
    anchors: &[BBox],
    n: usize,
    img_w: f64,
    img_h: f64,
) -> Result<Vec<Proposal>> {
    if objectness.len() != anchors.len() || codes.len() != anchors.len() {
        return Err(Error::shape(
            "select_top_proposals",
            "score/code/anchor counts differ",
        ));
    }
    Ok(top_indices(objectness, n)?
        .into_iter()
        .map(|i| Proposal {
            bbox: decode_regression(&anchors[i], &codes[i]).clip(img_w, img_h),
            objectness: objectness[i],
            anchor: i,
            feature: Vec::new(),
        })
        .collect())
}

/// Overlap-weighted average pooling of the grid under `bbox` into `POOL x POOL`
/// sub-cells, concatenated row-major. Boxes narrower than a cell are widened
/// to one cell around their center.
pub fn roi_pool(grid: &FeatureGrid, bbox: &BBox) -> Vec<f64> {
    let s = grid.stride;
    let snap = |lo: f64, hi: f64, limit: f64| -> (f64, f64) {
        let (lo, hi) = (lo / s, hi / s);
        if hi - lo >= 1.0 {
            return (lo, hi);
        }
        let c = (0.5 * (lo + hi)).clamp(0.5, limit - 0.5);
        (c - 0.5, c + 0.5)
    };
    let (x1, x2) = snap(bbox.x1, bbox.x2, grid.grid_w as f64);
    let (y1, y2) = snap(bbox.y1, bbox.y2, grid.grid_h as f64);
    let d = grid.d_feat;
    let mut out = vec![0.0; POOL * POOL * d];
    for py in 0..POOL {
        let (sy1, sy2) = (
            y1 + (y2 - y1) * py as f64 / POOL as f64,
            y1 + (y2 - y1) * (py + 1) as f64 / POOL as f64,
        );
        for px in 0..POOL {
            let (sx1, sx2) = (
                x1 + (x2 - x1) * px as f64 / POOL as f64,
                x1 + (x2 - x1) * (px + 1) as f64 / POOL as f64,
            );
            let slot = &mut out[(py * POOL + px) * d..(py * POOL + px + 1) * d];
            let mut total = 0.0;
            for r in cell_span(sy1, sy2, grid.grid_h) {
                let oy = overlap(sy1, sy2, r as f64, r as f64 + 1.0);
                for c in cell_span(sx1, sx2, grid.grid_w) {
                    let w = oy * overlap(sx1, sx2, c as f64, c as f64 + 1.0);
                    if w <= 0.0 {
                        continue;
                    }
                    total += w;
                    slot.iter_mut()
                        .zip(grid.cell(r, c))
                        .for_each(|(o, &v)| *o += w * v);
                }
            }
            if total > 0.0 {
                slot.iter_mut().for_each(|o| *o /= total);
            }
        }
    }
    out
}

fn cell_span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let a = (lo.floor().max(0.0) as usize).min(n);
    let b = (hi.ceil().max(0.0) as usize).min(n);
    a..b
}

fn overlap(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    (a2.min(b2) - a1.max(b1)).max(0.0)
}

/// Pooled grid feature followed by the box's spatial encoding.
pub fn proposal_feature(grid: &FeatureGrid, bbox: &BBox) -> Vec<f64> {
    let mut f = roi_pool(grid, bbox);
    f.extend(spatial_augment(bbox, grid.img_w(), grid.img_h(), SPATIAL));
    f
}

pub fn attach_features(grid: &FeatureGrid, proposals: &mut [Proposal]) {
    for p in proposals {
        p.feature = proposal_feature(grid, &p.bbox);
    }
}

/// Overlap-weighted sum and weight of per-cell values under a box given in
/// cell units.
fn cell_sum(values: &[f64], grid: &FeatureGrid, x1: f64, y1: f64, x2: f64, y2: f64) -> (f64, f64) {
    let (mut acc, mut total) = (0.0, 0.0);
    for r in cell_span(y1, y2, grid.grid_h) {
        let oy = overlap(y1, y2, r as f64, r as f64 + 1.0);
        for c in cell_span(x1, x2, grid.grid_w) {
            let w = oy * overlap(x1, x2, c as f64, c as f64 + 1.0);
            acc += w * values[r * grid.grid_w + c];
            total += w;
        }
    }
    (acc, total)
}

/// Non-learned objectness from center-surround contrast: the mean of the
/// strongest attribute channel inside the box minus its mean over a one-cell
/// ring around it. Boxes that fit a salient region score highest. Serves as
/// an independent proposal source.
pub fn saliency_scores(grid: &FeatureGrid, anchors: &[BBox]) -> Vec<f64> {
    let attr = ATTR_CHANNELS.min(grid.d_feat);
    let cell: Vec<f64> = (0..grid.grid_h)
        .flat_map(|r| (0..grid.grid_w).map(move |c| (r, c)))
        .map(|(r, c)| {
            grid.cell(r, c)[..attr]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let s = grid.stride;
    let (gw, gh) = (grid.grid_w as f64, grid.grid_h as f64);
    anchors
        .iter()
        .map(|a| {
            let a = a.clip(grid.img_w(), grid.img_h());
            let (x1, y1, x2, y2) = (a.x1 / s, a.y1 / s, a.x2 / s, a.y2 / s);
            let (inner, inner_w) = cell_sum(&cell, grid, x1, y1, x2, y2);
            if inner_w <= 0.0 {
                return 0.0;
            }
            let (outer, outer_w) = cell_sum(
                &cell,
                grid,
                (x1 - 1.0).max(0.0),
                (y1 - 1.0).max(0.0),
                (x2 + 1.0).min(gw),
                (y2 + 1.0).min(gh),
            );
            let ring_w = outer_w - inner_w;
            let ring = if ring_w > 1e-9 {
                (outer - inner) / ring_w
            } else {
                0.0
            };
            inner / inner_w - ring
        })
        .collect()
}

/// Top-`n` anchors by saliency, unregressed and clipped.
pub fn saliency_proposals(grid: &FeatureGrid, anchors: &[BBox], n: usize) -> Result<Vec<Proposal>> {
    let scores = saliency_scores(grid, anchors);
    let zero = vec![RegressionCode::default(); anchors.len()];
    let mut props = select_top_proposals(&scores, &zero, anchors, n, grid.img_w(), grid.img_h())?;
    attach_features(grid, &mut props);
    Ok(props)
}

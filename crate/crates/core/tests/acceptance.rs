//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the report lines reach the test output. The
//! training-based criteria take about 90 minutes on one core; set
//! `QRC_ACCEPTANCE_QUICK=1` to run them on a small corpus instead (those lines
//! are tagged `[quick]` and do not measure the criterion).
//!
//! Criteria 1-5, 9 and 10 are properties of the implementation and fail the
//! run when they fail. Criteria 6-8 are empirical outcomes of training and are
//! reported as measured.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use qrc::cpn::{
    policy_term, predict_reward, reward_function, reward_loss, sample_k, RewardContext, Selection,
};
use qrc::eval::{ablation_suite, mean_std, run_cell, ubp, variant_configs, CellResult, Splits};
use qrc::geometry::{decode_regression, encode_regression, iou, AnchorConfig, BBox};
use qrc::gradsuite::{objective_config, objective_instance, run_suite, TOLERANCE};
use qrc::pgn::proposal_feature;
use qrc::pipeline::{
    build_objective, propose_all, train_on, BatchItem, Model, Phase, TrainConfig, TrainState,
};
use qrc::qrn::{encode_queries, qrn_forward, NormMode};
use qrc::synthdata::{
    featurize, generate_corpus, generate_scene, render_description, CorpusConfig, GroundingExample,
    SceneConfig, Split,
};
use qrc::tensor::{AdamConfig, AdamState, Group, Rng, Stream, Tape, Tensor};

struct Outcome {
    id: usize,
    title: &'static str,
    required: bool,
    pass: bool,
    detail: String,
}

fn quick() -> bool {
    std::env::var("QRC_ACCEPTANCE_QUICK").is_ok_and(|v| !v.is_empty() && v != "0")
}

fn report(o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    let kind = if o.required { "" } else { " (reported)" };
    println!(
        "criterion {:>2} {status}{kind}: {}: {}",
        o.id, o.title, o.detail
    );
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .is_test(true)
        .try_init();
    let start = Instant::now();
    let mut outcomes = Vec::new();
    let mut record = |batch: Vec<Outcome>| {
        for o in batch {
            report(&o);
            outcomes.push(o);
        }
    };
    record(vec![gradient_suite()]);
    record(vec![geometry_oracle()]);
    record(vec![reward_oracle()]);
    record(vec![gradient_routing()]);
    record(vec![bandit_convergence()]);
    record(vec![determinism()]);
    record(vec![sweep_harness()]);
    record(ablation_criteria());
    outcomes.sort_by_key(|o| o.id);
    println!(
        "\nacceptance summary ({:.0} s)",
        start.elapsed().as_secs_f64()
    );
    for o in &outcomes {
        report(o);
    }
    let failed: Vec<usize> = outcomes
        .iter()
        .filter(|o| o.required && !o.pass)
        .map(|o| o.id)
        .collect();
    if !failed.is_empty() {
        eprintln!("required criteria failed: {failed:?}");
        std::process::exit(1);
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let checks = run_suite(None, 0).expect("gradient suite runs");
    let elapsed = t.elapsed();
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty suite");
    let failing: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.op.as_str())
        .collect();
    Outcome {
        id: 1,
        title: "gradient suite",
        required: true,
        pass: failing.is_empty() && elapsed < Duration::from_secs(60),
        detail: format!(
            "{} checks, worst {} at {:.2e} (< {TOLERANCE:e}), failing {failing:?}, {:.1} s (< 60 s)",
            checks.len(),
            worst.op,
            worst.max_rel_error,
            elapsed.as_secs_f64()
        ),
    }
}

/// Boxes on a 1/8-pixel lattice, so counting lattice cells whose centers fall
/// inside a box measures its area exactly.
fn lattice_box(rng: &mut Rng, extent: usize) -> BBox {
    let steps = 8 * extent;
    let a = rng.below(steps - 8);
    let b = a + 8 + rng.below(steps - a - 8);
    let c = rng.below(steps - 8);
    let d = c + 8 + rng.below(steps - c - 8);
    BBox::new(
        a as f64 / 8.0,
        c as f64 / 8.0,
        b as f64 / 8.0,
        d as f64 / 8.0,
    )
    .expect("ordered corners")
}

fn raster_iou(a: &BBox, b: &BBox, extent: usize) -> f64 {
    let cells = 8 * extent;
    let inside = |bx: &BBox, x: f64, y: f64| x > bx.x1 && x < bx.x2 && y > bx.y1 && y < bx.y2;
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..cells {
        let y = (i as f64 + 0.5) / 8.0;
        for j in 0..cells {
            let x = (j as f64 + 0.5) / 8.0;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    inter as f64 / union as f64
}

fn geometry_oracle() -> Outcome {
    let mut rng = Rng::new(2);
    let mut round_trip: f64 = 0.0;
    for _ in 0..1000 {
        let anchor = BBox::from_center(
            rng.uniform(0.0, 128.0),
            rng.uniform(0.0, 128.0),
            rng.uniform(4.0, 96.0),
            rng.uniform(4.0, 96.0),
        );
        let target = BBox::from_center(
            anchor.cx() + rng.uniform(-20.0, 20.0),
            anchor.cy() + rng.uniform(-20.0, 20.0),
            anchor.w() * rng.uniform(0.3, 3.0),
            anchor.h() * rng.uniform(0.3, 3.0),
        );
        let back = decode_regression(&anchor, &encode_regression(&anchor, &target));
        for (u, v) in back.corners().iter().zip(target.corners()) {
            round_trip = round_trip.max((u - v).abs());
        }
    }
    let extent = 48;
    let mut iou_err: f64 = 0.0;
    let mut overlapping = 0;
    for _ in 0..200 {
        let a = lattice_box(&mut rng, extent);
        let b = lattice_box(&mut rng, extent);
        let r = raster_iou(&a, &b, extent);
        overlapping += (r > 0.0) as usize;
        iou_err = iou_err.max((iou(&a, &b) - r).abs());
    }
    Outcome {
        id: 2,
        title: "geometry oracle",
        required: true,
        pass: round_trip < 1e-5 && iou_err < 1e-3,
        detail: format!(
            "round trip max error {round_trip:.2e} over 1000 pairs (< 1e-5), IoU vs raster max error {iou_err:.2e} over 200 pairs, {overlapping} overlapping (< 1e-3)"
        ),
    }
}

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let area = |x: &BBox| (x.x2 - x.x1) * (x.y2 - x.y1);
    inter / (area(a) + area(b) - inter)
}

/// Reward recomputed from raw boxes: 1 for a proposal on the query object,
/// beta for one on another mentioned object only, 0 otherwise.
fn oracle_reward(
    top: &[usize],
    proposals: &[BBox],
    query: &BBox,
    mentioned: &[BBox],
    beta: f64,
) -> f64 {
    let (mut hits, mut context) = (0usize, 0usize);
    for &i in top {
        let p = &proposals[i];
        if oracle_iou(p, query) > 0.5 {
            hits += 1;
        } else if mentioned.iter().any(|g| oracle_iou(p, g) >= 0.5) {
            context += 1;
        }
    }
    (hits as f64 + beta * context as f64) / top.len() as f64
}

fn reward_oracle() -> Outcome {
    let mut rng = Rng::stream(3, Stream::Data);
    let mut mismatches = 0;
    let mut kinds = BTreeSet::new();
    for s in 0..1000u64 {
        let scene = generate_scene(&mut rng, &SceneConfig::default(), s).expect("scene");
        let phrases = render_description(&scene, &mut rng);
        let mentioned: Vec<BBox> = phrases.iter().map(|p| p.gt_box).collect();
        let query = mentioned[rng.below(mentioned.len())];
        let (w, h) = (scene.width(), scene.height());
        let n = 6 + rng.below(10);
        let proposals: Vec<BBox> = (0..n)
            .map(|_| {
                if rng.next_f64() < 0.6 {
                    let g = mentioned[rng.below(mentioned.len())];
                    let j = 0.25 * g.w().min(g.h());
                    g.translate(rng.uniform(-j, j), rng.uniform(-j, j))
                        .clip(w, h)
                } else {
                    BBox::from_center(
                        rng.uniform(8.0, w - 8.0),
                        rng.uniform(8.0, h - 8.0),
                        rng.uniform(6.0, 40.0),
                        rng.uniform(6.0, 40.0),
                    )
                    .clip(w, h)
                }
            })
            .collect();
        let k = 1 + rng.below(n);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let top = &order[..k];
        let beta = [0.1, 0.2, 0.4, 0.8][rng.below(4)];
        let ctx = RewardContext::new(&proposals, &query, &mentioned);
        let got = reward_function(top, &ctx, beta);
        let want = oracle_reward(top, &proposals, &query, &mentioned, beta);
        mismatches += (got != want) as usize;
        kinds.insert((want * 1e6).round() as i64);
    }
    let worked = worked_reward_case();
    Outcome {
        id: 3,
        title: "reward oracle",
        required: true,
        pass: mismatches == 0 && (worked - 0.48).abs() < 1e-12,
        detail: format!(
            "{mismatches} mismatches over 1000 scenes ({} distinct reward values), worked case {worked}",
            kinds.len()
        ),
    }
}

/// Four proposals on the query object, four on a context object, two on
/// empty background, beta 0.2 and K 10.
fn worked_reward_case() -> f64 {
    let query = BBox::new(10.0, 10.0, 40.0, 40.0).expect("box");
    let context = BBox::new(60.0, 60.0, 90.0, 90.0).expect("box");
    let mut proposals = Vec::new();
    for d in [0.0, 1.0, -1.0, 2.0] {
        proposals.push(query.translate(d, -d));
        proposals.push(context.translate(-d, d));
    }
    proposals.push(BBox::new(100.0, 0.0, 120.0, 20.0).expect("box"));
    proposals.push(BBox::new(0.0, 100.0, 20.0, 120.0).expect("box"));
    let ctx = RewardContext::new(&proposals, &query, &[query, context]);
    let all: Vec<usize> = (0..10).collect();
    reward_function(&all, &ctx, 0.2)
}

fn gradient_routing() -> Outcome {
    let (mut cross, mut rwd_own, mut j_own): (f64, f64, f64) = (0.0, f64::INFINITY, f64::INFINITY);
    let mut probes = 0;
    for seed in 0..20u64 {
        let (example, proposals) = objective_instance(seed).expect("instance");
        let config = TrainConfig {
            selection: if seed % 2 == 0 {
                Selection::Ranked
            } else {
                Selection::Sampled
            },
            ..objective_config(seed)
        };
        let model: Model<f64> = Model::new(&config).expect("model");
        let items: Vec<BatchItem> = (0..example.phrases.len())
            .map(|q| BatchItem {
                example: &example,
                query: q,
                proposals: Some(&proposals),
            })
            .collect();
        let mut tape = Tape::new();
        let mut rng = Rng::stream(seed, Stream::Sampling);
        let obj = build_objective(&mut tape, &model, &config, &items, Phase::Joint, &mut rng)
            .expect("objective");
        let (Some(l_rwd), Some(j)) = (obj.parts.l_rwd, obj.parts.j) else {
            continue;
        };
        probes += 1;
        let g_rwd = tape.backward(l_rwd, &model.store).expect("backward");
        let g_j = tape.backward(j, &model.store).expect("backward");
        cross = cross
            .max(g_rwd.max_abs(&model.store, Group::Pgn))
            .max(g_rwd.max_abs(&model.store, Group::Qrn))
            .max(g_j.max_abs(&model.store, Group::Pgn))
            .max(g_j.max_abs(&model.store, Group::Cpn));
        rwd_own = rwd_own.min(g_rwd.max_abs(&model.store, Group::Cpn));
        j_own = j_own.min(g_j.max_abs(&model.store, Group::Qrn));
    }
    Outcome {
        id: 4,
        title: "gradient routing",
        required: true,
        pass: probes >= 10 && cross == 0.0 && rwd_own > 0.0 && j_own > 0.0,
        detail: format!(
            "{probes} probes, max cross-group gradient {cross:e}; smallest own-group max |grad| L_rwd->cpn {rwd_own:.2e}, J->qrn {j_own:.2e}"
        ),
    }
}

const BANDIT_STEPS: usize = 2000;

/// One query, three fixed proposals (its own object, another mentioned
/// object, empty background). Only the policy term and the reward-prediction
/// loss train; no classification supervision is involved.
fn bandit_run(seed: u64) -> (bool, Option<usize>, usize) {
    let mut data_rng = Rng::stream(seed, Stream::Data);
    let (scene, phrases) = loop {
        let id = data_rng.next_u64();
        let scene = generate_scene(&mut data_rng, &SceneConfig::default(), id).expect("scene");
        let phrases = render_description(&scene, &mut data_rng);
        if phrases.len() >= 2 {
            break (scene, phrases);
        }
    };
    let mentioned: Vec<BBox> = phrases.iter().map(|p| p.gt_box).collect();
    let background = (0..200)
        .map(|i| {
            let (x, y) = ((i % 14) as f64 * 8.0, (i / 14) as f64 * 8.0);
            BBox::new(x, y, x + 16.0, y + 16.0).expect("box")
        })
        .find(|b| {
            b.is_within(scene.width(), scene.height())
                && scene.objects.iter().all(|o| iou(b, &o.bbox) == 0.0)
        })
        .expect("an empty patch");
    let mut proposals = vec![mentioned[0], mentioned[1], background];
    let mut order = [0usize, 1, 2];
    Rng::stream(seed, Stream::Sampling)
        .substream(7)
        .shuffle(&mut order);
    proposals = order.iter().map(|&i| proposals[i]).collect();
    let target = order.iter().position(|&i| i == 0).expect("query proposal");
    let ctx = RewardContext::new(&proposals, &mentioned[0], &mentioned);

    let config = TrainConfig {
        m: 32,
        d_q: 16,
        d_embed: 16,
        n: 3,
        k: 1,
        seed,
        ..TrainConfig::default()
    };
    let grid = featurize(&scene);
    let feats: Vec<Vec<f64>> = proposals
        .iter()
        .map(|b| proposal_feature(&grid, b))
        .collect();
    let d_v = feats[0].len();
    let flat: Vec<f64> = feats.iter().flatten().copied().collect();
    let mut model: Model<f64> = Model::new(&config).expect("model");
    let adam = AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    };
    let mut opt_q = AdamState::new(&model.store, Group::Qrn, adam);
    let mut opt_c = AdamState::new(&model.store, Group::Cpn, adam);
    let mut rng = Rng::stream(seed, Stream::Sampling);
    let tokens = phrases[0].tokens.as_slice();
    let mut first_hit = None;
    let mut initial_rank = 0;
    let mut ranked_first = false;
    for step in 0..=BANDIT_STEPS {
        let mut tape = Tape::new();
        tape.freeze(Group::Pgn);
        let q = encode_queries(&mut tape, &model.store, &model.qrn, &[tokens]).expect("query");
        let features = Tensor::new(vec![3, d_v], flat.clone()).expect("features");
        let (out, _) = qrn_forward(
            &mut tape,
            &model.store,
            &model.qrn,
            q,
            features,
            3,
            NormMode::Batch,
        )
        .expect("forward");
        let p = out.probs(&tape, 0);
        let rank = p.iter().filter(|&&x| x > p[target]).count();
        if step == 0 {
            initial_rank = rank + 1;
        }
        if rank == 0 && first_hit.is_none() {
            first_hit = Some(step);
        }
        if step == BANDIT_STEPS {
            ranked_first = rank == 0;
            break;
        }
        let pick = sample_k(&p, 1, &mut rng).expect("draw");
        let r = reward_function(&pick, &ctx, config.beta);
        let qd = tape.detach(q).expect("detach");
        let pooled = Tensor::new(vec![1, d_v], feats[pick[0]].clone()).expect("pooled");
        let f = predict_reward(&mut tape, &model.store, &model.cpn, pooled, qd).expect("F");
        let fv = tape.value(f).data()[0];
        let l_rwd = reward_loss(&mut tape, f, &[r], 1.0).expect("L_rwd");
        let j = policy_term(&mut tape, out.log_p, &[pick], &[fv], 1.0).expect("J");
        let total = tape.add(j, l_rwd).expect("sum");
        let grads = tape.backward(total, &model.store).expect("backward");
        opt_q.step(&mut model.store, &grads).expect("qrn update");
        opt_c.step(&mut model.store, &grads).expect("cpn update");
    }
    (ranked_first, first_hit, initial_rank)
}

fn bandit_convergence() -> Outcome {
    let t = Instant::now();
    let runs: Vec<(bool, Option<usize>, usize)> = (0..10).map(bandit_run).collect();
    let elapsed = t.elapsed();
    let wins = runs.iter().filter(|r| r.0).count();
    let hits: Vec<String> = runs
        .iter()
        .map(|(_, h, r0)| match h {
            Some(s) => format!("{s}(from {r0})"),
            None => format!("-(from {r0})"),
        })
        .collect();
    Outcome {
        id: 5,
        title: "policy-gradient bandit",
        required: true,
        pass: wins >= 9 && elapsed < Duration::from_secs(30),
        detail: format!(
            "query proposal ranked first after {BANDIT_STEPS} steps in {wins}/10 seeds (>= 9); first step at rank 1 per seed {hits:?}; {:.1} s (< 30 s)",
            elapsed.as_secs_f64()
        ),
    }
}

/// Configuration of the training-based criteria. Departures from the
/// library defaults: a larger learning rate, regression on the matched
/// proposal only, and sampled policy actions.
fn acceptance_base() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        reg_positive_only: true,
        selection: Selection::Sampled,
        epochs: [2, 6, 8],
        ..TrainConfig::default()
    }
}

struct Scale {
    corpus: usize,
    seeds: Vec<u64>,
    base: TrainConfig,
    tag: &'static str,
}

fn scale() -> Scale {
    if quick() {
        Scale {
            corpus: 1500,
            seeds: vec![0, 1],
            base: TrainConfig {
                epochs: [1, 2, 2],
                ..acceptance_base()
            },
            tag: "[quick] ",
        }
    } else {
        Scale {
            corpus: 10_000,
            seeds: vec![0, 1, 2, 3, 4],
            base: acceptance_base(),
            tag: "",
        }
    }
}

fn untrained_ubp(config: &TrainConfig, test: &[&GroundingExample]) -> f64 {
    let model = Model::<f32>::new(config).expect("model");
    let props = propose_all(&model, config, test).expect("proposals");
    let gts: Vec<Vec<BBox>> = test.iter().map(|e| e.gt_boxes()).collect();
    ubp(&props, &gts).expect("ubp")
}

fn fmt_cells(cells: &[CellResult]) -> String {
    cells
        .iter()
        .map(|c| {
            let (u, _) = mean_std(&c.ubps);
            format!("{} {:.4}+-{:.4} (ubp {:.4})", c.name, c.mean, c.std, u)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn ablation_criteria() -> Vec<Outcome> {
    let s = scale();
    let corpus = generate_corpus(
        7,
        s.corpus,
        &CorpusConfig::default(),
        &AnchorConfig::default(),
    )
    .expect("corpus");
    let splits = Splits::new(&corpus);

    let t = Instant::now();
    let cells: Vec<CellResult> = variant_configs(&s.base)
        .iter()
        .map(|(n, c)| run_cell(n, c, &splits, &s.seeds))
        .collect();
    let elapsed = t.elapsed();
    let m: Vec<f64> = cells.iter().map(|c| c.mean).collect();
    let failed = cells.iter().any(|c| c.failed.is_some());
    let ordered = m[3] >= m[2] && m[2] >= m[1] && m[1] >= m[0];
    let gap = m[3] - m[0];
    let c6 = Outcome {
        id: 6,
        title: "ablation ordering",
        required: false,
        pass: !failed && ordered && gap >= 0.05 && elapsed < Duration::from_secs(7200),
        detail: format!(
            "{}{} examples, {} seeds: {}; full - retrieval {:+.2} points (>= 5); full >= PGN+QRN {}, PGN+QRN >= QRN-only {}, QRN-only >= retrieval {}; {:.0} s (< 7200 s)",
            s.tag,
            corpus.len(),
            s.seeds.len(),
            fmt_cells(&cells),
            100.0 * gap,
            m[3] >= m[2],
            m[2] >= m[1],
            m[1] >= m[0],
            elapsed.as_secs_f64()
        ),
    };

    let full = &cells[3];
    let untrained: Vec<f64> = full
        .seeds
        .iter()
        .map(|&seed| {
            untrained_ubp(
                &TrainConfig {
                    seed,
                    ..s.base.clone()
                },
                &splits.test,
            )
        })
        .collect();
    let (trained_mean, _) = mean_std(&full.ubps);
    let (untrained_mean, _) = mean_std(&untrained);
    let c7 = Outcome {
        id: 7,
        title: "proposal quality",
        required: false,
        pass: !full.ubps.is_empty() && trained_mean - untrained_mean >= 0.10,
        detail: format!(
            "{}top-{} UBP trained {:.4} vs untrained {:.4}: {:+.2} points (>= 10); per seed trained {:?} untrained {:?}",
            s.tag,
            s.base.n,
            trained_mean,
            untrained_mean,
            100.0 * (trained_mean - untrained_mean),
            full.ubps.iter().map(|u| format!("{u:.4}")).collect::<Vec<_>>(),
            untrained.iter().map(|u| format!("{u:.4}")).collect::<Vec<_>>()
        ),
    };

    let small = TrainConfig {
        n: 8,
        ..s.base.clone()
    };
    let variants = variant_configs(&small);
    let retrieval = run_cell(&variants[0].0, &variants[0].1, &splits, &s.seeds);
    let full8 = run_cell(&variants[3].0, &variants[3].1, &splits, &s.seeds);
    let n = full8.accuracies.len().min(retrieval.ubps.len());
    let wins = (0..n)
        .filter(|&i| full8.accuracies[i] > retrieval.ubps[i])
        .count();
    let beats_accuracy = (0..n.min(retrieval.accuracies.len()))
        .filter(|&i| full8.accuracies[i] > retrieval.accuracies[i])
        .count();
    let ubp_ok = retrieval.ubps.iter().chain(&full8.ubps).all(|&u| u < 0.9);
    let need = if quick() { 1 } else { 3 };
    let c8 = Outcome {
        id: 8,
        title: "regression beyond the retrieval bound",
        required: false,
        pass: ubp_ok && wins >= need,
        detail: format!(
            "{}N=8: full accuracy {:?}, retrieval-only UBP {:?}; full above the retrieval bound in {wins}/{n} seeds (>= {need}); raw UBP < 0.9 {ubp_ok}; full above retrieval-only accuracy ({:?}) in {beats_accuracy}/{n}",
            s.tag,
            full8.accuracies.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>(),
            retrieval.ubps.iter().map(|u| format!("{u:.4}")).collect::<Vec<_>>(),
            retrieval.accuracies.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>(),
        ),
    };
    vec![c6, c7, c8]
}

/// Corpus generation for a few hundred examples, where the anchor coverage
/// of a sample can dip below the large-corpus guarantee.
fn small_corpus(seed: u64, n: usize) -> Vec<GroundingExample> {
    let config = CorpusConfig {
        min_anchor_coverage: 0.9,
        ..CorpusConfig::default()
    };
    generate_corpus(seed, n, &config, &AnchorConfig::default()).expect("corpus")
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        m: 32,
        d_q: 16,
        d_embed: 16,
        pgn_hidden: 16,
        n: 8,
        k: 3,
        batch_size: 16,
        lr: 1e-3,
        epochs: [1, 1, 1],
        seed,
        ..TrainConfig::default()
    }
}

fn determinism() -> Outcome {
    let corpus = small_corpus(11, 240);
    let train: Vec<&GroundingExample> = corpus
        .iter()
        .filter(|e| Split::of(e.scene.id) == Split::Train)
        .collect();
    let test: Vec<&GroundingExample> = corpus
        .iter()
        .filter(|e| Split::of(e.scene.id) == Split::Test)
        .collect();
    let mut identical = true;
    let mut steps = 0;
    for selection in [Selection::Ranked, Selection::Sampled] {
        let config = TrainConfig {
            selection,
            ..small_config(5)
        };
        let run = || {
            let out = train_on(TrainState::new(&config).expect("state"), &train, |_| Ok(()))
                .expect("training");
            let report = qrc::eval::evaluate(&out.state.model, &config, &test).expect("eval");
            (
                serde_json::to_string(&out.log).expect("log"),
                serde_json::to_string(&report).expect("report"),
                out.log.len(),
            )
        };
        let (log_a, rep_a, n) = run();
        let (log_b, rep_b, _) = run();
        identical &= log_a == log_b && rep_a == rep_b;
        steps += n;
    }
    Outcome {
        id: 9,
        title: "determinism",
        required: true,
        pass: identical,
        detail: format!(
            "two runs each of ranked and sampled selection, {steps} logged steps per run pair: loss logs and reports identical {identical}"
        ),
    }
}

fn sweep_harness() -> Outcome {
    let corpus = small_corpus(13, 160);
    let base = small_config(0);
    let t = Instant::now();
    let table = ablation_suite(&base, &corpus, &[], &[0]);
    let json = serde_json::to_string(&table).expect("table json");
    let back: qrc::eval::AblationTable = serde_json::from_str(&json).expect("table parses");
    let md = table.to_markdown();
    let names: Vec<&str> = table.sweeps.iter().map(|c| c.name.as_str()).collect();
    let complete = table.sweeps.len() == 13
        && table
            .sweeps
            .iter()
            .all(|c| c.failed.is_none() && c.n_seeds() == 1 && c.mean.is_finite());
    let rows = md.lines().filter(|l| l.starts_with("| ")).count();
    let well_formed =
        back == table && rows == 14 && md.lines().all(|l| l.is_empty() || l.starts_with('|'));
    Outcome {
        id: 10,
        title: "sweep harness",
        required: true,
        pass: complete && well_formed,
        detail: format!(
            "{} cells {names:?}, all ran {complete}, table well formed {well_formed} ({:.0} s)",
            table.sweeps.len(),
            t.elapsed().as_secs_f64()
        ),
    }
}

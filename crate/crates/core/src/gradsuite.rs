//! Finite-difference verification of every differentiable operation and of
//! the full training objective, in 64-bit arithmetic.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::pipeline::{
    build_objective, BatchItem, Components, Model, Objective, Phase, ProposalSource, TrainConfig,
};
use crate::synthdata::{generate_scene, render_description, GroundingExample, SceneConfig};
use crate::tensor::{
    finite_diff_grad, lstm_step, relative_error, Activation, Group, ParamStore, Rng, Stream, Tape,
    Tensor, Var,
};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-6;
/// Random points per elementary operation.
pub const POINTS: usize = 50;
/// Random instances of the full objective.
pub const OBJECTIVE_POINTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub points: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// How inputs are drawn for an operation.
#[derive(Clone, Copy)]
enum Domain {
    /// Standard normal, nudged away from the given kinks.
    Normal(&'static [f64]),
    /// Uniform on `[0.5, 2]`.
    Positive,
}

struct OpSpec {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    domain: Domain,
    build: Build,
}

const NO_KINKS: &[f64] = &[];

fn ops() -> Vec<OpSpec> {
    fn s(shapes: &'static [&'static [usize]]) -> &'static [&'static [usize]] {
        shapes
    }
    vec![
        OpSpec {
            name: "matmul",
            shapes: s(&[&[3, 4], &[4, 2]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.matmul(v[0], v[1]),
        },
        OpSpec {
            name: "add_row",
            shapes: s(&[&[3, 4], &[4]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.add_row(v[0], v[1]),
        },
        OpSpec {
            name: "linear",
            shapes: s(&[&[3, 4], &[4, 2], &[2]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.linear(v[0], v[1], v[2]),
        },
        OpSpec {
            name: "add",
            shapes: s(&[&[2, 3], &[2, 3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.add(v[0], v[1]),
        },
        OpSpec {
            name: "sub",
            shapes: s(&[&[2, 3], &[2, 3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.sub(v[0], v[1]),
        },
        OpSpec {
            name: "mul",
            shapes: s(&[&[2, 3], &[2, 3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.mul(v[0], v[1]),
        },
        OpSpec {
            name: "scale",
            shapes: s(&[&[2, 3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.scale(v[0], -1.7),
        },
        OpSpec {
            name: "relu",
            shapes: s(&[&[2, 5]]),
            domain: Domain::Normal(&[0.0]),
            build: |t, v| t.activate(Activation::Relu, v[0]),
        },
        OpSpec {
            name: "sigmoid",
            shapes: s(&[&[2, 5]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.activate(Activation::Sigmoid, v[0]),
        },
        OpSpec {
            name: "tanh",
            shapes: s(&[&[2, 5]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.activate(Activation::Tanh, v[0]),
        },
        OpSpec {
            name: "softmax",
            shapes: s(&[&[2, 5]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.activate(Activation::Softmax, v[0]),
        },
        OpSpec {
            name: "log_softmax",
            shapes: s(&[&[3, 4]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.log_softmax(v[0]),
        },
        OpSpec {
            name: "exp",
            shapes: s(&[&[2, 3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.exp(v[0]),
        },
        OpSpec {
            name: "log",
            shapes: s(&[&[2, 3]]),
            domain: Domain::Positive,
            build: |t, v| t.log(v[0]),
        },
        OpSpec {
            name: "square",
            shapes: s(&[&[2, 3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.square(v[0]),
        },
        OpSpec {
            name: "smooth_l1",
            shapes: s(&[&[2, 6]]),
            domain: Domain::Normal(&[-1.0, 1.0]),
            build: |t, v| t.smooth_l1(v[0]),
        },
        OpSpec {
            name: "sum",
            shapes: s(&[&[2, 3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.sum(v[0]),
        },
        OpSpec {
            name: "mean",
            shapes: s(&[&[2, 3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.mean(v[0]),
        },
        OpSpec {
            name: "mean_rows",
            shapes: s(&[&[4, 3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.mean_rows(v[0]),
        },
        OpSpec {
            name: "concat_cols",
            shapes: s(&[&[2, 3], &[2, 2]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.concat_cols(&[v[0], v[1]]),
        },
        OpSpec {
            name: "slice_cols",
            shapes: s(&[&[3, 5]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.slice_cols(v[0], 1, 4),
        },
        OpSpec {
            name: "gather_rows",
            shapes: s(&[&[4, 3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]),
        },
        OpSpec {
            name: "pick",
            shapes: s(&[&[3, 4]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.pick(v[0], &[1, 5, 5, 11]),
        },
        OpSpec {
            name: "reshape",
            shapes: s(&[&[2, 6]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| t.reshape(v[0], &[3, 4]),
        },
        OpSpec {
            name: "batch_norm_train",
            shapes: s(&[&[5, 3], &[3], &[3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
        },
        OpSpec {
            name: "batch_norm_eval",
            shapes: s(&[&[5, 3], &[3], &[3]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| {
                t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
            },
        },
        OpSpec {
            name: "lstm_step",
            shapes: s(&[&[2, 3], &[2, 4], &[2, 4], &[7, 16], &[16]]),
            domain: Domain::Normal(NO_KINKS),
            build: |t, v| {
                let (h, c) = lstm_step(t, v[0], v[1], v[2], v[3], v[4])?;
                t.concat_cols(&[h, c])
            },
        },
    ]
}

/// Names accepted by [`check_op`].
pub fn op_names() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = ops().iter().map(|o| o.name).collect();
    v.push("objective");
    v
}

fn draw(domain: Domain, n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| match domain {
            Domain::Positive => rng.uniform(0.5, 2.0),
            Domain::Normal(kinks) => {
                let mut x = rng.normal();
                for &k in kinks {
                    if (x - k).abs() < 0.05 {
                        x = k + if x >= k { 0.05 } else { -0.05 };
                    }
                }
                x
            }
        })
        .collect()
}

/// `sum(w * op(inputs))` with fixed random weights `w`, so every output entry
/// contributes to the checked gradient.
fn weighted_output(
    tape: &mut Tape<f64>,
    build: Build,
    inputs: &[Var],
    weights: &[f64],
) -> Result<Var> {
    let y = build(tape, inputs)?;
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(Tensor::new(shape, weights[..tape.value(y).len()].to_vec())?)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check_elementary(spec: &OpSpec, points: usize, seed: u64) -> Result<OpCheck> {
    let mut rng = Rng::stream(seed, Stream::Sampling).substream(0x6ad);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let inputs: Vec<Tensor<f64>> = spec
            .shapes
            .iter()
            .map(|s| Tensor::new(s.to_vec(), draw(spec.domain, s.iter().product(), &mut rng)))
            .collect::<Result<_>>()?;
        let weights = draw(Domain::Normal(NO_KINKS), 256, &mut rng);
        let mut store = ParamStore::new();
        let ids: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| store.add(&format!("probe.x{i}"), x.clone()))
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids
            .iter()
            .map(|&id| tape.param(&store, id))
            .collect::<Result<_>>()?;
        let loss = weighted_output(&mut tape, spec.build, &vars, &weights)?;
        let grads = tape.backward(loss, &store)?;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (k, x) in inputs.iter().enumerate() {
            analytic.extend_from_slice(grads.get(ids[k]).data());
            let fd = finite_diff_grad(
                |probe| {
                    let mut t = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, v)| t.constant(if j == k { probe.clone() } else { v.clone() }))
                        .collect::<Result<_>>()
                        .expect("finite inputs");
                    let l = weighted_output(&mut t, spec.build, &vars, &weights)
                        .expect("forward succeeded once");
                    t.scalar(l)
                },
                x,
                STEP,
            );
            numeric.extend_from_slice(fd.data());
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(OpCheck {
        op: spec.name.to_string(),
        points,
        max_rel_error: worst,
    })
}

/// Small configuration for checking the complete objective: four proposals
/// per query, narrow layers.
pub fn objective_config(seed: u64) -> TrainConfig {
    TrainConfig {
        m: 8,
        d_q: 4,
        d_embed: 4,
        pgn_hidden: 4,
        n: 4,
        k: 2,
        seed,
        proposal_source: ProposalSource::Learned,
        ..TrainConfig::default()
    }
}

/// A scene with its description and four proposals around the first object:
/// its own box, two jittered copies and one unrelated box.
pub fn objective_instance(seed: u64) -> Result<(GroundingExample, Vec<BBox>)> {
    let mut rng = Rng::stream(seed, Stream::Data);
    let id = rng.next_u64();
    let scene = generate_scene(&mut rng, &SceneConfig::default(), id)?;
    let phrases = render_description(&scene, &mut rng);
    let gt = phrases[0].gt_box;
    let proposals = vec![
        gt.translate(1.0, -1.0).clip(scene.width(), scene.height()),
        gt,
        gt.translate(-3.0, 2.0).clip(scene.width(), scene.height()),
        BBox::new(0.0, 0.0, 30.0, 30.0)?,
    ];
    Ok((GroundingExample { scene, phrases }, proposals))
}

/// The losses whose gradient a group receives: the generator loss for the
/// proposal network, classification, regression and the policy term for the
/// query network, the reward-prediction loss for the context network.
fn routed_loss(tape: &mut Tape<f64>, parts: &Components, group: Group, lambda: f64) -> Result<Var> {
    let mut terms = Vec::new();
    match group {
        Group::Pgn => terms.extend(parts.l_gen),
        Group::Qrn => {
            terms.extend(parts.l_cls);
            if let Some(r) = parts.l_reg {
                terms.push(tape.scale(r, lambda)?);
            }
            terms.extend(parts.j);
        }
        Group::Cpn => terms.extend(parts.l_rwd),
        Group::Other => {}
    }
    let mut acc = tape.constant(Tensor::scalar(0.0))?;
    for t in terms {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Gradient of the joint objective, as used for training, against central
/// differences of each group's routed losses. Values that cross groups only
/// as detached inputs (the query embedding fed to the context network, the
/// predicted reward weighting the policy term) are held fixed by the routing,
/// so the query network is checked with the computed reward as policy weight
/// and the other groups with the predicted one.
pub fn check_objective(points: usize, seed: u64) -> Result<OpCheck> {
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let (example, proposals) = objective_instance(seed.wrapping_add(p as u64))?;
        let items = [
            BatchItem {
                example: &example,
                query: 0,
                proposals: Some(&proposals),
            },
            BatchItem {
                example: &example,
                query: example.phrases.len() - 1,
                proposals: Some(&proposals),
            },
        ];
        for (use_raw_reward, groups) in [
            (false, &[Group::Pgn, Group::Cpn][..]),
            (true, &[Group::Qrn][..]),
        ] {
            let config = TrainConfig {
                use_raw_reward,
                ..objective_config(seed.wrapping_add(p as u64))
            };
            let model: Model<f64> = Model::new(&config)?;
            let eval = |m: &Model<f64>| -> Result<(Tape<f64>, Objective<f64>)> {
                let mut tape = Tape::new();
                let mut rng = Rng::stream(config.seed, Stream::Sampling);
                let obj = build_objective(&mut tape, m, &config, &items, Phase::Joint, &mut rng)?;
                Ok((tape, obj))
            };
            let (tape, obj) = eval(&model)?;
            let grads = tape.backward(obj.total, &model.store)?;
            for &group in groups {
                let mut analytic = Vec::new();
                let mut numeric = Vec::new();
                for id in model.store.ids_in(group) {
                    if !model.store.param(id).trainable {
                        continue;
                    }
                    analytic.extend_from_slice(grads.get(id).data());
                    let mut probe = model.clone();
                    let fd = finite_diff_grad(
                        |x| {
                            probe.store.set(id, x.clone()).expect("same shape");
                            let (mut t, o) = eval(&probe).expect("forward succeeded once");
                            let l = routed_loss(&mut t, &o.parts, group, config.lambda)
                                .expect("scalar terms");
                            t.scalar(l)
                        },
                        model.store.get(id),
                        STEP,
                    );
                    numeric.extend_from_slice(fd.data());
                }
                let err = relative_error(&analytic, &numeric);
                log::debug!("objective {} rel err {err:.3e}", group.name());
                worst = worst.max(err);
            }
        }
    }
    Ok(OpCheck {
        op: "objective".into(),
        points,
        max_rel_error: worst,
    })
}
pub fn check_op(name: &str, seed: u64) -> Result<OpCheck> {
    if name == "objective" {
        return check_objective(OBJECTIVE_POINTS, seed);
    }
    let spec = ops().into_iter().find(|o| o.name == name).ok_or_else(|| {
        Error::Config(format!(
            "unknown operation `{name}`; known: {}",
            op_names().join(", ")
        ))
    })?;
    check_elementary(&spec, POINTS, seed)
}

/// Every operation, or only `only` when given.
pub fn run_suite(only: Option<&str>, seed: u64) -> Result<Vec<OpCheck>> {
    match only {
        Some(name) => Ok(vec![check_op(name, seed)?]),
        None => op_names().into_iter().map(|n| check_op(n, seed)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementary_ops_pass_at_a_few_points() {
        for spec in ops() {
            let r = check_elementary(&spec, 3, 9).unwrap();
            assert!(r.passed(), "{} rel err {}", r.op, r.max_rel_error);
        }
    }

    #[test]
    fn joint_objective_matches_differences() {
        let r = check_objective(1, 4).unwrap();
        assert!(r.passed(), "rel err {}", r.max_rel_error);
    }

    #[test]
    fn unknown_op_is_reported() {
        assert!(matches!(check_op("conv2d", 0), Err(Error::Config(_))));
    }
}

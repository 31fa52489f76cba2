use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pipeline::{train_on, ProposalSource, TrainConfig, TrainState};
use crate::synthdata::{GroundingExample, Split};

use super::report::{evaluate, EvalReport};

/// The four model variants, from plain retrieval to the full model.
pub fn variant_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let retrieval = TrainConfig {
        proposal_source: ProposalSource::Saliency,
        disable_regression: true,
        disable_cpn: true,
        ..base.clone()
    };
    let qrn_only = TrainConfig {
        proposal_source: ProposalSource::Saliency,
        disable_regression: false,
        disable_cpn: true,
        ..base.clone()
    };
    let pgn_qrn = TrainConfig {
        proposal_source: ProposalSource::Learned,
        disable_regression: false,
        disable_cpn: true,
        ..base.clone()
    };
    let full = TrainConfig {
        proposal_source: ProposalSource::Learned,
        disable_regression: false,
        disable_cpn: false,
        ..base.clone()
    };
    vec![
        ("retrieval-only".into(), retrieval),
        ("QRN-only".into(), qrn_only),
        ("PGN+QRN".into(), pgn_qrn),
        ("full".into(), full),
    ]
}

pub const SWEEP_LAMBDA: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 10.0];
pub const SWEEP_M: [usize; 4] = [128, 256, 512, 1024];
pub const SWEEP_BETA: [f64; 4] = [0.1, 0.2, 0.4, 0.8];

/// One-factor sweeps over the regression weight, fused width and context reward.
pub fn sweep_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut out = Vec::new();
    for l in SWEEP_LAMBDA {
        out.push((
            format!("lambda={l}"),
            TrainConfig {
                lambda: l,
                ..base.clone()
            },
        ));
    }
    for m in SWEEP_M {
        out.push((format!("m={m}"), TrainConfig { m, ..base.clone() }));
    }
    for b in SWEEP_BETA {
        out.push((
            format!("beta={b}"),
            TrainConfig {
                beta: b,
                ..base.clone()
            },
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub ubps: Vec<f64>,
    /// NaN (written as `null`) when no seed finished.
    #[serde(deserialize_with = "nan_if_null")]
    pub mean: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub std: f64,
    /// Training time summed over seeds, in seconds.
    pub seconds: f64,
    /// Set when any seed failed; the other fields then cover the seeds that ran.
    pub failed: Option<String>,
}

fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl CellResult {
    pub fn n_seeds(&self) -> usize {
        self.accuracies.len()
    }
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Training and evaluation subsets of a corpus.
pub struct Splits<'a> {
    pub train: Vec<&'a GroundingExample>,
    pub test: Vec<&'a GroundingExample>,
}

impl<'a> Splits<'a> {
    pub fn new(corpus: &'a [GroundingExample]) -> Self {
        Splits {
            train: corpus
                .iter()
                .filter(|e| Split::of(e.scene.id) == Split::Train)
                .collect(),
            test: corpus
                .iter()
                .filter(|e| Split::of(e.scene.id) == Split::Test)
                .collect(),
        }
    }
}

/// Trains `config` on the training split and evaluates on the test split.
pub fn train_and_evaluate(config: &TrainConfig, splits: &Splits) -> Result<(EvalReport, Duration)> {
    let start = Instant::now();
    let outcome = train_on(TrainState::new(config)?, &splits.train, |_| Ok(()))?;
    let report = evaluate(&outcome.state.model, config, &splits.test)?;
    Ok((report, start.elapsed()))
}

/// Runs one table cell over `seeds`.
pub fn run_cell(name: &str, config: &TrainConfig, splits: &Splits, seeds: &[u64]) -> CellResult {
    let mut cell = CellResult {
        name: name.to_string(),
        seeds: Vec::new(),
        accuracies: Vec::new(),
        ubps: Vec::new(),
        mean: f64::NAN,
        std: f64::NAN,
        seconds: 0.0,
        failed: None,
    };
    for &seed in seeds {
        let c = TrainConfig {
            seed,
            ..config.clone()
        };
        match train_and_evaluate(&c, splits) {
            Ok((r, t)) => {
                log::info!(
                    "{name} seed {seed}: accuracy {:.4}, ubp {:.4}",
                    r.accuracy,
                    r.ubp
                );
                cell.seeds.push(seed);
                cell.accuracies.push(r.accuracy);
                cell.ubps.push(r.ubp);
                cell.seconds += t.as_secs_f64();
            }
            Err(e) => {
                log::error!("{name} seed {seed} failed: {e}");
                cell.failed = Some(format!("seed {seed}: {e}"));
            }
        }
    }
    (cell.mean, cell.std) = mean_std(&cell.accuracies);
    cell
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub variants: Vec<CellResult>,
    pub sweeps: Vec<CellResult>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        for (title, rows) in [("variant", &self.variants), ("sweep", &self.sweeps)] {
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(
                s,
                "| {title} | seeds | accuracy mean | accuracy std | ubp mean | status |"
            );
            let _ = writeln!(s, "|---|---|---|---|---|---|");
            for r in rows {
                let (ubp, _) = mean_std(&r.ubps);
                let status = r
                    .failed
                    .as_deref()
                    .map_or("ok".to_string(), |e| format!("failed ({e})"));
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.4} | {:.4} | {:.4} | {} |",
                    r.name,
                    r.n_seeds(),
                    r.mean,
                    r.std,
                    ubp,
                    status
                );
            }
            s.push('\n');
        }
        s
    }
}

/// The four variants over `variant_seeds` and the thirteen sweep cells over
/// `sweep_seeds`; an empty seed list leaves its part of the table empty.
pub fn ablation_suite(
    base: &TrainConfig,
    corpus: &[GroundingExample],
    variant_seeds: &[u64],
    sweep_seeds: &[u64],
) -> AblationTable {
    let splits = Splits::new(corpus);
    AblationTable {
        variants: variant_configs(base)
            .iter()
            .filter(|_| !variant_seeds.is_empty())
            .map(|(n, c)| run_cell(n, c, &splits, variant_seeds))
            .collect(),
        sweeps: sweep_configs(base)
            .iter()
            .filter(|_| !sweep_seeds.is_empty())
            .map(|(n, c)| run_cell(n, c, &splits, sweep_seeds))
            .collect(),
    }
}

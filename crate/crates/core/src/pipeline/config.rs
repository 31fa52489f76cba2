use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cpn::Selection;
use crate::error::{Error, Result};
use crate::geometry::AnchorConfig;
use crate::pgn::{PgnConfig, SamplingConfig};
use crate::qrn::QrnConfig;
use crate::synthdata::{Vocab, FEATURE_DIM};

/// Where proposals come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalSource {
    /// The trained generation network.
    Learned,
    /// A fixed, non-learned saliency ranking of the anchors.
    Saliency,
}

/// Training configuration; the JSON form mirrors these fields and any omitted
/// field takes its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the query regression loss.
    pub lambda: f64,
    /// Reward for top-K proposals that overlap a context object.
    pub beta: f64,
    /// Fused feature width.
    pub m: usize,
    /// Query encoding width.
    pub d_q: usize,
    /// Proposals per query.
    pub n: usize,
    /// Proposals scored by the context policy.
    pub k: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs of the generation-only, frozen-generator and joint phases.
    pub epochs: [usize; 3],
    pub cycles: usize,
    pub seed: u64,
    pub reg_positive_only: bool,
    pub use_raw_reward: bool,
    pub disable_cpn: bool,
    pub disable_regression: bool,
    pub d_embed: usize,
    pub pgn_hidden: usize,
    pub lambda_g: f64,
    pub proposal_source: ProposalSource,
    /// Whether the context policy acts on the top-K ranking or on draws.
    pub selection: Selection,
    /// Per-group gradient L2 norm cap.
    pub grad_clip: f64,
    pub anchors: AnchorConfig,
    pub sampling: SamplingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            beta: 0.2,
            m: 512,
            d_q: 128,
            n: 32,
            k: 5,
            batch_size: 40,
            lr: 1e-4,
            epochs: [2, 4, 2],
            cycles: 1,
            seed: 0,
            reg_positive_only: false,
            use_raw_reward: false,
            disable_cpn: false,
            disable_regression: false,
            d_embed: 64,
            pgn_hidden: 64,
            lambda_g: 1.0,
            proposal_source: ProposalSource::Learned,
            selection: Selection::Ranked,
            grad_clip: 10.0,
            anchors: AnchorConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be a finite non-negative number");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if [
            self.m,
            self.d_q,
            self.n,
            self.k,
            self.batch_size,
            self.d_embed,
            self.pgn_hidden,
        ]
        .contains(&0)
        {
            return bad("all dimensions must be positive");
        }
        if self.k > self.n {
            return bad("k cannot exceed n");
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || !(self.lambda_g >= 0.0) {
            return bad("lr, grad_clip and lambda_g must be positive");
        }
        if self.cycles == 0 {
            return bad("at least one training cycle is needed");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn pgn(&self) -> PgnConfig {
        PgnConfig {
            d_feat: FEATURE_DIM,
            hidden: self.pgn_hidden,
            anchors: self.anchors.clone(),
        }
    }

    pub fn qrn(&self) -> QrnConfig {
        QrnConfig {
            vocab: Vocab::new().len(),
            d_embed: self.d_embed,
            d_q: self.d_q,
            d_v: self.pgn().d_v(),
            m: self.m,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }

    /// Whether the generation network is trained and used.
    pub fn uses_pgn(&self) -> bool {
        self.proposal_source == ProposalSource::Learned
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.lambda, c.beta, c.m, c.batch_size, c.lr),
            (1.0, 0.2, 512, 40, 1e-4)
        );
        c.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: TrainConfig =
            serde_json::from_str(r#"{"lambda": 2.0, "disable_cpn": true}"#).unwrap();
        assert_eq!(c.lambda, 2.0);
        assert!(c.disable_cpn);
        assert_eq!(c.n, 32);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lamda": 2.0}"#).is_err());
    }

    #[test]
    fn invalid_values() {
        for c in [
            TrainConfig {
                beta: 1.0,
                ..Default::default()
            },
            TrainConfig {
                m: 0,
                ..Default::default()
            },
            TrainConfig {
                k: 40,
                ..Default::default()
            },
            TrainConfig {
                lambda: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }
}

use crate::cpn::CpnParams;
use crate::error::Result;
use crate::geometry::BBox;
use crate::pgn::{
    attach_features, pgn_forward, saliency_proposals, select_top_proposals, PgnParams, Proposal,
};
use crate::qrn::QrnParams;
use crate::synthdata::FeatureGrid;
use crate::tensor::{ParamStore, Rng, Scalar, Stream, Tape};

use super::{ProposalSource, TrainConfig};

/// All three networks over one parameter store.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub pgn: PgnParams,
    pub qrn: QrnParams,
    pub cpn: CpnParams,
}

/// Init sub-stream of each network, so one network's initial values do not
/// depend on whether another was created.
pub(crate) const PGN_INIT: u64 = 1;
pub(crate) const QRN_INIT: u64 = 2;
pub(crate) const CPN_INIT: u64 = 3;

impl<T: Scalar> Model<T> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let base = Rng::stream(config.seed, Stream::Init);
        let mut store = ParamStore::new();
        let pgn = PgnParams::register(&mut store, &config.pgn(), &mut base.substream(PGN_INIT))?;
        let qrn = QrnParams::register(&mut store, &config.qrn(), &mut base.substream(QRN_INIT))?;
        let d_v = config.pgn().d_v();
        let cpn = CpnParams::register(&mut store, d_v, config.d_q, &mut base.substream(CPN_INIT))?;
        Ok(Model {
            store,
            pgn,
            qrn,
            cpn,
        })
    }

    /// The same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            store: self.store.cast(),
            pgn: self.pgn.clone(),
            qrn: self.qrn.clone(),
            cpn: self.cpn.clone(),
        }
    }

    /// Top-`config.n` proposals with features for each grid.
    pub fn propose(
        &self,
        config: &TrainConfig,
        grids: &[&FeatureGrid],
    ) -> Result<Vec<Vec<Proposal>>> {
        self.propose_n(config, grids, config.n)
    }

    pub fn propose_n(
        &self,
        config: &TrainConfig,
        grids: &[&FeatureGrid],
        n: usize,
    ) -> Result<Vec<Vec<Proposal>>> {
        let Some(first) = grids.first() else {
            return Ok(Vec::new());
        };
        let anchors = config.anchors.anchors(first.img_w(), first.img_h())?;
        match config.proposal_source {
            ProposalSource::Saliency => grids
                .iter()
                .map(|g| saliency_proposals(g, &anchors, n))
                .collect(),
            ProposalSource::Learned => {
                let mut out = Vec::with_capacity(grids.len());
                // Bounded chunks keep the recorded tape small.
                for chunk in grids.chunks(64) {
                    let mut tape = Tape::new();
                    let o = pgn_forward(&mut tape, &self.store, &self.pgn, chunk)?;
                    for (s, g) in chunk.iter().enumerate() {
                        let mut props = select_top_proposals(
                            &o.objectness(&tape, s),
                            &o.codes(&tape, s),
                            &anchors,
                            n,
                            g.img_w(),
                            g.img_h(),
                        )?;
                        attach_features(g, &mut props);
                        out.push(props);
                    }
                }
                Ok(out)
            }
        }
    }
}

pub fn boxes(proposals: &[Proposal]) -> Vec<BBox> {
    proposals.iter().map(|p| p.bbox).collect()
}

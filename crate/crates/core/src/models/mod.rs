//! The six benchmarked models behind one trait, their loss and training.

mod checkpoint;
mod loss;
mod train;
mod zoo;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use dyhgn_tensor::{CsrMatrix, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diachronic::DiachronicConfig;
use crate::error::{Error, Result};
use crate::graph::{EdgeList, Subgraph, UnrolledGraph};
use crate::layers::{Bound, ForwardCtx, ParamStore};
use crate::schema::DatasetKind;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry, CheckpointManifest, MANIFEST_FILE, WEIGHTS_FILE};
pub use loss::{binary_scores, loss, LabeledRow};
pub use train::{evaluate, predict, summarize, train, EpochRecord, EvalMetrics, SeedSummary, TrainReport};
pub use zoo::{Dyhgn, DyhgnDe, DyhgnDeHgt, DyhgnTrunk, Gat, Gcn, SimpleHgn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Gcn,
    Gat,
    SimpleHgn,
    Dyhgn,
    DyhgnDe,
    DyhgnDeHgt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Gcn,
        Variant::Gat,
        Variant::SimpleHgn,
        Variant::Dyhgn,
        Variant::DyhgnDe,
        Variant::DyhgnDeHgt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gcn => "gcn",
            Variant::Gat => "gat",
            Variant::SimpleHgn => "simple-hgn",
            Variant::Dyhgn => "dyhgn",
            Variant::DyhgnDe => "dyhgn-de",
            Variant::DyhgnDeHgt => "dyhgn-de-hgt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    pub fn uses_diachronic(self) -> bool {
        matches!(self, Variant::DyhgnDe | Variant::DyhgnDeHgt)
    }

    pub fn uses_heads(self) -> bool {
        matches!(self, Variant::Gat | Variant::SimpleHgn | Variant::DyhgnDeHgt)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub n_hid: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Present exactly for the diachronic variants.
    pub diachronic: Option<DiachronicConfig>,
    /// Whether GCN/GAT/Simple-HGN see temporal edges besides structural ones.
    pub baseline_temporal_edges: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Per-dataset defaults of the hyperparameter table.
    pub fn defaults(dataset: DatasetKind, variant: Variant) -> Self {
        use DatasetKind::*;
        use Variant::*;
        let (n_layers, n_hid, de_dim) = match (dataset, variant) {
            (MassReg, Gcn) => (4, 256, 0),
            (MassReg, Gat) => (8, 256, 0),
            (MassReg, SimpleHgn) => (2, 256, 0),
            (MassReg, Dyhgn) => (4, 256, 0),
            (MassReg, DyhgnDe) => (4, 256, 60),
            (MassReg, DyhgnDeHgt) => (4, 256, 30),
            (XFraudTxn, Gcn) => (4, 256, 0),
            (XFraudTxn, Gat) => (2, 256, 0),
            (XFraudTxn, SimpleHgn) => (2, 64, 0),
            (XFraudTxn, Dyhgn) => (2, 256, 0),
            (XFraudTxn, DyhgnDe) => (2, 128, 10),
            (XFraudTxn, DyhgnDeHgt) => (2, 128, 10),
            (XFraudAccount, Gcn) => (4, 256, 0),
            (XFraudAccount, Gat) => (2, 128, 0),
            (XFraudAccount, SimpleHgn) => (2, 256, 0),
            (XFraudAccount, Dyhgn) => (4, 128, 0),
            (XFraudAccount, DyhgnDe) => (2, 128, 10),
            (XFraudAccount, DyhgnDeHgt) => (2, 128, 10),
        };
        Self {
            variant,
            n_layers,
            n_hid,
            n_heads: if variant.uses_heads() { 4 } else { 1 },
            dropout: 0.1,
            lr: 1e-3,
            weight_decay: 0.01,
            max_epochs: if variant.uses_diachronic() { 128 } else { 2048 },
            patience: 64,
            diachronic: variant.uses_diachronic().then(|| DiachronicConfig {
                dim: de_dim,
                ..DiachronicConfig::default()
            }),
            baseline_temporal_edges: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_hid == 0 || self.n_heads == 0 {
            return Err(Error::Config("n_layers, n_hid and n_heads must be positive".into()));
        }
        if self.variant.uses_heads() && self.n_hid % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_hid {} is not divisible by n_heads {}",
                self.n_hid, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight decay must be finite and nonnegative".into()));
        }
        match (&self.diachronic, self.variant.uses_diachronic()) {
            (Some(de), true) => de.validate(),
            (None, false) => Ok(()),
            (None, true) => Err(Error::Config(format!("{} needs a diachronic section", self.variant))),
            (Some(_), false) => Err(Error::Config(format!("{} takes no diachronic section", self.variant))),
        }
    }
}

/// Graph-derived inputs shared by every model: features, normalized
/// adjacencies, typed edge lists and the target rows.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub graph: Arc<UnrolledGraph>,
    pub dataset: DatasetKind,
    pub features: Tensor,
    pub union_adj: Arc<CsrMatrix>,
    pub structural_adj: Arc<CsrMatrix>,
    pub temporal_adj: Arc<CsrMatrix>,
    /// Structural and temporal edges plus self-loops.
    pub union_edges: EdgeList,
    /// Structural edges plus self-loops.
    pub structural_edges: EdgeList,
    pub node_types: Vec<usize>,
    /// Graph node of each target, in target order.
    pub target_nodes: Vec<usize>,
    pub risk_classes: usize,
}

impl GraphContext {
    pub fn new(graph: UnrolledGraph, dataset: DatasetKind) -> Result<Self> {
        if graph.targets().is_empty() {
            return Err(Error::Validation("graph has no labeled targets".into()));
        }
        let risk_classes = if dataset.has_risk_levels() {
            let max = graph
                .targets()
                .iter()
                .map(|t| {
                    t.risk_level
                        .ok_or_else(|| Error::Validation(format!("target {:?} lacks a risk level", t.entity)))
                })
                .collect::<Result<Vec<u8>>>()?
                .into_iter()
                .max()
                .unwrap_or(0);
            max as usize + 1
        } else {
            0
        };
        Ok(Self {
            features: graph.features().clone(),
            union_adj: Arc::new(graph.normalized_adjacency(Subgraph::Union)),
            structural_adj: Arc::new(graph.normalized_adjacency(Subgraph::Structural)),
            temporal_adj: Arc::new(graph.normalized_adjacency(Subgraph::Temporal)),
            union_edges: graph.typed_edges(Subgraph::Union, true),
            structural_edges: graph.typed_edges(Subgraph::Structural, true),
            node_types: graph.node_types(),
            target_nodes: graph.targets().iter().map(|t| t.node).collect(),
            risk_classes,
            dataset,
            graph: Arc::new(graph),
        })
    }

    /// Same graph with a different node feature matrix.
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.rows() != self.graph.n_nodes() {
            return Err(Error::Config(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                self.graph.n_nodes()
            )));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Width of the output layer: 2 binary logits, followed by the
    /// risk-level logits when the dataset has them.
    pub fn n_outputs(&self) -> usize {
        2 + self.risk_classes
    }

    pub fn n_edge_types(&self) -> usize {
        self.graph.n_edge_types()
    }
}

/// Per-target outputs, rows in target order.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub embedding: Var,
    pub logits: Var,
}

pub trait Model: Send + Sync {
    fn variant(&self) -> Variant;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    fn forward(&self, tape: &mut Tape, p: &Bound, ctx: &GraphContext, fwd: &mut ForwardCtx) -> Result<ModelOutput>;
}

pub type Builder = fn(&GraphContext, &ModelConfig, &mut ChaCha8Rng) -> Result<Box<dyn Model>>;

/// Name-keyed model constructors.
#[derive(Clone)]
pub struct Registry {
    builders: BTreeMap<String, Builder>,
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            builders: BTreeMap::new(),
        }
    }

    /// All six variants under their CLI names.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Variant::Gcn.name(), zoo::build_gcn);
        r.register(Variant::Gat.name(), zoo::build_gat);
        r.register(Variant::SimpleHgn.name(), zoo::build_simple_hgn);
        r.register(Variant::Dyhgn.name(), zoo::build_dyhgn);
        r.register(Variant::DyhgnDe.name(), zoo::build_dyhgn_de);
        r.register(Variant::DyhgnDeHgt.name(), zoo::build_dyhgn_de_hgt);
        r
    }

    pub fn register(&mut self, name: &str, builder: Builder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> Vec<&str> {
        self.builders.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, ctx: &GraphContext, config: &ModelConfig) -> Result<Box<dyn Model>> {
        let builder = self
            .builders
            .get(name)
            .ok_or_else(|| Error::Config(format!("no model registered as `{name}`")))?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        builder(ctx, config, &mut rng)
    }
}

/// Builds `config.variant` from the standard registry.
pub fn assemble(ctx: &GraphContext, config: &ModelConfig) -> Result<Box<dyn Model>> {
    Registry::standard().build(config.variant.name(), ctx, config)
}

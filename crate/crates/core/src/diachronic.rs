//! Diachronic entity embeddings, DE-DistMult edge messages and their
//! per-node aggregation into extra node features.
//!
//! An entity embedding has `⌊γd⌋` temporal components
//! `a[n] · (sin(w_week[n]·week + b_week[n]) + sin(w_day[n]·day + b_day[n]))`
//! followed by `d − ⌊γd⌋` static components `a[n]`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use dyhgn_tensor::{Activation, AggregateMode, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::UnrolledGraph;
use crate::layers::{Bound, Lstm, ParamId, ParamStore};
use crate::schema::{EntityRef, RelationType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Lstm,
    Mean,
}

impl Aggregation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Self::Lstm),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("unknown aggregation `{other}` (expected lstm or mean)"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lstm => "lstm",
            Self::Mean => "mean",
        })
    }
}

/// Which embeddings enter an edge message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// `z_source ⊙ z_r ⊙ z_receiver`.
    Full,
    /// `z_source ⊙ z_r`.
    SourceOnly,
}

impl ScoreMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" | "full-triple" => Ok(Self::Full),
            "source-only" | "source-relation-only" => Ok(Self::SourceOnly),
            other => Err(Error::Config(format!("unknown score mode `{other}` (expected full or source-only)"))),
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::SourceOnly => "source-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiachronicConfig {
    pub dim: usize,
    pub gamma: f64,
    pub aggregation: Aggregation,
    pub score_mode: ScoreMode,
    pub relation_time_dependent: bool,
    /// Aggregate the scalar score `Σ m` instead of the message vector.
    pub scalar_scores: bool,
    pub init_std: f64,
}

impl Default for DiachronicConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            gamma: 0.5,
            aggregation: Aggregation::Lstm,
            score_mode: ScoreMode::Full,
            relation_time_dependent: false,
            scalar_scores: false,
            init_std: 0.1,
        }
    }
}

impl DiachronicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("diachronic dimension must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init std {} must be positive", self.init_std)));
        }
        Ok(())
    }

    /// Number of temporal components, `⌊γd⌋`.
    pub fn temporal_dims(&self) -> usize {
        ((self.gamma * self.dim as f64) + 1e-9).floor() as usize
    }

    /// Width of the block appended to the node features.
    pub fn output_dim(&self) -> usize {
        match (self.scalar_scores, self.aggregation) {
            (true, Aggregation::Mean) => 1,
            _ => self.dim,
        }
    }
}

/// Amplitudes and frequency/phase pairs for a set of rows (entities or
/// relations).
#[derive(Debug, Clone)]
pub struct TimeTable {
    pub a: ParamId,
    pub w_week: ParamId,
    pub b_week: ParamId,
    pub w_day: ParamId,
    pub b_day: ParamId,
    pub dim: usize,
    pub temporal: usize,
}

impl TimeTable {
    fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, temporal: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            a: store.normal(format!("{name}.a"), vec![rows, dim], std, rng)?,
            w_week: store.normal(format!("{name}.w_week"), vec![rows, temporal], std, rng)?,
            b_week: store.normal(format!("{name}.b_week"), vec![rows, temporal], std, rng)?,
            w_day: store.normal(format!("{name}.w_day"), vec![rows, temporal], std, rng)?,
            b_day: store.normal(format!("{name}.b_day"), vec![rows, temporal], std, rng)?,
            dim,
            temporal,
        })
    }

    /// One embedding row per `(row, week, day)` query.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, rows: &[usize], weeks: &[f64], days: &[f64]) -> Result<Var> {
        let a = tape.gather_rows(p.get(self.a), rows)?;
        let k = self.temporal;
        if k == 0 {
            return Ok(a);
        }
        let weeks: Arc<[f64]> = weeks.into();
        let days: Arc<[f64]> = days.into();
        let phase = |tape: &mut Tape, w: ParamId, b: ParamId, t: Arc<[f64]>| -> Result<Var> {
            let wr = tape.gather_rows(p.get(w), rows)?;
            let scaled = tape.scale_rows(wr, t)?;
            let br = tape.gather_rows(p.get(b), rows)?;
            let shifted = tape.add(scaled, br)?;
            Ok(tape.unary(shifted, Activation::Sine))
        };
        let sw = phase(tape, self.w_week, self.b_week, weeks)?;
        let sd = phase(tape, self.w_day, self.b_day, days)?;
        let s = tape.add(sw, sd)?;
        if k == self.dim {
            return Ok(tape.mul(a, s)?);
        }
        let a_t = tape.slice_cols(a, 0, k)?;
        let a_s = tape.slice_cols(a, k, self.dim)?;
        let temporal = tape.mul(a_t, s)?;
        Ok(tape.concat_cols(&[temporal, a_s])?)
    }
}

#[derive(Debug, Clone)]
pub enum RelationTable {
    Static(ParamId),
    Timed(TimeTable),
}

/// Diachronic parameters for a fixed entity set plus the aggregator.
#[derive(Debug, Clone)]
pub struct Diachronic {
    pub config: DiachronicConfig,
    entity_rows: BTreeMap<EntityRef, usize>,
    pub entities: TimeTable,
    pub relations: RelationTable,
    pub n_relations: usize,
    pub lstm: Option<Lstm>,
}

impl Diachronic {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: DiachronicConfig,
        entities: &[EntityRef],
        n_relations: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (d, k, std) = (config.dim, config.temporal_dims(), config.init_std);
        let mut entity_rows = BTreeMap::new();
        for (i, &e) in entities.iter().enumerate() {
            if entity_rows.insert(e, i).is_some() {
                return Err(Error::ParamTable(format!("entity {e:?} listed twice")));
            }
        }
        let table = TimeTable::new(store, &format!("{name}.entity"), entities.len(), d, k, std, rng)?;
        let relations = if config.relation_time_dependent {
            RelationTable::Timed(TimeTable::new(store, &format!("{name}.relation"), n_relations, d, k, std, rng)?)
        } else {
            RelationTable::Static(store.normal(format!("{name}.relation.z"), vec![n_relations, d], std, rng)?)
        };
        let lstm = match config.aggregation {
            Aggregation::Lstm => {
                let d_in = if config.scalar_scores { 1 } else { d };
                Some(Lstm::new(store, &format!("{name}.lstm"), d_in, d, rng)?)
            }
            Aggregation::Mean => None,
        };
        Ok(Self {
            config,
            entity_rows,
            entities: table,
            relations,
            n_relations,
            lstm,
        })
    }

    /// Parameters for every entity of the graph, in hub order.
    pub fn for_graph(store: &mut ParamStore, name: &str, config: DiachronicConfig, graph: &UnrolledGraph, rng: &mut ChaCha8Rng) -> Result<Self> {
        let entities: Vec<EntityRef> = graph.nodes()[graph.n_replicas()..].iter().map(|n| n.entity()).collect();
        Self::new(store, name, config, &entities, graph.schema().n_relations(), rng)
    }

    pub fn entity_row(&self, v: EntityRef) -> Result<usize> {
        self.entity_rows
            .get(&v)
            .copied()
            .ok_or_else(|| Error::ParamTable(format!("no diachronic parameters for entity {v:?}")))
    }

    fn check_relation(&self, r: RelationType) -> Result<()> {
        if r.0 >= self.n_relations {
            return Err(Error::ParamTable(format!("no embedding for relation {}", r.0)));
        }
        Ok(())
    }

    /// Entity embeddings for `(entity, week, day)` queries.
    pub fn entity_embeddings(&self, tape: &mut Tape, p: &Bound, entities: &[EntityRef], weeks: &[f64], days: &[f64]) -> Result<Var> {
        let rows = entities.iter().map(|&e| self.entity_row(e)).collect::<Result<Vec<_>>>()?;
        self.entities.embed(tape, p, &rows, weeks, days)
    }

    pub fn relation_embeddings(&self, tape: &mut Tape, p: &Bound, relations: &[RelationType], weeks: &[f64], days: &[f64]) -> Result<Var> {
        for &r in relations {
            self.check_relation(r)?;
        }
        let rows: Vec<usize> = relations.iter().map(|r| r.0).collect();
        match &self.relations {
            RelationTable::Static(z) => Ok(tape.gather_rows(p.get(*z), &rows)?),
            RelationTable::Timed(table) => table.embed(tape, p, &rows, weeks, days),
        }
    }

    /// Value of one entity embedding.
    pub fn deemb(&self, store: &ParamStore, v: EntityRef, week: f64, day: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let z = self.entity_embeddings(&mut tape, &p, &[v], &[week], &[day])?;
        Ok(tape.value(z).clone().reshape(vec![self.config.dim])?)
    }

    /// Score and message of the edge `v --r--> u` at `(week, day)`. In full
    /// mode the message is `z_v ⊙ z_r ⊙ z_u`; in source-only mode it is
    /// `z_v ⊙ z_r`. The score is the sum of the message.
    pub fn de_distmult(&self, store: &ParamStore, v: EntityRef, r: RelationType, u: EntityRef, week: f64, day: f64) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let zv = self.entity_embeddings(&mut tape, &p, &[v], &[week], &[day])?;
        let zr = self.relation_embeddings(&mut tape, &p, &[r], &[week], &[day])?;
        let mut m = tape.mul(zv, zr)?;
        if self.config.score_mode == ScoreMode::Full {
            let zu = self.entity_embeddings(&mut tape, &p, &[u], &[week], &[day])?;
            m = tape.mul(m, zu)?;
        }
        let message = tape.value(m).clone().reshape(vec![self.config.dim])?;
        Ok((message.data().iter().sum(), message))
    }

    /// One message row per directed structural edge of the graph, aligned
    /// with [`UnrolledGraph::structural_edges`].
    pub fn edge_messages(&self, tape: &mut Tape, p: &Bound, graph: &UnrolledGraph) -> Result<Var> {
        let events = graph.events();
        let weeks: Vec<f64> = events.iter().map(|e| e.week as f64).collect();
        let days: Vec<f64> = events.iter().map(|e| e.day as f64).collect();
        let targets: Vec<EntityRef> = events.iter().map(|e| e.target).collect();
        let linkers: Vec<EntityRef> = events.iter().map(|e| e.linker).collect();
        let relations: Vec<RelationType> = events.iter().map(|e| e.relation).collect();
        let n_events = events.len();
        let d = self.config.dim;
        let edges = graph.structural_edges();
        if n_events == 0 {
            return Ok(tape.constant(Tensor::zeros(&[0, self.message_width()])));
        }

        let z_t = self.entity_embeddings(tape, p, &targets, &weeks, &days)?;
        let z_l = self.entity_embeddings(tape, p, &linkers, &weeks, &days)?;
        let z_r = self.relation_embeddings(tape, p, &relations, &weeks, &days)?;
        let per_edge = match self.config.score_mode {
            ScoreMode::Full => {
                let tr = tape.mul(z_t, z_r)?;
                let m = tape.mul(tr, z_l)?;
                let index: Vec<usize> = edges.iter().map(|e| e.event).collect();
                tape.gather_rows(m, &index)?
            }
            ScoreMode::SourceOnly => {
                let from_target = tape.mul(z_t, z_r)?;
                let from_linker = tape.mul(z_l, z_r)?;
                let both = tape.concat_rows(&[from_target, from_linker])?;
                let nodes = graph.nodes();
                let index: Vec<usize> = edges
                    .iter()
                    .map(|e| {
                        if nodes[e.source].entity() == events[e.event].target {
                            e.event
                        } else {
                            n_events + e.event
                        }
                    })
                    .collect();
                tape.gather_rows(both, &index)?
            }
        };
        if self.config.scalar_scores {
            let ones = tape.constant(Tensor::full(&[d, 1], 1.0));
            return Ok(tape.matmul(per_edge, ones)?);
        }
        Ok(per_edge)
    }

    fn message_width(&self) -> usize {
        if self.config.scalar_scores {
            1
        } else {
            self.config.dim
        }
    }

    /// Aggregates the incoming messages of every node (ordered by edge id,
    /// all within the node's snapshot); nodes without structural edges get
    /// zeros.
    pub fn aggregate(&self, tape: &mut Tape, p: &Bound, graph: &UnrolledGraph, messages: Var) -> Result<Var> {
        let n = graph.n_nodes();
        let receivers: Vec<usize> = graph.structural_edges().iter().map(|e| e.target).collect();
        match &self.lstm {
            None => Ok(tape.scatter_aggregate(messages, &receivers, n, AggregateMode::Mean)?),
            Some(lstm) => {
                let mut sequences = vec![Vec::new(); n];
                for (i, &r) in receivers.iter().enumerate() {
                    sequences[r].push(i);
                }
                lstm.forward_packed(tape, p, messages, &sequences)
            }
        }
    }

    /// The `n × output_dim` aggregated diachronic block.
    pub fn node_block(&self, tape: &mut Tape, p: &Bound, graph: &UnrolledGraph) -> Result<Var> {
        let messages = self.edge_messages(tape, p, graph)?;
        self.aggregate(tape, p, graph, messages)
    }

    /// `X_DE = [X ‖ aggregated messages]`.
    pub fn build_x_de(&self, tape: &mut Tape, p: &Bound, graph: &UnrolledGraph, x: Var) -> Result<Var> {
        let block = self.node_block(tape, p, graph)?;
        Ok(tape.concat_cols(&[x, block])?)
    }
}

//! Unrolling a timestamped event log into one graph.
//!
//! Every entity gets one replica node per week in which it takes part in an
//! event. Events become structural edges between replicas of the same week;
//! each entity also gets a hub node joined to all of its replicas by
//! temporal edges, so information can only cross weeks through hubs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use dyhgn_tensor::{CsrMatrix, Tensor};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{week_of_day, EntityRef, EventRecord, LabelSet, NodeType, RelationType, Schema};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphNode {
    Replica { entity: EntityRef, snapshot: u32 },
    Hub { entity: EntityRef, first: u32, last: u32 },
}

impl GraphNode {
    pub fn entity(&self) -> EntityRef {
        match *self {
            GraphNode::Replica { entity, .. } | GraphNode::Hub { entity, .. } => entity,
        }
    }

    pub fn is_hub(&self) -> bool {
        matches!(self, GraphNode::Hub { .. })
    }
}

/// Directed intra-snapshot edge produced by one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuralEdge {
    pub source: usize,
    pub target: usize,
    pub relation: RelationType,
    /// Index into [`UnrolledGraph::events`].
    pub event: usize,
}

/// Replica-to-hub edge; expanded to both directions for message passing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalEdge {
    pub replica: usize,
    pub hub: usize,
}

/// A labeled entity to classify, read from its creation-snapshot replica.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetNode {
    pub entity: EntityRef,
    pub node: usize,
    pub week: u32,
    pub day: u32,
    pub binary: u8,
    pub risk_level: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subgraph {
    Structural,
    Temporal,
    Union,
}

/// Flat typed edge list, used by attention layers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgeList {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub rel: Vec<usize>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    fn push(&mut self, s: usize, d: usize, r: usize) {
        self.src.push(s);
        self.dst.push(d);
        self.rel.push(r);
    }
}

#[derive(Debug, Clone)]
pub struct UnrolledGraph {
    schema: Schema,
    snapshot_count: u32,
    nodes: Vec<GraphNode>,
    replica_index: HashMap<(EntityRef, u32), usize>,
    hub_index: HashMap<EntityRef, usize>,
    events: Vec<EventRecord>,
    structural: Vec<StructuralEdge>,
    temporal: Vec<TemporalEdge>,
    targets: Vec<TargetNode>,
    features: Tensor,
}

impl UnrolledGraph {
    /// Validates the event log and unrolls it over `snapshot_count` weeks.
    pub fn build(schema: &Schema, events: &[EventRecord], labels: &LabelSet, snapshot_count: u32) -> Result<Self> {
        for ev in events {
            schema.check_event(ev)?;
            if ev.week < 1 || ev.week > snapshot_count {
                return Err(Error::Validation(format!(
                    "snapshot {} outside [1, {snapshot_count}]: {ev:?}",
                    ev.week
                )));
            }
            if week_of_day(ev.day) != ev.week {
                return Err(Error::Validation(format!(
                    "day {} does not fall in week {}: {ev:?}",
                    ev.day, ev.week
                )));
            }
            if !labels.labels.contains_key(&ev.target) {
                return Err(Error::Validation(format!("unlabeled target in record {ev:?}")));
            }
        }

        let mut sorted = events.to_vec();
        sorted.sort_by_key(|e| (e.week, e.day, e.target, e.linker, e.relation));

        let mut replicas: BTreeSet<(EntityRef, u32)> = BTreeSet::new();
        let mut spans: BTreeMap<EntityRef, (u32, u32)> = BTreeMap::new();
        for ev in &sorted {
            for ent in [ev.target, ev.linker] {
                replicas.insert((ent, ev.week));
                let span = spans.entry(ent).or_insert((ev.week, ev.week));
                span.0 = span.0.min(ev.week);
                span.1 = span.1.max(ev.week);
            }
        }

        let mut nodes = Vec::with_capacity(replicas.len() + spans.len());
        let mut replica_index = HashMap::with_capacity(replicas.len());
        for &(entity, snapshot) in &replicas {
            replica_index.insert((entity, snapshot), nodes.len());
            nodes.push(GraphNode::Replica { entity, snapshot });
        }
        let mut hub_index = HashMap::with_capacity(spans.len());
        for (&entity, &(first, last)) in &spans {
            hub_index.insert(entity, nodes.len());
            nodes.push(GraphNode::Hub { entity, first, last });
        }

        let mut structural = Vec::with_capacity(2 * sorted.len());
        for (i, ev) in sorted.iter().enumerate() {
            let t = replica_index[&(ev.target, ev.week)];
            let l = replica_index[&(ev.linker, ev.week)];
            structural.push(StructuralEdge {
                source: t,
                target: l,
                relation: ev.relation,
                event: i,
            });
            structural.push(StructuralEdge {
                source: l,
                target: t,
                relation: ev.relation,
                event: i,
            });
        }
        let temporal = replicas
            .iter()
            .map(|&(entity, snapshot)| TemporalEdge {
                replica: replica_index[&(entity, snapshot)],
                hub: hub_index[&entity],
            })
            .collect();

        let mut creation: BTreeMap<EntityRef, (u32, u32)> = BTreeMap::new();
        for ev in &sorted {
            let c = creation.entry(ev.target).or_insert((ev.week, ev.day));
            if (ev.week, ev.day) < *c {
                *c = (ev.week, ev.day);
            }
        }
        let unused = labels.labels.keys().filter(|k| !creation.contains_key(k)).count();
        if unused > 0 {
            warn!("{unused} labeled targets have no events and are left out of the graph");
        }
        let targets: Vec<TargetNode> = creation
            .iter()
            .map(|(&entity, &(week, day))| {
                let label = labels.labels[&entity];
                TargetNode {
                    entity,
                    node: replica_index[&(entity, week)],
                    week,
                    day,
                    binary: label.binary,
                    risk_level: label.risk_level,
                }
            })
            .collect();

        let f = labels.feature_dim;
        let mut feat = vec![0.0; nodes.len() * f];
        if f > 0 {
            for (i, node) in nodes.iter().enumerate() {
                if let GraphNode::Replica { entity, .. } = node {
                    if entity.node_type != schema.target_type {
                        continue;
                    }
                    let values = labels.features.get(entity).ok_or_else(|| {
                        Error::Validation(format!("target {entity:?} has no feature vector"))
                    })?;
                    feat[i * f..(i + 1) * f].copy_from_slice(values);
                }
            }
        }
        let features = Tensor::from_vec(vec![nodes.len(), f], feat)?;

        Ok(Self {
            schema: schema.clone(),
            snapshot_count,
            nodes,
            replica_index,
            hub_index,
            events: sorted,
            structural,
            temporal,
            targets,
            features,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn snapshot_count(&self) -> u32 {
        self.snapshot_count
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node_type(&self, i: usize) -> NodeType {
        self.nodes[i].entity().node_type
    }

    pub fn node_types(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.entity().node_type.0).collect()
    }

    /// Events in canonical order (week, day, target, linker, relation).
    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn structural_edges(&self) -> &[StructuralEdge] {
        &self.structural
    }

    pub fn temporal_edges(&self) -> &[TemporalEdge] {
        &self.temporal
    }

    pub fn targets(&self) -> &[TargetNode] {
        &self.targets
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn replica(&self, entity: EntityRef, snapshot: u32) -> Option<usize> {
        self.replica_index.get(&(entity, snapshot)).copied()
    }

    pub fn hub(&self, entity: EntityRef) -> Option<usize> {
        self.hub_index.get(&entity).copied()
    }

    pub fn n_replicas(&self) -> usize {
        self.replica_index.len()
    }

    pub fn n_hubs(&self) -> usize {
        self.hub_index.len()
    }

    /// Relation id reserved for temporal edges in typed edge lists.
    pub fn temporal_relation(&self) -> usize {
        self.schema.n_relations()
    }

    /// Relation id reserved for self-loops in typed edge lists.
    pub fn self_loop_relation(&self) -> usize {
        self.schema.n_relations() + 1
    }

    /// Number of relation ids used by [`UnrolledGraph::typed_edges`].
    pub fn n_edge_types(&self) -> usize {
        self.schema.n_relations() + 2
    }

    /// Directed, typed edges of a subgraph (temporal edges in both
    /// directions), optionally followed by one self-loop per node.
    pub fn typed_edges(&self, subgraph: Subgraph, self_loops: bool) -> EdgeList {
        let mut list = EdgeList::default();
        if matches!(subgraph, Subgraph::Structural | Subgraph::Union) {
            for e in &self.structural {
                list.push(e.source, e.target, e.relation.0);
            }
        }
        if matches!(subgraph, Subgraph::Temporal | Subgraph::Union) {
            let r = self.temporal_relation();
            for e in &self.temporal {
                list.push(e.replica, e.hub, r);
                list.push(e.hub, e.replica, r);
            }
        }
        if self_loops {
            let r = self.self_loop_relation();
            for i in 0..self.n_nodes() {
                list.push(i, i, r);
            }
        }
        list
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` over all nodes for the chosen edge set.
    pub fn normalized_adjacency(&self, subgraph: Subgraph) -> CsrMatrix {
        let edges = self.typed_edges(subgraph, true);
        normalize_with_self_loops(self.n_nodes(), &edges.src, &edges.dst)
    }

    pub fn statistics(&self) -> GraphStats {
        let mut node_counts = BTreeMap::new();
        let mut hub_counts = BTreeMap::new();
        for name in &self.schema.node_types {
            node_counts.insert(name.clone(), 0);
            hub_counts.insert(name.clone(), 0);
        }
        for n in &self.nodes {
            let name = self.schema.type_name(n.entity().node_type).to_string();
            let slot = if n.is_hub() {
                hub_counts.get_mut(&name)
            } else {
                node_counts.get_mut(&name)
            };
            *slot.expect("type registered") += 1;
        }
        let mut edge_counts = BTreeMap::new();
        for r in &self.schema.relations {
            edge_counts.insert(r.name.clone(), 0);
        }
        for ev in &self.events {
            *edge_counts
                .get_mut(self.schema.relation_name(ev.relation))
                .expect("relation registered") += 1;
        }
        GraphStats {
            snapshots: self.snapshot_count,
            replica_nodes: node_counts,
            hub_nodes: hub_counts,
            structural_edges: edge_counts,
            temporal_edges: self.temporal.len(),
            total_nodes: self.nodes.len(),
            total_edges: self.events.len() + self.temporal.len(),
        }
    }
}

/// Symmetric GCN normalization of `edges` (given as directed pairs; a
/// self-loop pair counts once) over `n` nodes.
pub fn normalize_with_self_loops(n: usize, src: &[usize], dst: &[usize]) -> CsrMatrix {
    let mut triplets: Vec<(usize, usize, f64)> = src.iter().zip(dst).map(|(&s, &d)| (d, s, 1.0)).collect();
    let has_loop: BTreeSet<usize> = src.iter().zip(dst).filter(|(s, d)| s == d).map(|(s, _)| *s).collect();
    for i in 0..n {
        if !has_loop.contains(&i) {
            triplets.push((i, i, 1.0));
        }
    }
    let raw = CsrMatrix::from_triplets(n, n, &triplets).expect("indices come from the graph");
    let degree: Vec<f64> = (0..n).map(|r| raw.row(r).map(|(_, v)| v).sum()).collect();
    let mut scaled = Vec::with_capacity(raw.nnz());
    for r in 0..n {
        for (c, v) in raw.row(r) {
            scaled.push((r, c, v / (degree[r] * degree[c]).sqrt()));
        }
    }
    CsrMatrix::from_triplets(n, n, &scaled).expect("same pattern")
}

/// Per-type node and edge counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub snapshots: u32,
    pub replica_nodes: BTreeMap<String, usize>,
    pub hub_nodes: BTreeMap<String, usize>,
    /// Undirected event edges per relation.
    pub structural_edges: BTreeMap<String, usize>,
    pub temporal_edges: usize,
    pub total_nodes: usize,
    pub total_edges: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{DatasetKind, TargetLabel};

    fn account(id: u64) -> EntityRef {
        EntityRef::new(NodeType(0), id)
    }

    fn labels_for(ids: &[u64]) -> LabelSet {
        let mut l = LabelSet::default();
        for &id in ids {
            l.insert(account(id), TargetLabel { binary: 0, risk_level: Some(0) }).unwrap();
            l.set_features(account(id), vec![id as f64]).unwrap();
        }
        l
    }

    fn ip_event(acc: u64, ip: u64, week: u32) -> EventRecord {
        EventRecord {
            target: account(acc),
            linker: EntityRef::new(NodeType(2), ip),
            relation: RelationType(1),
            week,
            day: week * 7,
        }
    }

    #[test]
    fn empty_log_gives_empty_graph() {
        let g = UnrolledGraph::build(&DatasetKind::MassReg.schema(), &[], &LabelSet::default(), 1).unwrap();
        assert_eq!(g.n_nodes(), 0);
        assert!(g.structural_edges().is_empty());
        let s = g.statistics();
        assert_eq!(s.total_nodes, 0);
        assert_eq!(s.total_edges, 0);
        assert_eq!(s.temporal_edges, 0);
    }

    #[test]
    fn two_accounts_share_an_ip() {
        let schema = DatasetKind::MassReg.schema();
        let events = [ip_event(1, 9, 1), ip_event(2, 9, 1)];
        let g = UnrolledGraph::build(&schema, &events, &labels_for(&[1, 2]), 1).unwrap();
        assert_eq!(g.n_replicas(), 3);
        assert_eq!(g.n_hubs(), 3);
        assert_eq!(g.structural_edges().len(), 4);
        assert_eq!(g.temporal_edges().len(), 3);
        assert_eq!(g.statistics().temporal_edges, 3);

        // account 1 -> ip -> account 2
        let a1 = g.replica(account(1), 1).unwrap();
        let a2 = g.replica(account(2), 1).unwrap();
        let ip = g.replica(EntityRef::new(NodeType(2), 9), 1).unwrap();
        let e = g.structural_edges();
        assert!(e.iter().any(|x| x.source == a1 && x.target == ip));
        assert!(e.iter().any(|x| x.source == ip && x.target == a2));
        assert!(!e.iter().any(|x| x.source == a1 && x.target == a2));

        // features only on target replicas
        assert_eq!(g.features().row(a2), &[2.0]);
        assert_eq!(g.features().row(ip), &[0.0]);
    }

    #[test]
    fn linker_in_three_snapshots_has_three_temporal_edges() {
        let schema = DatasetKind::MassReg.schema();
        let events = [ip_event(1, 5, 1), ip_event(2, 5, 2), ip_event(3, 5, 3)];
        let g = UnrolledGraph::build(&schema, &events, &labels_for(&[1, 2, 3]), 3).unwrap();
        let phone = EntityRef::new(NodeType(2), 5);
        let hub = g.hub(phone).unwrap();
        let star: Vec<_> = g.temporal_edges().iter().filter(|e| e.hub == hub).collect();
        assert_eq!(star.len(), 3);
        assert_eq!(g.nodes()[hub], GraphNode::Hub { entity: phone, first: 1, last: 3 });
    }

    #[test]
    fn validation_errors() {
        let schema = DatasetKind::MassReg.schema();
        let labels = labels_for(&[1]);
        let out_of_range = [ip_event(1, 2, 4)];
        assert!(matches!(UnrolledGraph::build(&schema, &out_of_range, &labels, 3), Err(Error::Validation(_))));
        let unlabeled = [ip_event(7, 2, 1)];
        assert!(matches!(UnrolledGraph::build(&schema, &unlabeled, &labels, 3), Err(Error::Validation(_))));
        let mut bad_day = ip_event(1, 2, 1);
        bad_day.day = 20;
        assert!(matches!(UnrolledGraph::build(&schema, &[bad_day], &labels, 3), Err(Error::Validation(_))));
    }

    #[test]
    fn single_isolated_node_adjacency() {
        let a = normalize_with_self_loops(1, &[], &[]);
        assert_eq!(a.to_dense().data(), &[1.0]);
    }

    #[test]
    fn two_node_edge_adjacency_is_half() {
        let a = normalize_with_self_loops(2, &[0, 1], &[1, 0]);
        for v in a.to_dense().data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }
}

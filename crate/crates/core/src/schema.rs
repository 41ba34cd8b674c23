//! Dataset schemas: node types, relation types and the typed records that
//! make up an event log.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeType(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationType(pub usize);

/// An entity is identified by its type and an id unique within that type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityRef {
    pub node_type: NodeType,
    pub id: u64,
}

impl EntityRef {
    pub fn new(node_type: NodeType, id: u64) -> Self {
        Self { node_type, id }
    }
}

/// One observed link between a target entity and a linking entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventRecord {
    pub target: EntityRef,
    pub linker: EntityRef,
    pub relation: RelationType,
    /// Week snapshot, 1-based.
    pub week: u32,
    /// Absolute day index; `week == day / 7`.
    pub day: u32,
}

/// Week snapshot containing an absolute day.
pub fn week_of_day(day: u32) -> u32 {
    day / 7
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    pub target_type: NodeType,
    pub linker_type: NodeType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub node_types: Vec<String>,
    pub target_type: NodeType,
    pub relations: Vec<RelationSpec>,
}

impl Schema {
    fn star(types: &[&str]) -> Self {
        let node_types: Vec<String> = types.iter().map(|s| s.to_string()).collect();
        let relations = (1..types.len())
            .map(|i| RelationSpec {
                name: format!("{}-{}", types[0], types[i]),
                target_type: NodeType(0),
                linker_type: NodeType(i),
            })
            .collect();
        Self {
            node_types,
            target_type: NodeType(0),
            relations,
        }
    }

    pub fn type_name(&self, t: NodeType) -> &str {
        &self.node_types[t.0]
    }

    pub fn node_type(&self, name: &str) -> Result<NodeType> {
        self.node_types
            .iter()
            .position(|n| n == name)
            .map(NodeType)
            .ok_or_else(|| Error::Validation(format!("unknown node type `{name}`")))
    }

    pub fn relation_name(&self, r: RelationType) -> &str {
        &self.relations[r.0].name
    }

    pub fn relation(&self, name: &str) -> Result<RelationType> {
        self.relations
            .iter()
            .position(|r| r.name == name)
            .map(RelationType)
            .ok_or_else(|| Error::Validation(format!("unknown relation `{name}`")))
    }

    /// Linker node types in relation order.
    pub fn linker_types(&self) -> Vec<NodeType> {
        self.relations.iter().map(|r| r.linker_type).collect()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    /// Checks that a record's relation agrees with its endpoint types.
    pub fn check_event(&self, ev: &EventRecord) -> Result<()> {
        let spec = self.relations.get(ev.relation.0).ok_or_else(|| {
            Error::Validation(format!("relation id {} not in schema ({ev:?})", ev.relation.0))
        })?;
        if ev.target.node_type != spec.target_type || ev.linker.node_type != spec.linker_type {
            return Err(Error::Validation(format!(
                "relation `{}` expects ({}, {}) but record links ({}, {}): {ev:?}",
                spec.name,
                self.type_name(spec.target_type),
                self.type_name(spec.linker_type),
                self.node_types.get(ev.target.node_type.0).map_or("?", String::as_str),
                self.node_types.get(ev.linker.node_type.0).map_or("?", String::as_str),
            )));
        }
        Ok(())
    }
}

/// The three application scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    /// Account registrations linked to address, IP, phone and email.
    #[serde(rename = "massreg")]
    MassReg,
    /// Transactions linked to payment token, email, address and buyer.
    #[serde(rename = "xfraud-txn")]
    XFraudTxn,
    /// Buyer accounts linked to transactions, payment token, email and address.
    #[serde(rename = "xfraud-account")]
    XFraudAccount,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::MassReg => "massreg",
            Self::XFraudTxn => "xfraud-txn",
            Self::XFraudAccount => "xfraud-account",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let base = s.trim().to_ascii_lowercase();
        let base = base.strip_suffix("-synth").unwrap_or(&base);
        match base {
            "massreg" => Ok(Self::MassReg),
            "xfraud-txn" | "xfraudtxn" => Ok(Self::XFraudTxn),
            "xfraud-account" | "xfraudaccount" => Ok(Self::XFraudAccount),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }

    pub fn schema(self) -> Schema {
        match self {
            Self::MassReg => Schema::star(&["account", "address", "ip", "phone", "email"]),
            Self::XFraudTxn => Schema::star(&["txn", "pmt", "email", "addr", "buyer"]),
            Self::XFraudAccount => Schema::star(&["buyer", "txn", "pmt", "email", "addr"]),
        }
    }

    /// MassReg targets additionally carry a risk level trained by a second head.
    pub fn has_risk_levels(self) -> bool {
        matches!(self, Self::MassReg)
    }

    pub fn default_feature_dim(self) -> usize {
        match self {
            Self::MassReg => 264,
            Self::XFraudTxn | Self::XFraudAccount => 114,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetLabel {
    pub binary: u8,
    pub risk_level: Option<u8>,
}

/// Labels and node features of the target entities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    pub labels: BTreeMap<EntityRef, TargetLabel>,
    pub features: BTreeMap<EntityRef, Vec<f64>>,
    pub feature_dim: usize,
}

impl LabelSet {
    pub fn insert(&mut self, target: EntityRef, label: TargetLabel) -> Result<()> {
        if label.binary > 1 {
            return Err(Error::Validation(format!("binary label {} for {target:?}", label.binary)));
        }
        if let Some(r) = label.risk_level {
            if (r > 0) != (label.binary == 1) {
                return Err(Error::Validation(format!(
                    "risk level {r} inconsistent with binary label {} for {target:?}",
                    label.binary
                )));
            }
        }
        self.labels.insert(target, label);
        Ok(())
    }

    pub fn set_features(&mut self, target: EntityRef, values: Vec<f64>) -> Result<()> {
        if self.features.is_empty() && self.feature_dim == 0 {
            self.feature_dim = values.len();
        }
        if values.len() != self.feature_dim {
            return Err(Error::Validation(format!(
                "feature vector of length {} for {target:?}, expected {}",
                values.len(),
                self.feature_dim
            )));
        }
        self.features.insert(target, values);
        Ok(())
    }

    /// Distinct risk levels present, or zero when none are recorded.
    pub fn risk_classes(&self) -> usize {
        self.labels
            .values()
            .filter_map(|l| l.risk_level)
            .max()
            .map_or(0, |m| m as usize + 1)
    }
}

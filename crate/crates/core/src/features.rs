//! Graph-derived tabular features per target, a logistic-regression
//! classifier over them, and permutation feature importance.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use dyhgn_tensor::stream_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::UnrolledGraph;
use crate::metrics::average_precision;
use crate::schema::{EntityRef, EventRecord, LabelSet, Schema};

/// Which events a target's features may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Every event in the log.
    Global,
    /// Events up to and including the target's creation week.
    Incremental,
}

impl FeatureMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "incremental" => Ok(Self::Incremental),
            other => Err(Error::Config(format!("unknown feature mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Incremental => "incremental",
        }
    }
}

/// A target and its creation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetSpec {
    pub entity: EntityRef,
    pub week: u32,
    pub day: u32,
}

/// Targets of a built graph with their creation times.
pub fn target_specs(graph: &UnrolledGraph) -> Vec<TargetSpec> {
    graph
        .targets()
        .iter()
        .map(|t| TargetSpec {
            entity: t.entity,
            week: t.week,
            day: t.day,
        })
        .collect()
}

/// Creation day and week plus, per relation, the usage count and the number
/// of distinct weeks of the target's linker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureRow {
    pub target_id: u64,
    pub day: u32,
    pub week: u32,
    pub relations: Vec<u32>,
    pub snapshots: Vec<u32>,
}

impl FeatureRow {
    /// Values in column order: day, week, relation counts, snapshot counts.
    pub fn values(&self) -> Vec<f64> {
        [self.day, self.week]
            .into_iter()
            .chain(self.relations.iter().copied())
            .chain(self.snapshots.iter().copied())
            .map(f64::from)
            .collect()
    }
}

/// Column names matching [`FeatureRow::values`].
pub fn feature_names(schema: &Schema) -> Vec<String> {
    let linkers: Vec<&str> = schema.linker_types().into_iter().map(|t| schema.type_name(t)).collect();
    ["day".to_string(), "week".to_string()]
        .into_iter()
        .chain(linkers.iter().map(|l| format!("relations_{l}")))
        .chain(linkers.iter().map(|l| format!("snapshots_{l}")))
        .collect()
}

pub fn extract_features(schema: &Schema, events: &[EventRecord], targets: &[TargetSpec], mode: FeatureMode) -> Result<Vec<FeatureRow>> {
    let n_rel = schema.n_relations();
    // Weeks of every use of each linker, and each target's linkers per relation.
    let mut usage: BTreeMap<EntityRef, Vec<u32>> = BTreeMap::new();
    let mut linked: BTreeMap<EntityRef, Vec<BTreeSet<EntityRef>>> = BTreeMap::new();
    for ev in events {
        schema.check_event(ev)?;
        usage.entry(ev.linker).or_default().push(ev.week);
        linked.entry(ev.target).or_insert_with(|| vec![BTreeSet::new(); n_rel])[ev.relation.0].insert(ev.linker);
    }
    targets
        .iter()
        .map(|t| {
            let per_rel = linked
                .get(&t.entity)
                .ok_or_else(|| Error::Validation(format!("target {:?} has no events", t.entity)))?;
            let mut relations = vec![0; n_rel];
            let mut snapshots = vec![0; n_rel];
            for (r, linkers) in per_rel.iter().enumerate() {
                if linkers.len() > 1 {
                    log::warn!(
                        "target {} has {} linkers for relation `{}`; using the most used",
                        t.entity.id,
                        linkers.len(),
                        schema.relation_name(crate::schema::RelationType(r))
                    );
                }
                let mut best = (0u32, 0u32);
                for l in linkers {
                    let weeks = usage[l].iter().filter(|&&w| mode == FeatureMode::Global || w <= t.week);
                    let count = weeks.clone().count() as u32;
                    let distinct = weeks.collect::<BTreeSet<_>>().len() as u32;
                    best = best.max((count, distinct));
                }
                relations[r] = best.0;
                snapshots[r] = best.1;
            }
            Ok(FeatureRow {
                target_id: t.entity.id,
                day: t.day,
                week: t.week,
                relations,
                snapshots,
            })
        })
        .collect()
}

pub fn write_feature_rows<W: Write>(w: W, schema: &Schema, rows: &[FeatureRow], labels: &LabelSet) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let mut header = vec!["target_id".to_string()];
    header.extend(feature_names(schema));
    header.push("label".into());
    out.write_record(&header)?;
    let target = schema.target_type;
    for row in rows {
        let label = labels
            .labels
            .get(&EntityRef::new(target, row.target_id))
            .map_or(String::new(), |l| l.binary.to_string());
        let mut rec = vec![row.target_id.to_string(), row.day.to_string(), row.week.to_string()];
        rec.extend(row.relations.iter().chain(&row.snapshots).map(u32::to_string));
        rec.push(label);
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("<feature csv>", e))?;
    Ok(())
}

/// Reads a feature CSV back into rows and (optional) binary labels.
pub fn read_feature_rows<R: Read>(r: R, schema: &Schema) -> Result<Vec<(FeatureRow, Option<u8>)>> {
    let n_rel = schema.n_relations();
    let mut reader = csv::Reader::from_reader(r);
    let mut expected = vec!["target_id".to_string()];
    expected.extend(feature_names(schema));
    expected.push("label".into());
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != expected {
        return Err(Error::Validation(format!("feature header {header:?} does not match {expected:?}")));
    }
    let parse = |s: &str, line: u64| -> Result<u64> {
        s.trim()
            .parse()
            .map_err(|_| Error::Validation(format!("line {line}: `{s}` is not a nonnegative integer")))
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let nums = (0..3 + 2 * n_rel)
            .map(|i| parse(&rec[i], line))
            .collect::<Result<Vec<u64>>>()?;
        let label = match rec[3 + 2 * n_rel].trim() {
            "" => None,
            s => Some(parse(s, line)? as u8),
        };
        rows.push((
            FeatureRow {
                target_id: nums[0],
                day: nums[1] as u32,
                week: nums[2] as u32,
                relations: nums[3..3 + n_rel].iter().map(|&v| v as u32).collect(),
                snapshots: nums[3 + n_rel..].iter().map(|&v| v as u32).collect(),
            },
            label,
        ));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub l2: f64,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            lr: 0.5,
            epochs: 500,
        }
    }
}

/// Logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Weight per standardized feature; 0 for dropped features.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// False for zero-variance features, which the model ignores.
    pub kept: Vec<bool>,
}

impl LinearModel {
    pub fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, x)| if self.kept[j] { (x - self.mean[j]) / self.std[j] } else { 0.0 })
            .collect()
    }

    pub fn logit(&self, row: &[f64]) -> f64 {
        self.standardize(row)
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * w)
            .sum::<f64>()
            + self.bias
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        sigmoid(self.logit(row))
    }

    /// Gradient of the mean cross-entropy with respect to the weights and
    /// bias, on already standardized rows (the L2 term is excluded).
    pub fn gradient(&self, standardized: &[Vec<f64>], labels: &[u8]) -> (Vec<f64>, f64) {
        let n = standardized.len() as f64;
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = 0.0;
        for (x, &y) in standardized.iter().zip(labels) {
            let z: f64 = x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias;
            let e = sigmoid(z) - f64::from(y);
            gb += e;
            for (g, xj) in gw.iter_mut().zip(x) {
                *g += e * xj;
            }
        }
        gw.iter_mut().for_each(|g| *g /= n);
        (gw, gb / n)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Initial model: zero weights, zero bias, standardization fitted on `rows`.
pub fn init_linear(rows: &[Vec<f64>], l2: f64) -> Result<LinearModel> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Validation("cannot fit on zero rows".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Validation("feature rows have differing widths".into()));
    }
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for j in 0..d {
        mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        std[j] = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt();
    }
    let kept: Vec<bool> = std.iter().map(|&s| s > 1e-12).collect();
    for (j, k) in kept.iter().enumerate() {
        if !k {
            log::warn!("feature {j} has zero variance and is dropped");
        }
    }
    Ok(LinearModel {
        weights: vec![0.0; d],
        bias: 0.0,
        l2,
        mean,
        std,
        kept,
    })
}

/// Full-batch gradient descent on L2-regularized cross-entropy. The
/// shrinkage step is applied in closed form, so any `l2 ≥ 0` is stable.
pub fn fit_linear(rows: &[Vec<f64>], labels: &[u8], config: &LinearConfig) -> Result<LinearModel> {
    if rows.len() != labels.len() {
        return Err(Error::Validation(format!("{} rows but {} labels", rows.len(), labels.len())));
    }
    if !(config.l2 >= 0.0 && config.lr > 0.0) {
        return Err(Error::Config("l2 must be nonnegative and lr positive".into()));
    }
    let mut model = init_linear(rows, config.l2)?;
    let standardized: Vec<Vec<f64>> = rows.iter().map(|r| model.standardize(r)).collect();
    for _ in 0..config.epochs {
        let (gw, gb) = model.gradient(&standardized, labels);
        for ((w, g), &k) in model.weights.iter_mut().zip(&gw).zip(&model.kept) {
            *w = if k { (*w - config.lr * g) / (1.0 + config.lr * config.l2) } else { 0.0 };
        }
        model.bias -= config.lr * gb;
    }
    if !model.weights.iter().all(|w| w.is_finite()) || !model.bias.is_finite() {
        return Err(Error::Divergence("logistic regression produced non-finite parameters".into()));
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub feature: String,
    pub mean_ap_drop: f64,
    pub std: f64,
}

fn scores(model: &LinearModel, rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().map(|r| model.predict_proba(r)).collect()
}

/// Mean and standard deviation of the AP drop when one column is shuffled.
/// Each repeat draws one row permutation shared by all features.
pub fn permutation_importance(
    model: &LinearModel,
    rows: &[Vec<f64>],
    labels: &[u8],
    names: &[String],
    repeats: usize,
    seed: u64,
) -> Result<Vec<Importance>> {
    let d = model.weights.len();
    if names.len() != d {
        return Err(Error::Validation(format!("{} names for {d} features", names.len())));
    }
    if repeats == 0 {
        return Err(Error::Config("permutation importance needs at least one repeat".into()));
    }
    let baseline = average_precision(&scores(model, rows), labels)?;
    let perms: Vec<Vec<usize>> = (0..repeats)
        .map(|k| {
            let mut p: Vec<usize> = (0..rows.len()).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, k as u64)));
            p
        })
        .collect();
    (0..d)
        .map(|j| {
            let drops = perms
                .iter()
                .map(|perm| {
                    let shuffled: Vec<Vec<f64>> = rows
                        .iter()
                        .zip(perm)
                        .map(|(r, &src)| {
                            let mut r = r.clone();
                            r[j] = rows[src][j];
                            r
                        })
                        .collect();
                    Ok(baseline - average_precision(&scores(model, &shuffled), labels)?)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = drops.iter().sum::<f64>() / repeats as f64;
            let var = drops.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / repeats as f64;
            Ok(Importance {
                feature: names[j].clone(),
                mean_ap_drop: mean,
                std: var.sqrt(),
            })
        })
        .collect()
}

pub fn write_importance<W: Write>(w: W, importances: &[Importance]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(["feature", "mean_ap_drop", "std"])?;
    for imp in importances {
        out.write_record([imp.feature.clone(), imp.mean_ap_drop.to_string(), imp.std.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("<importance csv>", e))?;
    Ok(())
}

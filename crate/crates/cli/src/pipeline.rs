//! Command building blocks shared by the binary and the acceptance suite.

use std::path::Path;

use dyhgn_core::data::{chronological_split, generate, GeneratorConfig, Split, SplitPolicy, SyntheticData, TargetTime};
use dyhgn_core::error::{Error, Result};
use dyhgn_core::features::{
    extract_features, feature_names, fit_linear, permutation_importance, target_specs, FeatureMode, Importance, LinearConfig,
};
use dyhgn_core::graph::UnrolledGraph;
use dyhgn_core::io::{read_dataset, read_json};
use dyhgn_core::metrics::{average_precision, roc_auc};
use dyhgn_core::models::{assemble, train, EvalMetrics, GraphContext, Model, ModelConfig, TrainReport};
use dyhgn_core::schema::DatasetKind;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, SPLIT_RATIOS};

/// Generator settings stored next to generated CSVs.
pub const GENERATOR_FILE: &str = "generator.json";

/// An event log with its labels and snapshot count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub data: SyntheticData,
    pub weeks: u32,
}

impl Dataset {
    pub fn generated(config: &GeneratorConfig) -> Result<Self> {
        Ok(Self {
            kind: config.dataset,
            data: generate(config)?,
            weeks: config.weeks,
        })
    }

    /// Reads a dataset directory. The snapshot count comes from
    /// `generator.json` when present and from the latest event otherwise.
    pub fn read(kind: DatasetKind, dir: &Path) -> Result<Self> {
        let data = read_dataset(dir, &kind.schema())?;
        let meta = dir.join(GENERATOR_FILE);
        let weeks = if meta.exists() {
            let g: GeneratorConfig = read_json(&meta)?;
            if g.dataset != kind {
                return Err(Error::Config(format!("{} was generated for {}, not {kind}", dir.display(), g.dataset)));
            }
            g.weeks
        } else {
            data.events.iter().map(|e| e.week).max().unwrap_or(0)
        };
        if weeks == 0 {
            return Err(Error::Validation(format!("{} holds no events", dir.display())));
        }
        Ok(Self { kind, data, weeks })
    }

    pub fn load(kind: DatasetKind, config: &DataConfig) -> Result<Self> {
        match &config.path {
            Some(dir) => Self::read(kind, dir),
            None => Self::generated(&config.generator),
        }
    }

    pub fn graph(&self) -> Result<UnrolledGraph> {
        UnrolledGraph::build(&self.kind.schema(), &self.data.events, &self.data.labels, self.weeks)
    }
}

/// Split of `graph.targets()` indices.
pub fn split_targets(graph: &UnrolledGraph, policy: SplitPolicy, seed: u64) -> Result<Split> {
    let times: Vec<TargetTime> = graph
        .targets()
        .iter()
        .map(|t| TargetTime {
            week: t.week,
            day: t.day,
            id: t.entity.id,
        })
        .collect();
    chronological_split(&times, SPLIT_RATIOS, policy, seed)
}

/// AP and, when both classes occur, AUC.
pub fn score_metrics(scores: &[f64], labels: &[u8]) -> Result<EvalMetrics> {
    Ok(EvalMetrics {
        ap: average_precision(scores, labels)?,
        auc: roc_auc(scores, labels).ok(),
        n: labels.len(),
        positives: labels.iter().filter(|&&y| y == 1).count(),
    })
}

/// Feature rows and binary labels of every target, in graph target order.
pub fn feature_matrix(graph: &UnrolledGraph, mode: FeatureMode) -> Result<(Vec<Vec<f64>>, Vec<u8>)> {
    let rows = extract_features(graph.schema(), graph.events(), &target_specs(graph), mode)?;
    let x = rows.iter().map(|r| r.values()).collect();
    let y = graph.targets().iter().map(|t| t.binary).collect();
    Ok((x, y))
}

fn take<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// One cell of the global/incremental × split-policy comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub mode: FeatureMode,
    pub split: SplitPolicy,
    pub n_train: usize,
    pub test: EvalMetrics,
}

/// Fits the linear model on the train split and scores the test split.
pub fn run_baseline(graph: &UnrolledGraph, mode: FeatureMode, split: SplitPolicy, split_seed: u64, linear: &LinearConfig) -> Result<BaselineResult> {
    let (x, y) = feature_matrix(graph, mode)?;
    let s = split_targets(graph, split, split_seed)?;
    let model = fit_linear(&take(&x, &s.train), &take(&y, &s.train), linear)?;
    let scores: Vec<f64> = s.test.iter().map(|&i| model.predict_proba(&x[i])).collect();
    Ok(BaselineResult {
        mode,
        split,
        n_train: s.train.len(),
        test: score_metrics(&scores, &take(&y, &s.test))?,
    })
}

/// Fitted weights and test-split permutation importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub mode: FeatureMode,
    pub split: SplitPolicy,
    pub test_ap: f64,
    pub weights: Vec<(String, f64)>,
    pub importance: Vec<Importance>,
}

impl ImportanceReport {
    /// Feature names ordered by decreasing mean AP drop.
    pub fn ranking(&self) -> Vec<&str> {
        let mut sorted: Vec<&Importance> = self.importance.iter().collect();
        sorted.sort_by(|a, b| b.mean_ap_drop.total_cmp(&a.mean_ap_drop));
        sorted.iter().map(|i| i.feature.as_str()).collect()
    }
}

pub fn run_importance(
    graph: &UnrolledGraph,
    mode: FeatureMode,
    split: SplitPolicy,
    split_seed: u64,
    linear: &LinearConfig,
    repeats: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    let (x, y) = feature_matrix(graph, mode)?;
    let s = split_targets(graph, split, split_seed)?;
    let model = fit_linear(&take(&x, &s.train), &take(&y, &s.train), linear)?;
    let names = feature_names(graph.schema());
    let (tx, ty) = (take(&x, &s.test), take(&y, &s.test));
    let scores: Vec<f64> = tx.iter().map(|r| model.predict_proba(r)).collect();
    let importance = permutation_importance(&model, &tx, &ty, &names, repeats, seed)?;
    Ok(ImportanceReport {
        mode,
        split,
        test_ap: average_precision(&scores, &ty)?,
        weights: names.iter().cloned().zip(model.weights.iter().copied()).collect(),
        importance,
    })
}

/// Trains one model with seed `seed` on a prepared context.
pub fn train_seed(ctx: &GraphContext, split: &Split, config: &ModelConfig, seed: u64) -> Result<(TrainReport, Box<dyn Model>)> {
    let config = ModelConfig { seed, ..config.clone() };
    let mut model = assemble(ctx, &config)?;
    let report = train(model.as_mut(), ctx, split, &config)?;
    Ok((report, model))
}

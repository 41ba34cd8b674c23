//! Synthetic event logs with planted reuse patterns, and train/val/test
//! splitting.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{DatasetKind, EntityRef, EventRecord, LabelSet, RelationType, TargetLabel};

/// Weekly positive rates with peaks at weeks 2 and 8 inside a 40-65% band.
pub const UNEVEN_SCHEDULE: [f64; 13] = [
    0.58, 0.65, 0.56, 0.49, 0.45, 0.47, 0.55, 0.64, 0.54, 0.47, 0.43, 0.40, 0.44,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Uneven,
    Even,
    ImbalancedTxn,
    ImbalancedAccount,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uneven" => Ok(Self::Uneven),
            "even" => Ok(Self::Even),
            "imbalanced-txn" => Ok(Self::ImbalancedTxn),
            "imbalanced-account" => Ok(Self::ImbalancedAccount),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Uneven => "uneven",
            Self::Even => "even",
            Self::ImbalancedTxn => "imbalanced-txn",
            Self::ImbalancedAccount => "imbalanced-account",
        }
    }

    /// Per-week positive probability for `weeks` snapshots.
    pub fn schedule(self, weeks: u32) -> Vec<f64> {
        match self {
            Self::Uneven => (0..weeks as usize).map(|w| UNEVEN_SCHEDULE[w % UNEVEN_SCHEDULE.len()]).collect(),
            Self::Even => vec![0.5; weeks as usize],
            Self::ImbalancedTxn => vec![0.015; weeks as usize],
            Self::ImbalancedAccount => vec![0.035; weeks as usize],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub dataset: DatasetKind,
    pub weeks: u32,
    pub n_targets: usize,
    /// Pool size per linker type, in relation order.
    pub pool_sizes: Vec<usize>,
    /// Probability that a target links to a linker of each type.
    pub link_probability: Vec<f64>,
    /// Fraction of each pool that is "hot" (heavily reused by risky targets).
    pub hot_fraction: f64,
    /// Number of consecutive weeks a hot linker stays active.
    pub hot_window: u32,
    /// Per-week positive-label probability.
    pub fraud_rate: Vec<f64>,
    /// Probability that a risky target attaches to an active hot linker of
    /// the primary linker type; other types use half this strength.
    pub planted_strength: f64,
    pub feature_dim: usize,
    /// Mahalanobis distance between the class-conditional feature means.
    pub feature_separation: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn preset(dataset: DatasetKind, preset: Preset, n_targets: usize, seed: u64) -> Self {
        let weeks = match dataset {
            DatasetKind::MassReg => 13,
            _ => 6,
        };
        let frac: Vec<f64> = match dataset {
            DatasetKind::MassReg => vec![0.08, 0.06, 0.06, 0.10],
            DatasetKind::XFraudTxn => vec![0.10, 0.12, 0.05, 0.15],
            DatasetKind::XFraudAccount => vec![1.0, 0.10, 0.12, 0.05],
        };
        let link_probability = match dataset {
            DatasetKind::MassReg => vec![1.0, 1.0, 0.8, 0.3],
            _ => vec![1.0; 4],
        };
        Self {
            dataset,
            weeks,
            n_targets,
            pool_sizes: frac.iter().map(|f| ((f * n_targets as f64).ceil() as usize).max(1)).collect(),
            link_probability,
            hot_fraction: 0.05,
            hot_window: 3,
            fraud_rate: preset.schedule(weeks),
            planted_strength: 0.8,
            feature_dim: dataset.default_feature_dim(),
            feature_separation: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n_rel = self.dataset.schema().n_relations();
        if self.weeks == 0 {
            return Err(Error::Config("weeks must be positive".into()));
        }
        if self.fraud_rate.len() != self.weeks as usize {
            return Err(Error::Config(format!(
                "fraud-rate schedule has {} entries for {} weeks",
                self.fraud_rate.len(),
                self.weeks
            )));
        }
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if let Some(p) = self.fraud_rate.iter().find(|p| !prob_ok(**p)) {
            return Err(Error::Config(format!("fraud rate {p} outside [0, 1]")));
        }
        if self.pool_sizes.len() != n_rel || self.link_probability.len() != n_rel {
            return Err(Error::Config(format!("expected {n_rel} linker pools")));
        }
        if self.pool_sizes.contains(&0) {
            return Err(Error::Config("linker pool sizes must be at least 1".into()));
        }
        for p in self
            .link_probability
            .iter()
            .chain([&self.hot_fraction, &self.planted_strength])
        {
            if !prob_ok(*p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.hot_window == 0 {
            return Err(Error::Config("hot window must be at least one week".into()));
        }
        Ok(())
    }

    /// Linker type that carries the full planted strength.
    fn primary_linker(&self) -> usize {
        match self.dataset {
            DatasetKind::MassReg => 1,
            DatasetKind::XFraudTxn => 0,
            DatasetKind::XFraudAccount => 1,
        }
    }
}

/// Output of [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub events: Vec<EventRecord>,
    pub labels: LabelSet,
}

struct Pool {
    size: u64,
    hot: Vec<(u64, u32)>,
}

impl Pool {
    fn new(size: usize, hot_fraction: f64, weeks: u32, window: u32, rng: &mut ChaCha8Rng) -> Self {
        let n_hot = ((size as f64 * hot_fraction).round() as usize).min(size);
        let last_start = weeks.saturating_sub(window) + 1;
        let hot = (0..n_hot as u64).map(|id| (id, rng.gen_range(1..=last_start))).collect();
        Self { size: size as u64, hot }
    }

    fn uniform(&self, rng: &mut ChaCha8Rng) -> u64 {
        rng.gen_range(0..self.size)
    }

    fn hot_active(&self, week: u32, window: u32, rng: &mut ChaCha8Rng) -> Option<u64> {
        let active: Vec<u64> = self
            .hot
            .iter()
            .filter(|(_, start)| week >= *start && week < start + window)
            .map(|(id, _)| *id)
            .collect();
        if let Some(&id) = active.choose(rng) {
            return Some(id);
        }
        self.hot.choose(rng).map(|(id, _)| *id)
    }
}

/// Draws an event log, labels and features. Deterministic per `config.seed`.
pub fn generate(config: &GeneratorConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schema = config.dataset.schema();
    let pools: Vec<Pool> = config
        .pool_sizes
        .iter()
        .map(|&s| Pool::new(s, config.hot_fraction, config.weeks, config.hot_window, &mut rng))
        .collect();

    let informative = config.feature_dim.min(16);
    let shift: Vec<f64> = (0..config.feature_dim)
        .map(|j| {
            if j < informative {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                sign * config.feature_separation / (informative as f64).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let draw_features = |rng: &mut ChaCha8Rng, positive: bool| -> Vec<f64> {
        shift
            .iter()
            .map(|&s| {
                let noise: f64 = StandardNormal.sample(rng);
                if positive {
                    noise + s
                } else {
                    noise
                }
            })
            .collect()
    };

    let primary = config.primary_linker();
    let per_buyer_txn = matches!(config.dataset, DatasetKind::XFraudAccount);
    let mut next_txn_id = 0u64;
    let mut events = Vec::new();
    let mut labels = LabelSet {
        feature_dim: config.feature_dim,
        ..Default::default()
    };

    for t in 0..config.n_targets as u64 {
        let week = rng.gen_range(1..=config.weeks);
        let day = 7 * week + rng.gen_range(0..7);
        let positive = rng.gen::<f64>() < config.fraud_rate[week as usize - 1];
        let risk_level = if positive { rng.gen_range(1..=3u8) } else { 0 };
        let target = EntityRef::new(schema.target_type, t);
        labels.insert(
            target,
            TargetLabel {
                binary: u8::from(positive),
                risk_level: Some(risk_level),
            },
        )?;

        let mut feature_acc: Option<Vec<f64>> = None;
        for (r, spec) in schema.relations.iter().enumerate() {
            if per_buyer_txn && r == 0 {
                // each buyer owns 1-3 transactions; its features are their mean
                let k = rng.gen_range(1..=3);
                let mut mean = vec![0.0; config.feature_dim];
                for _ in 0..k {
                    let f = draw_features(&mut rng, positive);
                    mean.iter_mut().zip(&f).for_each(|(m, v)| *m += v / k as f64);
                    events.push(EventRecord {
                        target,
                        linker: EntityRef::new(spec.linker_type, next_txn_id),
                        relation: RelationType(r),
                        week,
                        day,
                    });
                    next_txn_id += 1;
                }
                feature_acc = Some(mean);
                continue;
            }
            if rng.gen::<f64>() >= config.link_probability[r] {
                continue;
            }
            let strength = if r == primary {
                config.planted_strength
            } else {
                config.planted_strength / 2.0
            };
            let planted = positive && rng.gen::<f64>() < strength;
            let id = match planted {
                true => pools[r]
                    .hot_active(week, config.hot_window, &mut rng)
                    .unwrap_or_else(|| pools[r].uniform(&mut rng)),
                false => pools[r].uniform(&mut rng),
            };
            events.push(EventRecord {
                target,
                linker: EntityRef::new(spec.linker_type, id),
                relation: RelationType(r),
                week,
                day,
            });
        }
        let features = feature_acc.unwrap_or_else(|| draw_features(&mut rng, positive));
        labels.set_features(target, features)?;
    }
    Ok(SyntheticData { events, labels })
}

/// Ids of hot linkers of relation `r` under `config` (regenerates the pools).
pub fn hot_linkers(config: &GeneratorConfig, r: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pools: Vec<Pool> = config
        .pool_sizes
        .iter()
        .map(|&s| Pool::new(s, config.hot_fraction, config.weeks, config.hot_window, &mut rng))
        .collect();
    pools[r].hot.iter().map(|(id, _)| *id).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPolicy {
    /// Train, validation and test are consecutive in time.
    Chronological,
    /// Test is the latest slice; train/validation are shuffled within the rest.
    RandomTrainval,
    /// Fully random assignment (the optimistic reference).
    Random,
}

impl SplitPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chronological" => Ok(Self::Chronological),
            "random-trainval" | "random_trainval" => Ok(Self::RandomTrainval),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("unknown split policy `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Chronological => "chronological",
            Self::RandomTrainval => "random-trainval",
            Self::Random => "random",
        }
    }
}

/// Creation time of a target, the sort key for splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TargetTime {
    pub week: u32,
    pub day: u32,
    pub id: u64,
}

/// Index sets into the target list passed to [`chronological_split`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub policy: SplitPolicy,
}

/// Sorts targets by creation time and cuts them 70/10/20 (or `ratios`).
pub fn chronological_split(times: &[TargetTime], ratios: (f64, f64, f64), policy: SplitPolicy, seed: u64) -> Result<Split> {
    let n = times.len();
    if n < 3 {
        return Err(Error::Validation(format!("need at least 3 targets to split, got {n}")));
    }
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| *r < 0.0) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| times[i]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if policy == SplitPolicy::Random {
        order.shuffle(&mut rng);
    }
    let n_test = (te * n as f64).round() as usize;
    let n_val = (va * n as f64).round() as usize;
    let n_train = n - n_test - n_val;
    let mut head = order[..n - n_test].to_vec();
    if policy == SplitPolicy::RandomTrainval {
        head.shuffle(&mut rng);
    }
    let mut split = Split {
        train: head[..n_train].to_vec(),
        val: head[n_train..].to_vec(),
        test: order[n - n_test..].to_vec(),
        policy,
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Per-week positive fraction of targets (index 0 is week 1).
pub fn weekly_positive_rate(data: &SyntheticData, weeks: u32) -> Vec<(usize, f64)> {
    let mut week_of = std::collections::BTreeMap::new();
    for ev in &data.events {
        week_of.entry(ev.target).or_insert(ev.week);
    }
    let mut pos = vec![0usize; weeks as usize];
    let mut tot = vec![0usize; weeks as usize];
    for (t, label) in &data.labels.labels {
        if let Some(&w) = week_of.get(t) {
            tot[w as usize - 1] += 1;
            pos[w as usize - 1] += label.binary as usize;
        }
    }
    tot.iter()
        .zip(&pos)
        .map(|(&t, &p)| (t, if t == 0 { 0.0 } else { p as f64 / t as f64 }))
        .collect()
}

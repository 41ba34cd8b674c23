//! One function per subcommand. Each resolves its configuration, creates the
//! run directory and returns its path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dyhgn_core::data::SplitPolicy;
use dyhgn_core::diachronic::Diachronic;
use dyhgn_core::error::{Error, Result};
use dyhgn_core::features::{extract_features, target_specs, write_feature_rows, write_importance, FeatureMode, LinearConfig};
use dyhgn_core::graph::GraphNode;
use dyhgn_core::io::{create_file, write_dataset, write_json};
use dyhgn_core::layers::ParamStore;
use dyhgn_core::models::{
    evaluate, load_checkpoint, save_checkpoint, summarize, Checkpoint, EvalMetrics, GraphContext, SeedSummary, TrainReport, Variant,
};
use dyhgn_core::schema::{DatasetKind, EntityRef};
use dyhgn_tensor::Tape;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::args::{BaselineArgs, CheckpointArgs, DataArgs, DataCommandArgs, FeaturizeArgs, GenerateArgs, ImportanceArgs, TrainArgs};
use crate::config::{
    dataset_of, model_defaults, BaselineConfig, BuildGraphConfig, ConfigFile, DataConfig, DataFlags, EvaluateConfig, ExportConfig,
    FeaturizeConfig, GenerateConfig, ImportanceConfig, TrainConfig,
};
use crate::pipeline::{run_baseline, run_importance, split_targets, train_seed, Dataset, GENERATOR_FILE};
use crate::run::{RunDir, TIMING_FILE};

pub const GRAPH_STATS_FILE: &str = "graph_stats.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const EVAL_FILE: &str = "eval.json";
pub const BASELINE_FILE: &str = "baseline.json";
pub const IMPORTANCE_JSON: &str = "importance.json";
pub const IMPORTANCE_CSV: &str = "importance.csv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const DATA_DIR: &str = "data";

/// Directory holding the checkpoint of seed index `k` inside a train run.
pub fn seed_dir(k: usize) -> String {
    format!("seed-{k}")
}

fn data_flags(args: &DataArgs) -> DataFlags {
    DataFlags {
        path: args.data.clone(),
        preset: args.preset.clone(),
        n_targets: args.n_targets,
        seed: args.seed,
    }
}

fn parse_list<T>(flag: Option<&str>, parse: impl Fn(&str) -> Result<T>) -> Result<Option<Vec<T>>> {
    flag.map(|s| s.split(',').map(|x| parse(x.trim())).collect()).transpose()
}

/// Resolves the data section shared by the data-reading commands.
fn data_config(dataset: DatasetKind, args: &DataArgs, file: &ConfigFile) -> Result<DataConfig> {
    DataConfig::defaults(dataset, &data_flags(args), file, "/data")
}

fn write_generated(dir: &Path, dataset: &Dataset, config: &DataConfig) -> Result<()> {
    write_dataset(dir, &dataset.kind.schema(), &dataset.data)?;
    write_json(&dir.join(GENERATOR_FILE), &config.generator)
}

pub fn generate(args: &GenerateArgs) -> Result<PathBuf> {
    let file = ConfigFile::load(args.run.config.as_deref())?;
    let dataset = dataset_of(args.dataset.as_deref(), &file)?;
    let flags = DataFlags {
        path: None,
        preset: args.preset.clone(),
        n_targets: args.n_targets,
        seed: args.seed,
    };
    let data = DataConfig::defaults(dataset, &flags, &file, "")?;
    let mut config = file.resolve(&GenerateConfig {
        dataset,
        preset: data.preset,
        generator: data.generator,
    })?;
    let mut data = DataConfig {
        path: None,
        preset: config.preset,
        generator: config.generator.clone(),
    };
    data.apply(&flags);
    data.validate(config.dataset)?;
    config.generator = data.generator.clone();

    let run = RunDir::create(args.run.out.as_deref(), "generate")?;
    run.echo_config("generate", &config)?;
    let ds = Dataset::generated(&config.generator)?;
    write_generated(run.path(), &ds, &data)?;
    info!("wrote {} events for {} targets", ds.data.events.len(), config.generator.n_targets);
    Ok(run.path().to_path_buf())
}

#[derive(Debug, Serialize)]
struct GraphReport {
    dataset: DatasetKind,
    snapshots: u32,
    stats: dyhgn_core::graph::GraphStats,
}

pub fn build_graph(args: &DataCommandArgs) -> Result<PathBuf> {
    let file = ConfigFile::load(args.run.config.as_deref())?;
    let dataset = dataset_of(args.data.dataset.as_deref(), &file)?;
    let mut config = file.resolve(&BuildGraphConfig {
        dataset,
        data: data_config(dataset, &args.data, &file)?,
    })?;
    config.data.apply(&data_flags(&args.data));
    config.data.validate(config.dataset)?;

    let run = RunDir::create(args.run.out.as_deref(), "build-graph")?;
    run.echo_config("build-graph", &config)?;
    let ds = Dataset::load(config.dataset, &config.data)?;
    let graph = ds.graph()?;
    run.write_json(
        GRAPH_STATS_FILE,
        &GraphReport {
            dataset: config.dataset,
            snapshots: ds.weeks,
            stats: graph.statistics(),
        },
    )?;
    Ok(run.path().to_path_buf())
}

fn diachronic_flag<T>(config: &mut TrainConfig, flag: &str, value: Option<T>, set: impl FnOnce(&mut dyhgn_core::diachronic::DiachronicConfig, T)) -> Result<()> {
    let Some(v) = value else { return Ok(()) };
    match config.model.diachronic.as_mut() {
        Some(de) => {
            set(de, v);
            Ok(())
        }
        None => Err(Error::Config(format!("{flag} applies only to diachronic variants, not {}", config.model.variant))),
    }
}

/// Resolves `train` settings: per-dataset defaults, then the file, then flags.
pub fn train_config(args: &TrainArgs, file: &ConfigFile) -> Result<TrainConfig> {
    let dataset = dataset_of(args.data.dataset.as_deref(), file)?;
    let model = model_defaults(dataset, args.variant.as_deref(), file, "/model/variant")?;
    let defaults = TrainConfig {
        dataset,
        data: data_config(dataset, &args.data, file)?,
        model,
        seeds: 1,
        split: SplitPolicy::RandomTrainval,
        split_seed: 0,
    };
    let mut c = file.resolve(&defaults)?;
    c.data.apply(&data_flags(&args.data));
    if let Some(v) = &args.variant {
        c.model.variant = Variant::parse(v)?;
    }
    if let Some(s) = args.data.seed {
        c.model.seed = s;
        c.split_seed = s;
    }
    if let Some(n) = args.seeds {
        c.seeds = n;
    }
    if let Some(s) = &args.split {
        c.split = SplitPolicy::parse(s)?;
    }
    if let Some(e) = args.epochs {
        c.model.max_epochs = e;
    }
    if let Some(p) = args.patience {
        c.model.patience = p;
    }
    if let Some(lr) = args.lr {
        c.model.lr = lr;
    }
    if let Some(n) = args.n_layers {
        c.model.n_layers = n;
    }
    if let Some(n) = args.n_hid {
        c.model.n_hid = n;
    }
    let aggregation = args.aggregation.as_deref().map(dyhgn_core::diachronic::Aggregation::parse).transpose()?;
    let score_mode = args.score_mode.as_deref().map(dyhgn_core::diachronic::ScoreMode::parse).transpose()?;
    diachronic_flag(&mut c, "--aggregation", aggregation, |de, v| de.aggregation = v)?;
    diachronic_flag(&mut c, "--score-mode", score_mode, |de, v| de.score_mode = v)?;
    diachronic_flag(&mut c, "--gamma", args.gamma, |de, v| de.gamma = v)?;
    diachronic_flag(&mut c, "--de-dim", args.de_dim, |de, v| de.dim = v)?;
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub dataset: DatasetKind,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub test: SeedSummary,
    pub runs: Vec<TrainReport>,
}

#[derive(Debug, Serialize)]
struct Timing {
    total_secs: f64,
    per_seed_secs: Vec<f64>,
}

pub fn train(args: &TrainArgs) -> Result<PathBuf> {
    let file = ConfigFile::load(args.run.config.as_deref())?;
    let config = train_config(args, &file)?;
    let run = RunDir::create(args.run.out.as_deref(), "train")?;
    run.echo_config("train", &config)?;
    let start = Instant::now();

    let ds = Dataset::load(config.dataset, &config.data)?;
    if config.data.path.is_none() {
        write_generated(&run.join(DATA_DIR), &ds, &config.data)?;
    }
    let ctx = GraphContext::new(ds.graph()?, config.dataset)?;
    let split = split_targets(&ctx.graph, config.split, config.split_seed)?;

    let mut reports = Vec::with_capacity(config.seeds);
    let mut per_seed = Vec::with_capacity(config.seeds);
    for k in 0..config.seeds {
        let seed = config.model.seed + k as u64;
        let (report, model) = train_seed(&ctx, &split, &config.model, seed)?;
        info!(
            "{} seed {seed}: best epoch {} val AP {:.4} test AP {:.4}",
            config.model.variant, report.best_epoch, report.val.ap, report.test.ap
        );
        let dir = run.join(&seed_dir(k));
        let model_config = dyhgn_core::models::ModelConfig { seed, ..config.model.clone() };
        save_checkpoint(&dir, model.as_ref(), config.dataset, &model_config, config.split, config.split_seed)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        per_seed.push(report.wall_clock_secs);
        reports.push(report);
    }
    let summary = TrainSummary {
        dataset: config.dataset,
        variant: config.model.variant,
        seeds: reports.iter().map(|r| r.seed).collect(),
        test: summarize(&reports)?,
        runs: reports,
    };
    run.write_json(SUMMARY_FILE, &summary)?;
    run.write_json(
        TIMING_FILE,
        &Timing {
            total_secs: start.elapsed().as_secs_f64(),
            per_seed_secs: per_seed,
        },
    )?;
    println!(
        "{} on {}: test AP {:.4} ± {:.4} over {} seed(s)",
        summary.variant, summary.dataset, summary.test.ap_mean, summary.test.ap_std, summary.test.n
    );
    Ok(run.path().to_path_buf())
}

/// Checkpoint and data paths from flags or the config file; the data
/// default is the `data` directory of the training run.
fn checkpoint_paths(args: &CheckpointArgs, file: &ConfigFile) -> Result<(PathBuf, PathBuf)> {
    let checkpoint = match (&args.checkpoint, file.str_at("/checkpoint")?) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(Error::Config("--checkpoint is required".into())),
    };
    let data = match (&args.data, file.str_at("/data")?) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => checkpoint
            .parent()
            .map(|p| p.join(DATA_DIR))
            .ok_or_else(|| Error::Config("--data is required".into()))?,
    };
    Ok((checkpoint, data))
}

fn restore(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, GraphContext)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let ds = Dataset::read(ckpt.manifest.dataset, data)?;
    let ctx = GraphContext::new(ds.graph()?, ckpt.manifest.dataset)?;
    Ok((ckpt, ctx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetKind,
    pub variant: Variant,
    pub split: SplitPolicy,
    pub val: EvalMetrics,
    pub test: EvalMetrics,
}

pub fn evaluate_checkpoint(args: &CheckpointArgs) -> Result<PathBuf> {
    let file = ConfigFile::load(args.run.config.as_deref())?;
    let (checkpoint, data) = checkpoint_paths(args, &file)?;
    let config = EvaluateConfig { checkpoint, data };
    let run = RunDir::create(args.run.out.as_deref(), "evaluate")?;
    run.echo_config("evaluate", &config)?;

    let (ckpt, ctx) = restore(&config.checkpoint, &config.data)?;
    let model = ckpt.restore(&ctx)?;
    let m = &ckpt.manifest;
    let split = split_targets(&ctx.graph, m.split_policy, m.split_seed)?;
    let report = EvalReport {
        dataset: m.dataset,
        variant: m.config.variant,
        split: m.split_policy,
        val: evaluate(model.as_ref(), &ctx, &split.val)?,
        test: evaluate(model.as_ref(), &ctx, &split.test)?,
    };
    run.write_json(EVAL_FILE, &report)?;
    println!("{}: val AP {:.4}, test AP {:.4}", report.variant, report.val.ap, report.test.ap);
    Ok(run.path().to_path_buf())
}

pub fn featurize(args: &FeaturizeArgs) -> Result<PathBuf> {
    let file = ConfigFile::load(args.run.config.as_deref())?;
    let dataset = dataset_of(args.data.dataset.as_deref(), &file)?;
    let mut config = file.resolve(&FeaturizeConfig {
        dataset,
        data: data_config(dataset, &args.data, &file)?,
        modes: vec![FeatureMode::Global, FeatureMode::Incremental],
    })?;
    config.data.apply(&data_flags(&args.data));
    if let Some(modes) = parse_list(args.mode.as_deref(), FeatureMode::parse)? {
        config.modes = modes;
    }
    config.data.validate(config.dataset)?;

    let run = RunDir::create(args.run.out.as_deref(), "featurize")?;
    run.echo_config("featurize", &config)?;
    let ds = Dataset::load(config.dataset, &config.data)?;
    let graph = ds.graph()?;
    let specs = target_specs(&graph);
    for &mode in &config.modes {
        let rows = extract_features(graph.schema(), graph.events(), &specs, mode)?;
        let path = run.join(&format!("features_{}.csv", mode.name()));
        write_feature_rows(create_file(&path)?, graph.schema(), &rows, &ds.data.labels)?;
    }
    Ok(run.path().to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub dataset: DatasetKind,
    pub results: Vec<crate::pipeline::BaselineResult>,
}

pub fn baseline(args: &BaselineArgs) -> Result<PathBuf> {
    let file = ConfigFile::load(args.run.config.as_deref())?;
    let dataset = dataset_of(args.data.dataset.as_deref(), &file)?;
    let mut config = file.resolve(&BaselineConfig {
        dataset,
        data: data_config(dataset, &args.data, &file)?,
        modes: vec![FeatureMode::Global, FeatureMode::Incremental],
        splits: vec![SplitPolicy::Random, SplitPolicy::Chronological],
        split_seed: 0,
        linear: LinearConfig::default(),
    })?;
    config.data.apply(&data_flags(&args.data));
    if let Some(modes) = parse_list(args.mode.as_deref(), FeatureMode::parse)? {
        config.modes = modes;
    }
    if let Some(splits) = parse_list(args.split.as_deref(), SplitPolicy::parse)? {
        config.splits = splits;
    }
    if let Some(s) = args.data.seed {
        config.split_seed = s;
    }
    config.data.validate(config.dataset)?;

    let run = RunDir::create(args.run.out.as_deref(), "baseline")?;
    run.echo_config("baseline", &config)?;
    let graph = Dataset::load(config.dataset, &config.data)?.graph()?;
    let mut results = Vec::new();
    for &mode in &config.modes {
        for &split in &config.splits {
            let r = run_baseline(&graph, mode, split, config.split_seed, &config.linear)?;
            println!("{:<12} {:<14} test AP {:.4}", mode.name(), split.name(), r.test.ap);
            results.push(r);
        }
    }
    run.write_json(
        BASELINE_FILE,
        &BaselineSummary {
            dataset: config.dataset,
            results,
        },
    )?;
    Ok(run.path().to_path_buf())
}

pub fn importance(args: &ImportanceArgs) -> Result<PathBuf> {
    let file = ConfigFile::load(args.run.config.as_deref())?;
    let dataset = dataset_of(args.data.dataset.as_deref(), &file)?;
    let mut config = file.resolve(&ImportanceConfig {
        dataset,
        data: data_config(dataset, &args.data, &file)?,
        mode: FeatureMode::Global,
        split: SplitPolicy::Random,
        split_seed: 0,
        repeats: 10,
        seed: 0,
        linear: LinearConfig::default(),
    })?;
    config.data.apply(&data_flags(&args.data));
    if let Some(m) = &args.mode {
        config.mode = FeatureMode::parse(m)?;
    }
    if let Some(s) = &args.split {
        config.split = SplitPolicy::parse(s)?;
    }
    if let Some(r) = args.repeats {
        config.repeats = r;
    }
    if let Some(s) = args.data.seed {
        config.split_seed = s;
        config.seed = s;
    }
    if config.repeats == 0 {
        return Err(Error::Config("--repeats must be at least 1".into()));
    }
    config.data.validate(config.dataset)?;

    let run = RunDir::create(args.run.out.as_deref(), "importance")?;
    run.echo_config("importance", &config)?;
    let graph = Dataset::load(config.dataset, &config.data)?.graph()?;
    let report = run_importance(&graph, config.mode, config.split, config.split_seed, &config.linear, config.repeats, config.seed)?;
    write_importance(create_file(&run.join(IMPORTANCE_CSV))?, &report.importance)?;
    run.write_json(IMPORTANCE_JSON, &report)?;
    println!("top features: {}", report.ranking().iter().take(3).copied().collect::<Vec<_>>().join(", "));
    Ok(run.path().to_path_buf())
}

pub fn export_embeddings(args: &CheckpointArgs) -> Result<PathBuf> {
    let file = ConfigFile::load(args.run.config.as_deref())?;
    let (checkpoint, data) = checkpoint_paths(args, &file)?;
    let config = ExportConfig { checkpoint, data };
    let (ckpt, ctx) = restore(&config.checkpoint, &config.data)?;
    let de_config = ckpt.manifest.config.diachronic.clone().ok_or_else(|| {
        Error::Config(format!("{} has no diachronic embeddings", ckpt.manifest.config.variant))
    })?;
    let run = RunDir::create(args.run.out.as_deref(), "export-embeddings")?;
    run.echo_config("export-embeddings", &config)?;

    let model = ckpt.restore(&ctx)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let de = Diachronic::for_graph(&mut store, "de", de_config, &ctx.graph, &mut rng)?;
    for i in 0..store.len() {
        let name = store.names()[i].clone();
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| Error::ParamTable(format!("checkpoint lacks `{name}`")))?;
        store.values_mut()[i] = model.params().value(id).clone();
    }

    // first event day of every (entity, week) appearance
    let mut first_day: BTreeMap<(EntityRef, u32), u32> = BTreeMap::new();
    for ev in ctx.graph.events() {
        for e in [ev.target, ev.linker] {
            let d = first_day.entry((e, ev.week)).or_insert(ev.day);
            *d = (*d).min(ev.day);
        }
    }
    let mut entities = Vec::new();
    let (mut weeks, mut days) = (Vec::new(), Vec::new());
    for node in ctx.graph.nodes() {
        if let GraphNode::Replica { entity, snapshot } = *node {
            if let Some(&day) = first_day.get(&(entity, snapshot)) {
                entities.push(entity);
                weeks.push(snapshot as f64);
                days.push(day as f64);
            }
        }
    }
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let z = de.entity_embeddings(&mut tape, &p, &entities, &weeks, &days)?;
    let z = tape.value(z);
    let d = z.shape()[1];

    let path = run.join(EMBEDDINGS_FILE);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create_file(&path)?);
    let schema = ctx.graph.schema();
    let mut header = vec!["node_type".to_string(), "entity_id".into(), "week".into(), "day".into()];
    header.extend((0..d).map(|j| format!("z{j}")));
    w.write_record(&header)?;
    for (i, e) in entities.iter().enumerate() {
        let mut rec = vec![
            schema.type_name(e.node_type).to_string(),
            e.id.to_string(),
            weeks[i].to_string(),
            days[i].to_string(),
        ];
        rec.extend(z.data()[i * d..(i + 1) * d].iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(run.path().to_path_buf())
}

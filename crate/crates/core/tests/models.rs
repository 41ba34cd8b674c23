use dyhgn_core::data::{chronological_split, generate, GeneratorConfig, Preset, Split, SplitPolicy, SyntheticData, TargetTime};
use dyhgn_core::diachronic::{Aggregation, DiachronicConfig, ScoreMode};
use dyhgn_core::graph::UnrolledGraph;
use dyhgn_core::layers::{Bound, ForwardCtx, ParamStore};
use dyhgn_core::models::{
    assemble, binary_scores, load_checkpoint, loss, predict, save_checkpoint, summarize, train, EvalMetrics, GraphContext,
    LabeledRow, Model, ModelConfig, Registry, TrainReport, Variant,
};
use dyhgn_core::schema::DatasetKind;
use dyhgn_core::Error;
use dyhgn_tensor::{gradcheck, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic(dataset: DatasetKind, n: usize, seed: u64) -> (GeneratorConfig, SyntheticData) {
    let cfg = GeneratorConfig::preset(dataset, Preset::Even, n, seed);
    let data = generate(&cfg).unwrap();
    (cfg, data)
}

fn context_of(dataset: DatasetKind, cfg: &GeneratorConfig, data: &SyntheticData) -> GraphContext {
    let graph = UnrolledGraph::build(&dataset.schema(), &data.events, &data.labels, cfg.weeks).unwrap();
    GraphContext::new(graph, dataset).unwrap()
}

fn context(dataset: DatasetKind, n: usize, seed: u64) -> GraphContext {
    let (cfg, data) = synthetic(dataset, n, seed);
    context_of(dataset, &cfg, &data)
}

fn split(ctx: &GraphContext, seed: u64) -> Split {
    let times: Vec<TargetTime> = ctx
        .graph
        .targets()
        .iter()
        .map(|t| TargetTime {
            week: t.week,
            day: t.day,
            id: t.entity.id,
        })
        .collect();
    chronological_split(&times, (0.7, 0.1, 0.2), SplitPolicy::RandomTrainval, seed).unwrap()
}

fn small(dataset: DatasetKind, variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::defaults(dataset, variant);
    c.n_layers = 2;
    c.n_hid = 8;
    c.n_heads = if variant.uses_heads() { 2 } else { 1 };
    c.max_epochs = 6;
    c.patience = 100;
    if let Some(de) = c.diachronic.as_mut() {
        de.dim = 4;
    }
    c
}

fn param(store: &ParamStore, name: &str) -> Tensor {
    store.value(store.find(name).unwrap()).clone()
}

fn rows(ctx: &GraphContext) -> Vec<LabeledRow> {
    ctx.graph
        .targets()
        .iter()
        .enumerate()
        .map(|(i, t)| LabeledRow {
            row: i,
            binary: t.binary,
            risk: t.risk_level,
        })
        .collect()
}

#[test]
fn registry_knows_every_variant() {
    let names = Registry::standard().names().into_iter().map(String::from).collect::<Vec<_>>();
    for v in Variant::ALL {
        assert!(names.contains(&v.name().to_string()), "{v}");
        assert_eq!(Variant::parse(v.name()).unwrap(), v);
    }
    assert!(matches!(Variant::parse("rgcn"), Err(Error::Config(_))));
}

#[test]
fn defaults_match_the_hyperparameter_table() {
    use DatasetKind::*;
    use Variant::*;
    let cell = |d, v| {
        let c = ModelConfig::defaults(d, v);
        (c.n_layers, c.n_hid, c.diachronic.map_or(0, |de| de.dim))
    };
    assert_eq!(cell(MassReg, Gat), (8, 256, 0));
    assert_eq!(cell(MassReg, DyhgnDe), (4, 256, 60));
    assert_eq!(cell(MassReg, DyhgnDeHgt), (4, 256, 30));
    assert_eq!(cell(XFraudTxn, SimpleHgn), (2, 64, 0));
    assert_eq!(cell(XFraudAccount, Dyhgn), (4, 128, 0));
    assert_eq!(cell(XFraudAccount, DyhgnDe), (2, 128, 10));
    for d in [MassReg, XFraudTxn, XFraudAccount] {
        for v in Variant::ALL {
            let c = ModelConfig::defaults(d, v);
            c.validate().unwrap();
            assert_eq!((c.dropout, c.lr, c.patience), (0.1, 1e-3, 64));
            assert_eq!(c.max_epochs, if v.uses_diachronic() { 128 } else { 2048 });
        }
    }
}

#[test]
fn config_validation_rejects_bad_heads_and_missing_sections() {
    let mut c = ModelConfig::defaults(DatasetKind::XFraudTxn, Variant::Gat);
    c.n_hid = 10;
    c.n_heads = 4;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = ModelConfig::defaults(DatasetKind::XFraudTxn, Variant::DyhgnDe);
    c.diachronic = None;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = ModelConfig::defaults(DatasetKind::XFraudTxn, Variant::Gcn);
    c.diachronic = Some(DiachronicConfig::default());
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn loss_of_confident_correct_logits_vanishes() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::from_rows(&[vec![20.0, -20.0], vec![-20.0, 20.0]]).unwrap());
    let rows = [
        LabeledRow { row: 0, binary: 0, risk: None },
        LabeledRow { row: 1, binary: 1, risk: None },
    ];
    let l = loss(&mut tape, logits, &rows, DatasetKind::XFraudTxn).unwrap();
    assert!(tape.value(l).data()[0] < 1e-6);
}

#[test]
fn loss_of_uniform_logits_is_ln2() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[3, 2]));
    let rows: Vec<LabeledRow> = (0..3).map(|i| LabeledRow { row: i, binary: (i % 2) as u8, risk: None }).collect();
    let l = loss(&mut tape, logits, &rows, DatasetKind::XFraudAccount).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn massreg_loss_averages_binary_and_risk_terms() {
    let data = vec![0.3, -0.2, 1.0, 0.5, -1.0, -0.7, 0.1, 0.0, 2.0, -0.5];
    let rows = [
        LabeledRow { row: 0, binary: 1, risk: Some(2) },
        LabeledRow { row: 1, binary: 0, risk: Some(0) },
    ];
    let ce = |z: &[f64], k: usize| {
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        lse - z[k]
    };
    let bin = (ce(&data[0..2], 1) + ce(&data[5..7], 0)) / 2.0;
    let risk = (ce(&data[2..5], 2) + ce(&data[7..10], 0)) / 2.0;
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::matrix(2, 5, data.clone()).unwrap());
    let l = loss(&mut tape, logits, &rows, DatasetKind::MassReg).unwrap();
    assert!((tape.value(l).data()[0] - (bin + risk) / 2.0).abs() < 1e-12);

    let missing = [LabeledRow { row: 0, binary: 1, risk: None }];
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::matrix(2, 5, data).unwrap());
    assert!(matches!(loss(&mut tape, logits, &missing, DatasetKind::MassReg), Err(Error::Validation(_))));
}

#[test]
fn binary_scores_are_positive_class_probabilities() {
    let t = Tensor::from_rows(&[vec![0.0, 0.0, 5.0], vec![0.0, 2.0f64.ln(), -3.0]]).unwrap();
    let s = binary_scores(&t);
    assert!((s[0] - 0.5).abs() < 1e-15);
    assert!((s[1] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn every_variant_produces_finite_logits_of_the_right_shape() {
    for dataset in [DatasetKind::MassReg, DatasetKind::XFraudTxn] {
        let ctx = context(dataset, 40, 3);
        for v in Variant::ALL {
            let model = assemble(&ctx, &small(dataset, v)).unwrap();
            assert_eq!(model.variant(), v);
            let logits = predict(model.as_ref(), &ctx).unwrap();
            assert_eq!(logits.shape(), &[ctx.target_nodes.len(), ctx.n_outputs()], "{v}");
            assert!(logits.is_finite(), "{v}");
        }
    }
}

#[test]
fn parameter_counts_grow_with_the_diachronic_parts() {
    let ctx = context(DatasetKind::XFraudTxn, 40, 4);
    let count = |v| assemble(&ctx, &small(DatasetKind::XFraudTxn, v)).unwrap().params().n_scalars();
    let (dy, de, hgt) = (count(Variant::Dyhgn), count(Variant::DyhgnDe), count(Variant::DyhgnDeHgt));
    assert!(de > dy, "{de} <= {dy}");
    assert!(hgt > de, "{hgt} <= {de}");
}

#[test]
fn assembled_variants_pass_gradient_checks() {
    let ctx = context(DatasetKind::MassReg, 16, 5);
    let targets = rows(&ctx);
    for v in Variant::ALL {
        let mut cfg = small(DatasetKind::MassReg, v);
        cfg.n_hid = 4;
        cfg.n_layers = 1;
        if let Some(de) = cfg.diachronic.as_mut() {
            de.dim = 2;
        }
        let model = assemble(&ctx, &cfg).unwrap();
        // Zero-initialized biases put zero-feature hub rows exactly on a ReLU
        // kink, so the check runs at a jittered point.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let inputs: Vec<Tensor> = model
            .params()
            .values()
            .iter()
            .map(|t| {
                let data = t.data().iter().map(|x| x + rng.gen_range(-0.1..0.1)).collect();
                Tensor::from_vec(t.shape().to_vec(), data).unwrap()
            })
            .collect();
        let check = gradcheck::check(
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let out = model
                    .forward(tape, &p, &ctx, &mut ForwardCtx::eval())
                    .map_err(|e| dyhgn_tensor::TensorError::Contract(e.to_string()))?;
                loss(tape, out.logits, &targets, ctx.dataset).map_err(|e| dyhgn_tensor::TensorError::Contract(e.to_string()))
            },
            &inputs,
            1e-5,
            Some(12),
            11,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{v}: {}", check.max_rel_error);
    }
}

/// With γ = 0 and mean aggregation the diachronic block is a fixed mean of
/// static triple products, so DyHGN-DE must equal DyHGN run on features
/// extended by that block.
#[test]
fn dyhgn_de_equals_dyhgn_on_precomputed_static_block() {
    let ctx = context(DatasetKind::XFraudAccount, 30, 6);
    let mut cfg = small(DatasetKind::XFraudAccount, Variant::DyhgnDe);
    cfg.diachronic = Some(DiachronicConfig {
        dim: 3,
        gamma: 0.0,
        aggregation: Aggregation::Mean,
        score_mode: ScoreMode::Full,
        ..DiachronicConfig::default()
    });
    let de_model = assemble(&ctx, &cfg).unwrap();
    let store = de_model.params();
    let a = param(store, "de.entity.a");
    let z = param(store, "de.relation.z");
    let g = &ctx.graph;
    let d = 3;
    let mut sums = vec![vec![0.0; d]; g.n_nodes()];
    let mut counts = vec![0usize; g.n_nodes()];
    for e in g.structural_edges() {
        let ev = g.events()[e.event];
        let t = g.hub(ev.target).unwrap() - g.n_replicas();
        let l = g.hub(ev.linker).unwrap() - g.n_replicas();
        for k in 0..d {
            sums[e.target][k] += a.get(t, k) * z.get(ev.relation.0, k) * a.get(l, k);
        }
        counts[e.target] += 1;
    }
    let f = ctx.feature_dim();
    let mut extended = Vec::with_capacity(g.n_nodes() * (f + d));
    for v in 0..g.n_nodes() {
        extended.extend_from_slice(ctx.features.row(v));
        for k in 0..d {
            extended.push(if counts[v] == 0 { 0.0 } else { sums[v][k] / counts[v] as f64 });
        }
    }
    let ext_ctx = ctx
        .with_features(Tensor::matrix(g.n_nodes(), f + d, extended).unwrap())
        .unwrap();
    let mut plain_cfg = small(DatasetKind::XFraudAccount, Variant::Dyhgn);
    plain_cfg.n_hid = cfg.n_hid;
    plain_cfg.n_layers = cfg.n_layers;
    let mut plain = assemble(&ext_ctx, &plain_cfg).unwrap();
    let names = plain.params().names().to_vec();
    let copied: Vec<Tensor> = names.iter().map(|n| param(store, n)).collect();
    plain.params_mut().load(&names, copied).unwrap();

    let lhs = predict(de_model.as_ref(), &ctx).unwrap();
    let rhs = predict(plain.as_ref(), &ext_ctx).unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-10, "{}", lhs.max_abs_diff(&rhs));
}

fn run(ctx: &GraphContext, cfg: &ModelConfig, sp: &Split) -> (TrainReport, Box<dyn Model>) {
    let mut model = assemble(ctx, cfg).unwrap();
    let report = train(model.as_mut(), ctx, sp, cfg).unwrap();
    (report, model)
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ctx = context(DatasetKind::XFraudTxn, 60, 7);
    let sp = split(&ctx, 1);
    for v in [Variant::Gcn, Variant::DyhgnDe] {
        let mut cfg = small(DatasetKind::XFraudTxn, v);
        cfg.lr = 0.0;
        let before = assemble(&ctx, &cfg).unwrap().params().values().to_vec();
        let (_, model) = run(&ctx, &cfg, &sp);
        assert_eq!(model.params().values(), before.as_slice(), "{v}");
    }
}

#[test]
fn test_labels_never_influence_training() {
    let (gen, mut data) = synthetic(DatasetKind::XFraudTxn, 60, 8);
    let ctx = context_of(DatasetKind::XFraudTxn, &gen, &data);
    let sp = split(&ctx, 2);
    for &i in &sp.test {
        let label = data.labels.labels.get_mut(&ctx.graph.targets()[i].entity).unwrap();
        label.binary = 1 - label.binary;
    }
    let corrupted = context_of(DatasetKind::XFraudTxn, &gen, &data);
    assert_ne!(
        sp.test.iter().map(|&i| corrupted.graph.targets()[i].binary).collect::<Vec<_>>(),
        sp.test.iter().map(|&i| ctx.graph.targets()[i].binary).collect::<Vec<_>>()
    );
    for v in [Variant::Dyhgn, Variant::Gat] {
        let cfg = small(DatasetKind::XFraudTxn, v);
        let (_, a) = run(&ctx, &cfg, &sp);
        let (_, b) = run(&corrupted, &cfg, &sp);
        assert_eq!(a.params().values(), b.params().values(), "{v}");
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let ctx = context(DatasetKind::MassReg, 50, 9);
    let sp = split(&ctx, 3);
    let cfg = small(DatasetKind::MassReg, Variant::DyhgnDeHgt);
    let (ra, a) = run(&ctx, &cfg, &sp);
    let (rb, b) = run(&ctx, &cfg, &sp);
    assert_eq!(a.params().values(), b.params().values());
    assert_eq!(ra.history, rb.history);
    let mut other = cfg.clone();
    other.seed = 1;
    let (_, c) = run(&ctx, &other, &sp);
    assert_ne!(a.params().values(), c.params().values());
}

#[test]
fn gcn_training_loss_decreases() {
    let ctx = context(DatasetKind::XFraudTxn, 80, 10);
    let sp = split(&ctx, 4);
    let mut cfg = small(DatasetKind::XFraudTxn, Variant::Gcn);
    cfg.max_epochs = 10;
    cfg.dropout = 0.0;
    cfg.lr = 0.01;
    let (report, _) = run(&ctx, &cfg, &sp);
    let first = report.history.first().unwrap().train_loss;
    let last = report.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn early_stopping_respects_patience_and_restores_best() {
    let ctx = context(DatasetKind::XFraudTxn, 60, 11);
    let sp = split(&ctx, 5);
    let mut cfg = small(DatasetKind::XFraudTxn, Variant::Gcn);
    cfg.max_epochs = 40;
    cfg.patience = 3;
    let (report, model) = run(&ctx, &cfg, &sp);
    assert!(report.epochs_run <= report.best_epoch + 1 + cfg.patience);
    let best_ap = report.history[report.best_epoch].val_ap;
    assert!(report.history.iter().all(|h| h.val_ap <= best_ap));
    assert!((report.val.ap - best_ap).abs() < 1e-12);
    let again = dyhgn_core::models::evaluate(model.as_ref(), &ctx, &sp.val).unwrap();
    assert_eq!(again.ap, report.val.ap);
}

#[test]
fn validation_without_positives_is_an_undefined_metric() {
    let ctx = context(DatasetKind::XFraudTxn, 60, 12);
    let mut sp = split(&ctx, 6);
    sp.val.retain(|&i| ctx.graph.targets()[i].binary == 0);
    let cfg = small(DatasetKind::XFraudTxn, Variant::Gcn);
    let mut model = assemble(&ctx, &cfg).unwrap();
    assert!(matches!(train(model.as_mut(), &ctx, &sp, &cfg), Err(Error::UndefinedMetric(_))));
}

#[test]
fn summary_uses_sample_standard_deviation() {
    let m = |ap| EvalMetrics { ap, auc: Some(ap), n: 10, positives: 3 };
    let report = |ap| TrainReport {
        variant: Variant::Gcn,
        seed: 0,
        n_params: 1,
        best_epoch: 0,
        epochs_run: 1,
        val: m(ap),
        test: m(ap),
        history: vec![],
        wall_clock_secs: 0.0,
    };
    let s = summarize(&[report(0.2), report(0.4), report(0.6)]).unwrap();
    assert!((s.ap_mean - 0.4).abs() < 1e-12);
    assert!((s.ap_std - 0.2).abs() < 1e-12);
    assert_eq!(s.n, 3);
}

#[test]
fn checkpoint_roundtrip_reproduces_predictions() {
    let ctx = context(DatasetKind::MassReg, 40, 13);
    let cfg = small(DatasetKind::MassReg, Variant::DyhgnDe);
    let model = assemble(&ctx, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), model.as_ref(), DatasetKind::MassReg, &cfg, SplitPolicy::Chronological, 3).unwrap();
    let ckpt = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ckpt.manifest.config, cfg);
    assert_eq!(ckpt.manifest.split_seed, 3);
    let restored = ckpt.restore(&ctx).unwrap();
    assert_eq!(restored.params().values(), model.params().values());
    assert_eq!(predict(restored.as_ref(), &ctx).unwrap(), predict(model.as_ref(), &ctx).unwrap());
}

#[test]
fn truncated_checkpoint_is_a_table_error() {
    let ctx = context(DatasetKind::XFraudTxn, 30, 14);
    let cfg = small(DatasetKind::XFraudTxn, Variant::Gcn);
    let model = assemble(&ctx, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), model.as_ref(), DatasetKind::XFraudTxn, &cfg, SplitPolicy::Random, 0).unwrap();
    let bin = dir.path().join(dyhgn_core::models::WEIGHTS_FILE);
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::ParamTable(_))));
}

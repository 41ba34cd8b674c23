use std::sync::Arc;

use dyhgn_core::graph::{normalize_with_self_loops, EdgeList};
use dyhgn_core::layers::{Bound, ForwardCtx, GatConv, GcnConv, HgtConv, Lstm, MlpHead, ParamStore, SimpleHgnConv};
use dyhgn_tensor::{gradcheck, CsrMatrix, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn edges(pairs: &[(usize, usize)], rel: &[usize]) -> EdgeList {
    EdgeList {
        src: pairs.iter().map(|p| p.0).collect(),
        dst: pairs.iter().map(|p| p.1).collect(),
        rel: rel.to_vec(),
    }
}

/// Random directed edges plus one self-loop per node, with random types.
fn random_graph(n: usize, m: usize, n_types: usize, rng: &mut ChaCha8Rng) -> EdgeList {
    let mut list = EdgeList::default();
    for _ in 0..m {
        list.src.push(rng.gen_range(0..n));
        list.dst.push(rng.gen_range(0..n));
        list.rel.push(rng.gen_range(0..n_types));
    }
    for i in 0..n {
        list.src.push(i);
        list.dst.push(i);
        list.rel.push(rng.gen_range(0..n_types));
    }
    list
}

fn to_tensor_err(e: dyhgn_core::Error) -> TensorError {
    TensorError::Contract(e.to_string())
}

fn weighted_sum(tape: &mut Tape, y: Var) -> dyhgn_tensor::Result<Var> {
    let n = tape.value(y).numel();
    let w: Arc<[f64]> = (0..n).map(|i| ((i * 5 % 13) as f64 - 6.0) / 4.0).collect::<Vec<_>>().into();
    let z = tape.mul_const(y, w)?;
    Ok(tape.sum(z))
}

/// Finite-difference check over the input and every parameter of a layer at
/// 10 random points.
fn check_layer<F>(name: &str, store: &ParamStore, x_shape: &[usize], forward: F)
where
    F: Fn(&mut Tape, &Bound, Var) -> dyhgn_core::Result<Var>,
{
    for point in 0..10u64 {
        let mut r = rng(500 + point);
        let mut inputs = vec![random(x_shape, &mut r)];
        inputs.extend(store.values().iter().map(|v| random(v.shape(), &mut r)));
        let f = |tape: &mut Tape, vars: &[Var]| {
            let p = Bound::from_vars(vars[1..].to_vec());
            let y = forward(tape, &p, vars[0]).map_err(to_tensor_err)?;
            weighted_sum(tape, y)
        };
        let report = gradcheck::check(f, &inputs, FD_STEP, Some(60), point).unwrap();
        assert!(report.max_rel_error < FD_TOL, "{name}: point {point} rel error {}", report.max_rel_error);
    }
}

fn eval_layer<F>(store: &ParamStore, x: &Tensor, forward: F) -> (Tensor, Option<Tensor>)
where
    F: Fn(&mut Tape, &Bound, Var) -> dyhgn_core::Result<(Var, Option<Var>)>,
{
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let (y, att) = forward(&mut tape, &p, xv).unwrap();
    (tape.value(y).clone(), att.map(|a| tape.value(a).clone()))
}

fn dense_gcn_oracle(n: usize, pairs: &[(usize, usize)], x: &Tensor, w: &Tensor) -> Tensor {
    let mut a = vec![vec![0.0; n]; n];
    for &(s, d) in pairs {
        a[d][s] = 1.0;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let (f, o) = (x.cols(), w.cols());
    let mut out = vec![0.0; n * o];
    for i in 0..n {
        for j in 0..n {
            let ahat = a[i][j] / (deg[i] * deg[j]).sqrt();
            if ahat == 0.0 {
                continue;
            }
            for k in 0..o {
                let xw: f64 = (0..f).map(|l| x.get(j, l) * w.get(l, k)).sum();
                out[i * o + k] += ahat * xw;
            }
        }
    }
    Tensor::from_vec(vec![n, o], out).unwrap()
}

fn gcn_layer(d_in: usize, d_out: usize, seed: u64) -> (ParamStore, GcnConv) {
    let mut store = ParamStore::new();
    let layer = GcnConv::new(&mut store, "gcn", d_in, d_out, false, &mut rng(seed)).unwrap();
    (store, layer)
}

#[test]
fn gcn_isolated_node_with_identity_weight_is_identity() {
    let (mut store, layer) = gcn_layer(3, 3, 1);
    *store.value_mut(layer.lin.w) = Tensor::eye(3);
    let adj = Arc::new(normalize_with_self_loops(1, &[], &[]));
    let x = m(&[&[0.5, -1.0, 2.0]]);
    let (y, _) = eval_layer(&store, &x, |t, p, xv| Ok((layer.forward(t, p, xv, &adj)?, None)));
    assert_eq!(y, x);
}

#[test]
fn gcn_two_node_graph_averages() {
    let (mut store, layer) = gcn_layer(1, 1, 1);
    *store.value_mut(layer.lin.w) = m(&[&[1.0]]);
    let adj = Arc::new(normalize_with_self_loops(2, &[0, 1], &[1, 0]));
    let x = m(&[&[1.0], &[0.0]]);
    let (y, _) = eval_layer(&store, &x, |t, p, xv| Ok((layer.forward(t, p, xv, &adj)?, None)));
    assert!((y.get(0, 0) - 0.5).abs() < 1e-15);
    assert!((y.get(1, 0) - 0.5).abs() < 1e-15);
}

#[test]
fn gcn_matches_dense_oracle_on_random_graphs() {
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let n = r.gen_range(2..=50);
        let pairs: Vec<(usize, usize)> = (0..r.gen_range(0..3 * n))
            .map(|_| (r.gen_range(0..n), r.gen_range(0..n)))
            .filter(|(a, b)| a != b)
            .flat_map(|(a, b)| [(a, b), (b, a)])
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let (src, dst): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let adj = Arc::new(normalize_with_self_loops(n, &src, &dst));
        let (store, layer) = gcn_layer(4, 3, seed);
        let x = random(&[n, 4], &mut r);
        let (y, _) = eval_layer(&store, &x, |t, p, xv| Ok((layer.forward(t, p, xv, &adj)?, None)));
        let oracle = dense_gcn_oracle(n, &pairs, &x, store.value(layer.lin.w));
        assert!(y.max_abs_diff(&oracle) < 1e-10, "seed {seed}");
    }
}

#[test]
fn gat_single_node_returns_projection() {
    let mut store = ParamStore::new();
    let layer = GatConv::new(&mut store, "gat", 3, 2, 2, &mut rng(3)).unwrap();
    let e = edges(&[(0, 0)], &[0]);
    let x = m(&[&[0.3, -0.2, 0.9]]);
    let (y, att) = eval_layer(&store, &x, |t, p, xv| {
        let a = layer.forward(t, p, xv, &e, 1)?;
        Ok((a.out, Some(a.weights)))
    });
    let wx = x.matmul(store.value(layer.w)).unwrap();
    assert!(y.max_abs_diff(&wx) < 1e-12);
    assert!(att.unwrap().data().iter().all(|&a| (a - 1.0).abs() < 1e-15));
}

#[test]
fn gat_identical_neighbors_share_attention() {
    let mut store = ParamStore::new();
    let layer = GatConv::new(&mut store, "gat", 2, 3, 2, &mut rng(4)).unwrap();
    let e = edges(&[(1, 0), (2, 0), (0, 0), (1, 1), (2, 2)], &[0; 5]);
    let x = m(&[&[1.0, 0.0], &[0.4, -0.7], &[0.4, -0.7]]);
    let (_, att) = eval_layer(&store, &x, |t, p, xv| {
        let a = layer.forward(t, p, xv, &e, 3)?;
        Ok((a.out, Some(a.weights)))
    });
    let att = att.unwrap();
    for h in 0..3 {
        assert!((att.get(0, h) - att.get(1, h)).abs() < 1e-15);
    }
}

fn assert_attention_normalized(weights: &Tensor, dst: &[usize], n: usize) {
    let heads = weights.cols();
    let mut sums = vec![0.0; n * heads];
    for (e, &d) in dst.iter().enumerate() {
        for h in 0..heads {
            sums[d * heads + h] += weights.get(e, h);
        }
    }
    for s in sums {
        assert!((s - 1.0).abs() < 1e-9, "attention sums to {s}");
    }
}

#[test]
fn attention_weights_sum_to_one_on_random_graphs() {
    for seed in 0..10u64 {
        let mut r = rng(seed);
        let n = r.gen_range(1..30);
        let e = random_graph(n, 3 * n, 3, &mut r);
        let x = random(&[n, 5], &mut r);
        let node_types: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();

        let mut store = ParamStore::new();
        let gat = GatConv::new(&mut store, "gat", 5, 2, 3, &mut r).unwrap();
        let shgn = SimpleHgnConv::new(&mut store, "shgn", 5, 2, 3, 3, true, true, &mut r).unwrap();
        let hgt = HgtConv::new(&mut store, "hgt", 5, 4, 2, 3, 2, 3, true, &mut r).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x);
        for att in [
            gat.forward(&mut tape, &p, xv, &e, n).unwrap(),
            shgn.forward(&mut tape, &p, xv, &e, n).unwrap(),
            hgt.forward(&mut tape, &p, xv, &node_types, &e).unwrap(),
        ] {
            assert_attention_normalized(tape.value(att.weights), &e.dst, n);
        }
    }
}

#[test]
fn attention_requires_incoming_edge_for_every_node() {
    let mut store = ParamStore::new();
    let gat = GatConv::new(&mut store, "gat", 2, 1, 2, &mut rng(1)).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(Tensor::zeros(&[2, 2]));
    let e = edges(&[(0, 0)], &[0]);
    assert!(matches!(
        gat.forward(&mut tape, &p, xv, &e, 2),
        Err(dyhgn_core::Error::Tensor(TensorError::Contract(_)))
    ));
}

#[test]
fn simple_hgn_rows_have_unit_norm() {
    let mut r = rng(8);
    let n = 12;
    let e = random_graph(n, 30, 4, &mut r);
    let mut store = ParamStore::new();
    let layer = SimpleHgnConv::new(&mut store, "shgn", 6, 2, 4, 4, true, true, &mut r).unwrap();
    let x = random(&[n, 6], &mut r);
    let (y, _) = eval_layer(&store, &x, |t, p, xv| Ok((layer.forward(t, p, xv, &e, n)?.out, None)));
    for i in 0..n {
        let norm: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn simple_hgn_edge_types_change_attention() {
    let mut store = ParamStore::new();
    let layer = SimpleHgnConv::new(&mut store, "shgn", 2, 1, 3, 2, true, true, &mut rng(9)).unwrap();
    let e = edges(&[(1, 0), (2, 0), (0, 0), (1, 1), (2, 2)], &[0, 1, 0, 0, 0]);
    let x = m(&[&[1.0, 0.5], &[0.2, 0.3], &[0.2, 0.3]]);
    let (_, att) = eval_layer(&store, &x, |t, p, xv| {
        let a = layer.forward(t, p, xv, &e, 3)?;
        Ok((a.out, Some(a.weights)))
    });
    let att = att.unwrap();
    assert!((att.get(0, 0) - att.get(1, 0)).abs() > 1e-6);
}

#[test]
fn simple_hgn_rejects_unknown_edge_type() {
    let mut store = ParamStore::new();
    let layer = SimpleHgnConv::new(&mut store, "shgn", 2, 1, 2, 2, true, true, &mut rng(1)).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(Tensor::zeros(&[1, 2]));
    let e = edges(&[(0, 0)], &[5]);
    assert!(matches!(layer.forward(&mut tape, &p, xv, &e, 1), Err(dyhgn_core::Error::Config(_))));
}

#[test]
fn simple_hgn_with_zero_type_embeddings_equals_gat() {
    for seed in 0..10u64 {
        let mut r = rng(seed);
        let n = r.gen_range(2..25);
        let e = random_graph(n, 3 * n, 3, &mut r);
        let x = random(&[n, 4], &mut r);

        let mut gat_store = ParamStore::new();
        let gat = GatConv::new(&mut gat_store, "l", 4, 2, 3, &mut r).unwrap();
        let mut hgn_store = ParamStore::new();
        let hgn = SimpleHgnConv::new(&mut hgn_store, "l", 4, 2, 3, 3, false, false, &mut r).unwrap();
        for id in [hgn.gat.w, hgn.gat.a_src, hgn.gat.a_dst] {
            let name = &hgn_store.names()[id.index()];
            let src = gat_store.find(name).unwrap();
            *hgn_store.value_mut(id) = gat_store.value(src).clone();
        }
        let zero = Tensor::zeros(hgn_store.value(hgn.edge_emb).shape());
        *hgn_store.value_mut(hgn.edge_emb) = zero;

        let (a, _) = eval_layer(&gat_store, &x, |t, p, xv| Ok((gat.forward(t, p, xv, &e, n)?.out, None)));
        let (b, _) = eval_layer(&hgn_store, &x, |t, p, xv| Ok((hgn.forward(t, p, xv, &e, n)?.out, None)));
        assert!(a.max_abs_diff(&b) < 1e-9, "seed {seed}");
    }
}

fn hgt_with_identity_tables(d: usize, heads: usize, n_types: usize, n_rel: usize) -> (ParamStore, HgtConv) {
    let mut store = ParamStore::new();
    let layer = HgtConv::new(&mut store, "hgt", d, d, heads, d / heads, n_types, n_rel, false, &mut rng(2)).unwrap();
    for ids in [&layer.key, &layer.query, &layer.value, &layer.out] {
        for &id in ids {
            *store.value_mut(id) = Tensor::eye(d);
        }
    }
    (store, layer)
}

/// Per-head scaled dot-product attention over incoming edges.
fn dot_attention_oracle(x: &Tensor, e: &EdgeList, heads: usize) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for h in 0..heads {
            let incoming: Vec<usize> = (0..e.len()).filter(|&k| e.dst[k] == i).collect();
            let logits: Vec<f64> = incoming
                .iter()
                .map(|&k| (0..dh).map(|c| x.get(i, h * dh + c) * x.get(e.src[k], h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (&k, l) in incoming.iter().zip(&logits) {
                let a = (l - max).exp() / z;
                for c in 0..dh {
                    out[i * d + h * dh + c] += a * x.get(e.src[k], h * dh + c);
                }
            }
        }
    }
    Tensor::from_vec(vec![n, d], out).unwrap()
}

#[test]
fn hgt_with_identity_tables_is_dot_product_attention() {
    for seed in 0..10u64 {
        let mut r = rng(seed);
        let n = r.gen_range(1..20);
        let e = random_graph(n, 2 * n, 3, &mut r);
        let node_types: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
        let x = random(&[n, 6], &mut r);
        let (store, layer) = hgt_with_identity_tables(6, 2, 2, 3);
        let (y, _) = eval_layer(&store, &x, |t, p, xv| Ok((layer.forward(t, p, xv, &node_types, &e)?.out, None)));
        let oracle = dot_attention_oracle(&x, &e, 2);
        assert!(y.max_abs_diff(&oracle) < 1e-9, "seed {seed}");
    }
}

#[test]
fn hgt_single_node_returns_value_projection() {
    let mut store = ParamStore::new();
    let layer = HgtConv::new(&mut store, "hgt", 3, 4, 2, 2, 1, 1, false, &mut rng(5)).unwrap();
    *store.value_mut(layer.out[0]) = Tensor::eye(4);
    let x = m(&[&[0.1, -0.4, 0.8]]);
    let e = edges(&[(0, 0)], &[0]);
    let (y, _) = eval_layer(&store, &x, |t, p, xv| Ok((layer.forward(t, p, xv, &[0], &e)?.out, None)));
    let vx = x.matmul(store.value(layer.value[0])).unwrap();
    assert!(y.max_abs_diff(&vx) < 1e-12);
}

#[test]
fn hgt_value_projection_depends_on_source_type() {
    let mut store = ParamStore::new();
    let layer = HgtConv::new(&mut store, "hgt", 2, 2, 1, 2, 2, 1, false, &mut rng(6)).unwrap();
    let x = m(&[&[0.5, 0.5], &[0.3, -0.6], &[0.3, -0.6], &[0.5, 0.5]]);
    // Node 0 listens to node 1 (type 0); node 3 listens to node 2 (type 1).
    let e = edges(&[(1, 0), (2, 3), (1, 1), (2, 2)], &[0; 4]);
    let types = [0, 0, 1, 0];
    let (y, _) = eval_layer(&store, &x, |t, p, xv| Ok((layer.forward(t, p, xv, &types, &e)?.out, None)));
    assert!((y.get(0, 0) - y.get(3, 0)).abs() > 1e-6 || (y.get(0, 1) - y.get(3, 1)).abs() > 1e-6);
}

#[test]
fn hgt_rejects_missing_type_table() {
    let (store, layer) = hgt_with_identity_tables(2, 1, 1, 1);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(Tensor::zeros(&[1, 2]));
    let e = edges(&[(0, 0)], &[0]);
    assert!(matches!(layer.forward(&mut tape, &p, xv, &[3], &e), Err(dyhgn_core::Error::Config(_))));
    assert!(matches!(
        layer.forward(&mut tape, &p, xv, &[0], &edges(&[(0, 0)], &[2])),
        Err(dyhgn_core::Error::Config(_))
    ));
}

fn lstm_run(store: &ParamStore, layer: &Lstm, seq: &[Vec<f64>]) -> Tensor {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let steps: Vec<Var> = seq
        .iter()
        .map(|s| tape.constant(Tensor::from_vec(vec![1, s.len()], s.clone()).unwrap()))
        .collect();
    let h = layer.forward_sequence(&mut tape, &p, &steps).unwrap();
    tape.value(h).clone()
}

#[test]
fn lstm_zero_weights_give_zero_state() {
    let mut store = ParamStore::new();
    let layer = Lstm::new(&mut store, "lstm", 3, 4, &mut rng(1)).unwrap();
    for v in store.values_mut() {
        *v = Tensor::zeros(v.shape());
    }
    let h = lstm_run(&store, &layer, &[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]);
    assert!(h.data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_single_step_matches_gate_formula() {
    let mut store = ParamStore::new();
    let layer = Lstm::new(&mut store, "lstm", 2, 3, &mut rng(2)).unwrap();
    let mut r = rng(3);
    *store.value_mut(layer.b) = random(&[12], &mut r);
    let x = [0.7, -1.3];
    let h = lstm_run(&store, &layer, &[x.to_vec()]);
    let (w, b) = (store.value(layer.w_ih), store.value(layer.b));
    let pre = |k: usize| x[0] * w.get(0, k) + x[1] * w.get(1, k) + b.data()[k];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    for j in 0..3 {
        let i = sig(pre(j));
        let g = pre(6 + j).tanh();
        let o = sig(pre(9 + j));
        let c = i * g;
        let expected = o * c.tanh();
        assert!((h.data()[j] - expected).abs() < 1e-14);
    }
}

#[test]
fn lstm_is_order_sensitive() {
    let mut store = ParamStore::new();
    let layer = Lstm::new(&mut store, "lstm", 3, 4, &mut rng(4)).unwrap();
    let mut r = rng(5);
    let seq: Vec<Vec<f64>> = (0..5).map(|_| random(&[3], &mut r).into_data()).collect();
    let mut rev = seq.clone();
    rev.reverse();
    let a = lstm_run(&store, &layer, &seq);
    let b = lstm_run(&store, &layer, &rev);
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn packed_lstm_matches_individual_sequences() {
    let mut store = ParamStore::new();
    let layer = Lstm::new(&mut store, "lstm", 3, 4, &mut rng(6)).unwrap();
    let mut r = rng(7);
    let inputs = random(&[20, 3], &mut r);
    let sequences: Vec<Vec<usize>> = (0..9)
        .map(|_| {
            let len = r.gen_range(0..6);
            (0..len).map(|_| r.gen_range(0..20)).collect()
        })
        .collect();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(inputs.clone());
    let out = layer.forward_packed(&mut tape, &p, xv, &sequences).unwrap();
    let packed = tape.value(out).clone();
    assert_eq!(packed.shape(), &[9, 4]);
    for (s, seq) in sequences.iter().enumerate() {
        if seq.is_empty() {
            assert!(packed.row(s).iter().all(|&v| v == 0.0));
            continue;
        }
        let steps: Vec<Vec<f64>> = seq.iter().map(|&i| inputs.row(i).to_vec()).collect();
        let single = lstm_run(&store, &layer, &steps);
        for j in 0..4 {
            assert!((packed.get(s, j) - single.data()[j]).abs() < 1e-14);
        }
    }
}

#[test]
fn lstm_rejects_empty_sequence() {
    let mut store = ParamStore::new();
    let layer = Lstm::new(&mut store, "lstm", 1, 1, &mut rng(1)).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    assert!(layer.forward_sequence(&mut tape, &p, &[]).is_err());
}

#[test]
fn mlp_head_with_zero_weights_is_uniform() {
    let mut store = ParamStore::new();
    let head = MlpHead::new(&mut store, "head", 4, 5, 3, &mut rng(1)).unwrap();
    for v in store.values_mut() {
        *v = Tensor::zeros(v.shape());
    }
    let x = random(&[6, 4], &mut rng(2));
    let (y, _) = eval_layer(&store, &x, |t, p, xv| {
        let logits = head.forward(t, p, xv, &mut ForwardCtx::eval())?;
        Ok((t.softmax_rows(logits), None))
    });
    assert!(y.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn mlp_head_eval_is_bit_identical() {
    let mut store = ParamStore::new();
    let head = MlpHead::new(&mut store, "head", 4, 5, 2, &mut rng(1)).unwrap();
    let x = random(&[6, 4], &mut rng(2));
    let run = || eval_layer(&store, &x, |t, p, xv| Ok((head.forward(t, p, xv, &mut ForwardCtx::eval())?, None))).0;
    assert_eq!(run(), run());
}

#[test]
fn layers_pass_finite_difference_checks() {
    let mut r = rng(11);
    let n = 7;
    let e = random_graph(n, 12, 3, &mut r);
    let (src, dst) = (e.src.clone(), e.dst.clone());
    let adj: Arc<CsrMatrix> = Arc::new(normalize_with_self_loops(n, &src, &dst));
    let node_types: Vec<usize> = (0..n).map(|i| i % 2).collect();

    let (store, gcn) = gcn_layer(3, 2, 1);
    check_layer("gcn", &store, &[n, 3], |t, p, x| gcn.forward(t, p, x, &adj));

    let mut store = ParamStore::new();
    let gat = GatConv::new(&mut store, "gat", 3, 2, 2, &mut r).unwrap();
    check_layer("gat", &store, &[n, 3], |t, p, x| Ok(gat.forward(t, p, x, &e, n)?.out));

    let mut store = ParamStore::new();
    let shgn = SimpleHgnConv::new(&mut store, "shgn", 3, 2, 2, 3, true, true, &mut r).unwrap();
    check_layer("simple-hgn", &store, &[n, 3], |t, p, x| Ok(shgn.forward(t, p, x, &e, n)?.out));

    let mut store = ParamStore::new();
    let hgt = HgtConv::new(&mut store, "hgt", 3, 4, 2, 2, 2, 3, true, &mut r).unwrap();
    check_layer("hgt", &store, &[n, 3], |t, p, x| Ok(hgt.forward(t, p, x, &node_types, &e)?.out));

    let mut store = ParamStore::new();
    let lstm = Lstm::new(&mut store, "lstm", 3, 2, &mut r).unwrap();
    let sequences = vec![vec![0, 3, 5], vec![], vec![2], vec![6, 1, 4, 0]];
    check_layer("lstm", &store, &[n, 3], |t, p, x| lstm.forward_packed(t, p, x, &sequences));

    let mut store = ParamStore::new();
    let head = MlpHead::new(&mut store, "head", 3, 4, 2, &mut r).unwrap();
    check_layer("mlp-head", &store, &[n, 3], |t, p, x| head.forward(t, p, x, &mut ForwardCtx::eval()));
}

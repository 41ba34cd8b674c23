use std::sync::Arc;

use dyhgn_tensor::{Activation, AggregateMode, CsrMatrix, Tape, Var};
use rand_chacha::ChaCha8Rng;

use super::{block_matmul, contract, Bound, Linear, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::graph::EdgeList;

const LEAKY_SLOPE: f64 = 0.2;

/// `Â X W` for a normalized adjacency `Â`.
pub fn gcn_conv(tape: &mut Tape, x: Var, adj: &Arc<CsrMatrix>, w: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    Ok(tape.spmm(adj, xw)?)
}

/// GCN layer with an optional bias.
#[derive(Debug, Clone)]
pub struct GcnConv {
    pub lin: Linear,
}

impl GcnConv {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(store, name, d_in, d_out, bias, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, adj: &Arc<CsrMatrix>) -> Result<Var> {
        self.forward_blocks(tape, p, &[x], adj)
    }

    /// Input given as column blocks.
    pub fn forward_blocks(&self, tape: &mut Tape, p: &Bound, parts: &[Var], adj: &Arc<CsrMatrix>) -> Result<Var> {
        let xw = block_matmul(tape, parts, p.get(self.lin.w))?;
        let y = tape.spmm(adj, xw)?;
        Ok(match self.lin.b {
            Some(b) => tape.add_bias(y, p.get(b))?,
            None => y,
        })
    }
}

/// Skip connection, projected by a learned map when widths differ.
#[derive(Debug, Clone)]
pub enum Residual {
    Identity,
    Projected(Linear),
}

impl Residual {
    fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(if d_in == d_out {
            Residual::Identity
        } else {
            Residual::Projected(Linear::new(store, &format!("{name}.res"), d_in, d_out, false, rng)?)
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.forward_blocks(tape, p, &[x])
    }

    fn forward_blocks(&self, tape: &mut Tape, p: &Bound, parts: &[Var]) -> Result<Var> {
        match (self, parts) {
            (Residual::Identity, [x]) => Ok(*x),
            (Residual::Identity, _) => Ok(tape.concat_cols(parts)?),
            (Residual::Projected(lin), _) => lin.forward_blocks(tape, p, parts),
        }
    }
}

/// Output of an attention layer together with its per-edge, per-head
/// attention weights (`E×H`, rows aligned with the input edge list).
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub out: Var,
    pub weights: Var,
}

fn check_edges(edges: &EdgeList, n: usize) -> Result<()> {
    let mut covered = vec![false; n];
    for (&s, &d) in edges.src.iter().zip(&edges.dst) {
        if s >= n || d >= n {
            return Err(contract(format!("edge ({s}, {d}) outside {n} nodes")));
        }
        covered[d] = true;
    }
    if let Some(i) = covered.iter().position(|c| !c) {
        return Err(contract(format!("node {i} has no incoming edge or self-loop")));
    }
    Ok(())
}

/// Softmax over incoming edges, then weighted sum of source rows of `h`.
fn attend(tape: &mut Tape, h: Var, logits: Var, edges: &EdgeList, n: usize) -> Result<Attention> {
    let weights = tape.segment_softmax(logits, &edges.dst, n)?;
    let hs = tape.gather_rows(h, &edges.src)?;
    let msg = tape.head_scale(hs, weights)?;
    let out = tape.scatter_aggregate(msg, &edges.dst, n, AggregateMode::Sum)?;
    Ok(Attention { out, weights })
}

/// Additive multi-head graph attention with concatenated heads.
#[derive(Debug, Clone)]
pub struct GatConv {
    pub w: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
    pub heads: usize,
    pub d_head: usize,
}

impl GatConv {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, heads: usize, d_head: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || d_head == 0 {
            return Err(Error::Config(format!("{name}: heads and head size must be positive")));
        }
        Ok(Self {
            w: store.glorot(format!("{name}.w"), d_in, heads * d_head, rng)?,
            a_src: store.glorot(format!("{name}.a_src"), heads, d_head, rng)?,
            a_dst: store.glorot(format!("{name}.a_dst"), heads, d_head, rng)?,
            heads,
            d_head,
        })
    }

    pub fn d_out(&self) -> usize {
        self.heads * self.d_head
    }

    /// Projected features and the node-pair part of the attention logits.
    fn logits(&self, tape: &mut Tape, p: &Bound, x: Var, edges: &EdgeList) -> Result<(Var, Var)> {
        let h = tape.matmul(x, p.get(self.w))?;
        let s_src = tape.head_dot(h, p.get(self.a_src))?;
        let s_dst = tape.head_dot(h, p.get(self.a_dst))?;
        let e_src = tape.gather_rows(s_src, &edges.src)?;
        let e_dst = tape.gather_rows(s_dst, &edges.dst)?;
        Ok((h, tape.add(e_src, e_dst)?))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, edges: &EdgeList, n: usize) -> Result<Attention> {
        check_edges(edges, n)?;
        let (h, e) = self.logits(tape, p, x, edges)?;
        let e = tape.unary(e, Activation::LeakyRelu(LEAKY_SLOPE));
        attend(tape, h, e, edges, n)
    }
}

/// GAT with a learned edge-type term in the attention logits, a residual
/// connection and L2-normalized output rows.
#[derive(Debug, Clone)]
pub struct SimpleHgnConv {
    pub gat: GatConv,
    pub edge_emb: ParamId,
    pub w_edge: ParamId,
    pub a_edge: ParamId,
    pub n_edge_types: usize,
    pub residual: Option<Residual>,
    pub normalize: bool,
}

impl SimpleHgnConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        heads: usize,
        d_head: usize,
        n_edge_types: usize,
        residual: bool,
        normalize: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let gat = GatConv::new(store, name, d_in, heads, d_head, rng)?;
        let d_edge = d_head;
        let edge_emb = store.glorot(format!("{name}.edge_emb"), n_edge_types, d_edge, rng)?;
        let w_edge = store.glorot(format!("{name}.w_edge"), d_edge, heads * d_head, rng)?;
        let a_edge = store.glorot(format!("{name}.a_edge"), heads, d_head, rng)?;
        let residual = if residual {
            Some(Residual::new(store, name, d_in, heads * d_head, rng)?)
        } else {
            None
        };
        Ok(Self {
            gat,
            edge_emb,
            w_edge,
            a_edge,
            n_edge_types,
            residual,
            normalize,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, edges: &EdgeList, n: usize) -> Result<Attention> {
        check_edges(edges, n)?;
        if let Some(&r) = edges.rel.iter().find(|&&r| r >= self.n_edge_types) {
            return Err(Error::Config(format!(
                "edge type {r} unknown to a layer with {} edge types",
                self.n_edge_types
            )));
        }
        let (h, e) = self.gat.logits(tape, p, x, edges)?;
        let te = tape.matmul(p.get(self.edge_emb), p.get(self.w_edge))?;
        let s_type = tape.head_dot(te, p.get(self.a_edge))?;
        let e_type = tape.gather_rows(s_type, &edges.rel)?;
        let e = tape.add(e, e_type)?;
        let e = tape.unary(e, Activation::LeakyRelu(LEAKY_SLOPE));
        let mut att = attend(tape, h, e, edges, n)?;
        if let Some(res) = &self.residual {
            let r = res.forward(tape, p, x)?;
            att.out = tape.add(att.out, r)?;
        }
        if self.normalize {
            att.out = tape.l2_normalize_rows(att.out);
        }
        Ok(att)
    }
}

/// Heterogeneous attention with node-type dependent key/query/value and
/// output projections and relation-dependent attention and message maps.
#[derive(Debug, Clone)]
pub struct HgtConv {
    pub key: Vec<ParamId>,
    pub query: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub out: Vec<ParamId>,
    pub w_att: Vec<ParamId>,
    pub w_msg: Vec<ParamId>,
    pub heads: usize,
    pub d_head: usize,
    pub residual: Option<Residual>,
}

impl HgtConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
        d_head: usize,
        n_node_types: usize,
        n_relations: usize,
        residual: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d_head == 0 {
            return Err(Error::Config(format!("{name}: heads and head size must be positive")));
        }
        let dh = heads * d_head;
        let mut per_type = |kind: &str, a: usize, b: usize, store: &mut ParamStore| -> Result<Vec<ParamId>> {
            (0..n_node_types)
                .map(|t| store.glorot(format!("{name}.{kind}.{t}"), a, b, rng))
                .collect()
        };
        let key = per_type("key", d_in, dh, store)?;
        let query = per_type("query", d_in, dh, store)?;
        let value = per_type("value", d_in, dh, store)?;
        let out = per_type("out", dh, d_out, store)?;
        let mut w_att = Vec::with_capacity(n_relations);
        let mut w_msg = Vec::with_capacity(n_relations);
        for r in 0..n_relations {
            w_att.push(store.add(format!("{name}.w_att.{r}"), identity_blocks(heads, d_head))?);
            w_msg.push(store.add(format!("{name}.w_msg.{r}"), identity_blocks(heads, d_head))?);
        }
        let residual = if residual {
            Some(Residual::new(store, name, d_in, d_out, rng)?)
        } else {
            None
        };
        Ok(Self {
            key,
            query,
            value,
            out,
            w_att,
            w_msg,
            heads,
            d_head,
            residual,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, node_types: &[usize], edges: &EdgeList) -> Result<Attention> {
        self.forward_blocks(tape, p, &[x], node_types, edges)
    }

    /// Input given as column blocks.
    pub fn forward_blocks(&self, tape: &mut Tape, p: &Bound, parts: &[Var], node_types: &[usize], edges: &EdgeList) -> Result<Attention> {
        let n = node_types.len();
        check_edges(edges, n)?;
        let n_types = self.key.len();
        if let Some(&t) = node_types.iter().find(|&&t| t >= n_types) {
            return Err(Error::Config(format!("node type {t} has no parameter table ({n_types} types)")));
        }
        if let Some(&r) = edges.rel.iter().find(|&&r| r >= self.w_att.len()) {
            return Err(Error::Config(format!(
                "relation {r} has no parameter table ({} relations)",
                self.w_att.len()
            )));
        }
        let groups = group_by(node_types, n_types);
        let rows = typed_rows(tape, parts, &groups)?;
        let k = typed_project(tape, p, &rows, &groups, &self.key, n)?;
        let q = typed_project(tape, p, &rows, &groups, &self.query, n)?;
        let v = typed_project(tape, p, &rows, &groups, &self.value, n)?;

        let rel_groups = group_by(&edges.rel, self.w_att.len());
        let k_e = relation_transform(tape, p, k, &edges.src, &rel_groups, &self.w_att)?;
        let v_e = relation_transform(tape, p, v, &edges.src, &rel_groups, &self.w_msg)?;
        let q_e = tape.gather_rows(q, &edges.dst)?;
        let logits = tape.head_row_dot(q_e, k_e, self.heads)?;
        let logits = tape.scale(logits, 1.0 / (self.d_head as f64).sqrt());
        let weights = tape.segment_softmax(logits, &edges.dst, n)?;
        let msg = tape.head_scale(v_e, weights)?;
        let agg = tape.scatter_aggregate(msg, &edges.dst, n, AggregateMode::Sum)?;
        let agg_rows = typed_rows(tape, &[agg], &groups)?;
        let mut out = typed_project(tape, p, &agg_rows, &groups, &self.out, n)?;
        if let Some(res) = &self.residual {
            let r = res.forward_blocks(tape, p, parts)?;
            out = tape.add(out, r)?;
        }
        Ok(Attention { out, weights })
    }
}

fn identity_blocks(heads: usize, d: usize) -> dyhgn_tensor::Tensor {
    let mut data = vec![0.0; heads * d * d];
    for h in 0..heads {
        for i in 0..d {
            data[h * d * d + i * d + i] = 1.0;
        }
    }
    dyhgn_tensor::Tensor::from_vec(vec![heads, d, d], data).expect("shape matches data")
}

fn group_by(keys: &[usize], n_groups: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n_groups];
    for (i, &k) in keys.iter().enumerate() {
        groups[k].push(i);
    }
    groups
}

/// Rows of every nonempty group, block by block. A single group covering
/// every row keeps the input as is.
fn typed_rows(tape: &mut Tape, parts: &[Var], groups: &[Vec<usize>]) -> Result<Vec<Option<Vec<Var>>>> {
    let used = groups.iter().filter(|g| !g.is_empty()).count();
    groups
        .iter()
        .map(|g| {
            if g.is_empty() {
                Ok(None)
            } else if used == 1 {
                Ok(Some(parts.to_vec()))
            } else {
                Ok(Some(parts.iter().map(|&x| tape.gather_rows(x, g)).collect::<dyhgn_tensor::Result<Vec<_>>>()?))
            }
        })
        .collect()
}

/// Applies the per-group weight to the rows of each group.
fn typed_project(
    tape: &mut Tape,
    p: &Bound,
    rows: &[Option<Vec<Var>>],
    groups: &[Vec<usize>],
    weights: &[ParamId],
    n: usize,
) -> Result<Var> {
    let used: Vec<usize> = (0..groups.len()).filter(|&t| rows[t].is_some()).collect();
    if let [t] = used.as_slice() {
        return block_matmul(tape, rows[*t].as_ref().expect("used group"), p.get(weights[*t]));
    }
    let mut acc: Option<Var> = None;
    for t in used {
        let yt = block_matmul(tape, rows[t].as_ref().expect("used group"), p.get(weights[t]))?;
        let placed = tape.scatter_aggregate(yt, &groups[t], n, AggregateMode::Sum)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, placed)?,
            None => placed,
        });
    }
    acc.ok_or_else(|| contract("typed projection over zero rows"))
}

/// Gathers `x[src[e]]` for every edge and multiplies it by the block matrix
/// of the edge's relation. Rows come back in edge order.
fn relation_transform(tape: &mut Tape, p: &Bound, x: Var, src: &[usize], rel_groups: &[Vec<usize>], w: &[ParamId]) -> Result<Var> {
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(src.len());
    for (r, edges) in rel_groups.iter().enumerate() {
        if edges.is_empty() {
            continue;
        }
        let rows: Vec<usize> = edges.iter().map(|&e| src[e]).collect();
        let xr = tape.gather_rows(x, &rows)?;
        parts.push(tape.head_matmul(xr, p.get(w[r]))?);
        order.extend_from_slice(edges);
    }
    let stacked = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let mut inverse = vec![0; order.len()];
    for (pos, &e) in order.iter().enumerate() {
        inverse[e] = pos;
    }
    if inverse.iter().enumerate().all(|(i, &j)| i == j) {
        return Ok(stacked);
    }
    Ok(tape.gather_rows(stacked, &inverse)?)
}

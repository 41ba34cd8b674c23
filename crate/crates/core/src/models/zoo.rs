use dyhgn_tensor::{Activation, Tape, Var};
use rand_chacha::ChaCha8Rng;

use super::{GraphContext, Model, ModelConfig, ModelOutput, Variant};
use crate::diachronic::Diachronic;
use crate::error::{Error, Result};
use crate::graph::EdgeList;
use crate::layers::{Bound, ForwardCtx, GatConv, GcnConv, HgtConv, LayerNorm, Linear, MlpHead, ParamStore, SimpleHgnConv};

fn features(tape: &mut Tape, ctx: &GraphContext) -> Var {
    tape.constant(ctx.features.clone())
}

/// Gathers the target rows and applies the prediction head.
fn readout(tape: &mut Tape, p: &Bound, head: &MlpHead, h: Var, ctx: &GraphContext, fwd: &mut ForwardCtx) -> Result<ModelOutput> {
    let embedding = tape.gather_rows(h, &ctx.target_nodes)?;
    let logits = head.forward(tape, p, embedding, fwd)?;
    Ok(ModelOutput { embedding, logits })
}

fn baseline_edges<'a>(ctx: &'a GraphContext, config_temporal: bool) -> &'a EdgeList {
    if config_temporal {
        &ctx.union_edges
    } else {
        &ctx.structural_edges
    }
}

fn head_size(config: &ModelConfig) -> usize {
    config.n_hid / config.n_heads
}

macro_rules! param_access {
    () => {
        fn params(&self) -> &ParamStore {
            &self.store
        }

        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
    };
}

/// GCN over the union of structural and temporal edges, types ignored.
pub struct Gcn {
    store: ParamStore,
    convs: Vec<GcnConv>,
    head: MlpHead,
    temporal_edges: bool,
}

pub(super) fn build_gcn(ctx: &GraphContext, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Box<dyn Model>> {
    let mut store = ParamStore::new();
    let mut convs = Vec::with_capacity(config.n_layers);
    let mut d_in = ctx.feature_dim();
    for l in 0..config.n_layers {
        convs.push(GcnConv::new(&mut store, &format!("gcn.{l}"), d_in, config.n_hid, true, rng)?);
        d_in = config.n_hid;
    }
    let head = MlpHead::new(&mut store, "head", config.n_hid, config.n_hid, ctx.n_outputs(), rng)?;
    Ok(Box::new(Gcn {
        store,
        convs,
        head,
        temporal_edges: config.baseline_temporal_edges,
    }))
}

impl Model for Gcn {
    fn variant(&self) -> Variant {
        Variant::Gcn
    }

    param_access!();

    fn forward(&self, tape: &mut Tape, p: &Bound, ctx: &GraphContext, fwd: &mut ForwardCtx) -> Result<ModelOutput> {
        let adj = if self.temporal_edges { &ctx.union_adj } else { &ctx.structural_adj };
        let mut h = features(tape, ctx);
        for conv in &self.convs {
            h = conv.forward(tape, p, h, adj)?;
            h = tape.relu(h);
            h = fwd.dropout(tape, h)?;
        }
        readout(tape, p, &self.head, h, ctx, fwd)
    }
}

/// Multi-head GAT over the union edge set, types ignored.
pub struct Gat {
    store: ParamStore,
    convs: Vec<GatConv>,
    head: MlpHead,
    temporal_edges: bool,
}

pub(super) fn build_gat(ctx: &GraphContext, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Box<dyn Model>> {
    let mut store = ParamStore::new();
    let mut convs = Vec::with_capacity(config.n_layers);
    let mut d_in = ctx.feature_dim();
    for l in 0..config.n_layers {
        convs.push(GatConv::new(&mut store, &format!("gat.{l}"), d_in, config.n_heads, head_size(config), rng)?);
        d_in = config.n_hid;
    }
    let head = MlpHead::new(&mut store, "head", config.n_hid, config.n_hid, ctx.n_outputs(), rng)?;
    Ok(Box::new(Gat {
        store,
        convs,
        head,
        temporal_edges: config.baseline_temporal_edges,
    }))
}

impl Model for Gat {
    fn variant(&self) -> Variant {
        Variant::Gat
    }

    param_access!();

    fn forward(&self, tape: &mut Tape, p: &Bound, ctx: &GraphContext, fwd: &mut ForwardCtx) -> Result<ModelOutput> {
        let edges = baseline_edges(ctx, self.temporal_edges);
        let mut h = features(tape, ctx);
        for conv in &self.convs {
            h = conv.forward(tape, p, h, edges, ctx.n_nodes())?.out;
            h = tape.unary(h, Activation::Elu);
            h = fwd.dropout(tape, h)?;
        }
        readout(tape, p, &self.head, h, ctx, fwd)
    }
}

/// Simple-HGN: typed attention with residuals; the last layer's rows are
/// L2-normalized.
pub struct SimpleHgn {
    store: ParamStore,
    convs: Vec<SimpleHgnConv>,
    head: MlpHead,
    temporal_edges: bool,
}

pub(super) fn build_simple_hgn(ctx: &GraphContext, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Box<dyn Model>> {
    let mut store = ParamStore::new();
    let mut convs = Vec::with_capacity(config.n_layers);
    let mut d_in = ctx.feature_dim();
    for l in 0..config.n_layers {
        let last = l + 1 == config.n_layers;
        convs.push(SimpleHgnConv::new(
            &mut store,
            &format!("shgn.{l}"),
            d_in,
            config.n_heads,
            head_size(config),
            ctx.n_edge_types(),
            true,
            last,
            rng,
        )?);
        d_in = config.n_hid;
    }
    let head = MlpHead::new(&mut store, "head", config.n_hid, config.n_hid, ctx.n_outputs(), rng)?;
    Ok(Box::new(SimpleHgn {
        store,
        convs,
        head,
        temporal_edges: config.baseline_temporal_edges,
    }))
}

impl Model for SimpleHgn {
    fn variant(&self) -> Variant {
        Variant::SimpleHgn
    }

    param_access!();

    fn forward(&self, tape: &mut Tape, p: &Bound, ctx: &GraphContext, fwd: &mut ForwardCtx) -> Result<ModelOutput> {
        let edges = baseline_edges(ctx, self.temporal_edges);
        let mut h = features(tape, ctx);
        for (l, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, p, h, edges, ctx.n_nodes())?.out;
            if l + 1 < self.convs.len() {
                h = tape.unary(h, Activation::Elu);
                h = fwd.dropout(tape, h)?;
            }
        }
        readout(tape, p, &self.head, h, ctx, fwd)
    }
}

/// One structural/temporal block of DyHGN.
#[derive(Debug, Clone)]
struct Block {
    structural: GcnConv,
    fc: Linear,
    norm1: LayerNorm,
    temporal: GcnConv,
    norm2: LayerNorm,
}

/// Repeated `structural GCN → FC → LayerNorm → ReLU → Dropout → temporal
/// GCN → Dropout → LayerNorm → ReLU` blocks followed by the head.
#[derive(Debug, Clone)]
pub struct DyhgnTrunk {
    blocks: Vec<Block>,
    head: MlpHead,
}

impl DyhgnTrunk {
    pub fn new(store: &mut ParamStore, d_in: usize, config: &ModelConfig, n_outputs: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = config.n_hid;
        let mut blocks = Vec::with_capacity(config.n_layers);
        let mut d = d_in;
        for l in 0..config.n_layers {
            let name = format!("trunk.{l}");
            blocks.push(Block {
                structural: GcnConv::new(store, &format!("{name}.structural"), d, h, false, rng)?,
                fc: Linear::new(store, &format!("{name}.fc"), h, h, true, rng)?,
                norm1: LayerNorm::new(store, &format!("{name}.norm1"), h)?,
                temporal: GcnConv::new(store, &format!("{name}.temporal"), h, h, false, rng)?,
                norm2: LayerNorm::new(store, &format!("{name}.norm2"), h)?,
            });
            d = h;
        }
        let head = MlpHead::new(store, "trunk.head", h, h, n_outputs, rng)?;
        Ok(Self { blocks, head })
    }

    /// Runs the blocks on an input given as column blocks.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, parts: &[Var], ctx: &GraphContext, fwd: &mut ForwardCtx) -> Result<ModelOutput> {
        let mut current: Option<Var> = None;
        for b in &self.blocks {
            let mut h = match current {
                Some(h) => b.structural.forward(tape, p, h, &ctx.structural_adj)?,
                None => b.structural.forward_blocks(tape, p, parts, &ctx.structural_adj)?,
            };
            h = b.fc.forward(tape, p, h)?;
            h = b.norm1.forward(tape, p, h)?;
            h = tape.relu(h);
            h = fwd.dropout(tape, h)?;
            h = b.temporal.forward(tape, p, h, &ctx.temporal_adj)?;
            h = fwd.dropout(tape, h)?;
            h = b.norm2.forward(tape, p, h)?;
            current = Some(tape.relu(h));
        }
        let h = current.ok_or_else(|| Error::Config("DyHGN needs at least one layer".into()))?;
        readout(tape, p, &self.head, h, ctx, fwd)
    }
}

pub struct Dyhgn {
    store: ParamStore,
    trunk: DyhgnTrunk,
}

pub(super) fn build_dyhgn(ctx: &GraphContext, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Box<dyn Model>> {
    let mut store = ParamStore::new();
    let trunk = DyhgnTrunk::new(&mut store, ctx.feature_dim(), config, ctx.n_outputs(), rng)?;
    Ok(Box::new(Dyhgn { store, trunk }))
}

impl Model for Dyhgn {
    fn variant(&self) -> Variant {
        Variant::Dyhgn
    }

    param_access!();

    fn forward(&self, tape: &mut Tape, p: &Bound, ctx: &GraphContext, fwd: &mut ForwardCtx) -> Result<ModelOutput> {
        let x = features(tape, ctx);
        self.trunk.forward(tape, p, &[x], ctx, fwd)
    }
}

fn diachronic(store: &mut ParamStore, ctx: &GraphContext, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Diachronic> {
    let de_config = config
        .diachronic
        .clone()
        .ok_or_else(|| Error::Config(format!("{} needs a diachronic section", config.variant)))?;
    Diachronic::for_graph(store, "de", de_config, &ctx.graph, rng)
}

/// DyHGN over `[X ‖ aggregated diachronic messages]`.
pub struct DyhgnDe {
    store: ParamStore,
    pub de: Diachronic,
    trunk: DyhgnTrunk,
}

pub(super) fn build_dyhgn_de(ctx: &GraphContext, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Box<dyn Model>> {
    let mut store = ParamStore::new();
    let de = diachronic(&mut store, ctx, config, rng)?;
    let d_in = ctx.feature_dim() + de.config.output_dim();
    let trunk = DyhgnTrunk::new(&mut store, d_in, config, ctx.n_outputs(), rng)?;
    Ok(Box::new(DyhgnDe { store, de, trunk }))
}

impl Model for DyhgnDe {
    fn variant(&self) -> Variant {
        Variant::DyhgnDe
    }

    param_access!();

    fn forward(&self, tape: &mut Tape, p: &Bound, ctx: &GraphContext, fwd: &mut ForwardCtx) -> Result<ModelOutput> {
        let x = features(tape, ctx);
        let block = self.de.node_block(tape, p, &ctx.graph)?;
        self.trunk.forward(tape, p, &[x, block], ctx, fwd)
    }
}

/// One heterogeneous attention layer over the structural edges applied to
/// `X_DE`, then DyHGN.
pub struct DyhgnDeHgt {
    store: ParamStore,
    pub de: Diachronic,
    hgt: HgtConv,
    trunk: DyhgnTrunk,
}

pub(super) fn build_dyhgn_de_hgt(ctx: &GraphContext, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Box<dyn Model>> {
    let mut store = ParamStore::new();
    let de = diachronic(&mut store, ctx, config, rng)?;
    let d_in = ctx.feature_dim() + de.config.output_dim();
    let hgt = HgtConv::new(
        &mut store,
        "hgt",
        d_in,
        config.n_hid,
        config.n_heads,
        head_size(config),
        ctx.graph.schema().node_types.len(),
        ctx.n_edge_types(),
        true,
        rng,
    )?;
    let trunk = DyhgnTrunk::new(&mut store, config.n_hid, config, ctx.n_outputs(), rng)?;
    Ok(Box::new(DyhgnDeHgt { store, de, hgt, trunk }))
}

impl Model for DyhgnDeHgt {
    fn variant(&self) -> Variant {
        Variant::DyhgnDeHgt
    }

    param_access!();

    fn forward(&self, tape: &mut Tape, p: &Bound, ctx: &GraphContext, fwd: &mut ForwardCtx) -> Result<ModelOutput> {
        let x = features(tape, ctx);
        let block = self.de.node_block(tape, p, &ctx.graph)?;
        let x_hgt = self
            .hgt
            .forward_blocks(tape, p, &[x, block], &ctx.node_types, &ctx.structural_edges)?
            .out;
        self.trunk.forward(tape, p, &[x_hgt], ctx, fwd)
    }
}

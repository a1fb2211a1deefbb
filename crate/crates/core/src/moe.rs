//! Attend-and-Excite mixture of experts.
//!
//! Each output channel of a frozen convolution is an expert. A router
//! summarizes the layer's input feature map into a gating input `e`, a gate
//! maps `e` to per-channel excitations `g`, and the convolution output
//! becomes `y = sum_i g_i * E_i(x)`, i.e. channel `i` scaled by `g_i`.
//!
//! The default router runs single-head self-attention independently along
//! every row (the epipolar line of a rectified pair), mean-pools each row's
//! attended tokens, and averages the row summaries.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, TokenLayout, Var};
use crate::error::{Error, Result};
use crate::model::{Ctx, FeatureMap, ParamKind, StereoNet};
use crate::tensor::Tensor;

/// Channels of the shallow image-embedding router's hidden layer.
const EMBED_CHANNELS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    RowAttention,
    ColumnAttention,
    FullAttention,
    Gap,
    ShallowEmbedding,
}

impl FromStr for RouterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row_attention" => Ok(RouterKind::RowAttention),
            "column_attention" => Ok(RouterKind::ColumnAttention),
            "full_attention" => Ok(RouterKind::FullAttention),
            "gap" => Ok(RouterKind::Gap),
            "shallow_embedding" => Ok(RouterKind::ShallowEmbedding),
            other => Err(Error::Config(format!("unknown router kind `{other}`"))),
        }
    }
}

impl RouterKind {
    fn layout(self) -> Option<TokenLayout> {
        match self {
            RouterKind::RowAttention => Some(TokenLayout::Rows),
            RouterKind::ColumnAttention => Some(TokenLayout::Cols),
            RouterKind::FullAttention => Some(TokenLayout::Full),
            RouterKind::Gap | RouterKind::ShallowEmbedding => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Relu,
}

/// Replaces computed gates with a constant, e.g. `1.0` to reproduce the
/// frozen backbone exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateOverride(pub f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub enabled: bool,
    pub router: RouterKind,
    pub activation: Activation,
    /// Query/key width; `None` means half the router's input channels.
    pub attention_dim: Option<usize>,
    pub gate_bias_init: f64,
    pub router_init_scale: f64,
    /// Also wrap the upsampling module fed by the deepest block.
    pub wrap_upsampling: bool,
    pub seed: u64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            enabled: true,
            router: RouterKind::RowAttention,
            activation: Activation::Sigmoid,
            attention_dim: None,
            gate_bias_init: 2.0,
            router_init_scale: 1e-2,
            wrap_upsampling: true,
            seed: 17,
        }
    }
}

impl MoeConfig {
    pub fn attention_dim_for(&self, channels: usize) -> usize {
        self.attention_dim.unwrap_or((channels / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.attention_dim == Some(0) {
            return Err(Error::Config("moe.attention_dim must be >= 1".into()));
        }
        if !(self.router_init_scale >= 0.0) {
            return Err(Error::Config("moe.router_init_scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatingVector {
    pub values: Vec<f64>,
}

/// Per-sequence attention summaries `[B, C]` of `z: [C, H, W]`: for each
/// sequence `b`, `mean_n softmax(q kᵀ/√d) v`.
pub fn attention_summaries(
    g: &mut Graph,
    z: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    layout: TokenLayout,
) -> Var {
    let t = g.tokens(z, layout);
    let q = g.linear(t, wq);
    let k = g.linear(t, wk);
    let v = g.linear(t, wv);
    let a = g.attention(q, k, v);
    g.mean_axis1(a)
}

pub fn gate_graph(g: &mut Graph, e: Var, wg: Var, bias: Var, activation: Activation) -> Var {
    let logits = g.matvec(wg, e);
    let logits = g.add(logits, bias);
    match activation {
        Activation::Sigmoid => g.sigmoid(logits),
        Activation::Relu => g.relu(logits),
    }
}

/// Gating input for a site, built from the model's router parameters.
fn route(ctx: &mut Ctx<'_>, kind: RouterKind, site: &str, z: Var, image: Var) -> Var {
    match kind.layout() {
        Some(layout) => {
            let wq = ctx.param(&format!("{site}.router.wq"));
            let wk = ctx.param(&format!("{site}.router.wk"));
            let wv = ctx.param(&format!("{site}.router.wv"));
            let s = attention_summaries(&mut ctx.graph, z, wq, wk, wv, layout);
            ctx.graph.mean_axis0(s)
        }
        None if kind == RouterKind::Gap => ctx.graph.spatial_mean(z),
        None => {
            let w1 = ctx.param(&format!("{site}.router.embed1.weight"));
            let w2 = ctx.param(&format!("{site}.router.embed2.weight"));
            let h = ctx.graph.conv2d(image, w1, None, 2, 1);
            let h = ctx.graph.relu(h);
            let h = ctx.graph.conv2d(h, w2, None, 2, 1);
            ctx.graph.spatial_mean(h)
        }
    }
}

/// Gate vector for MoE site `site` given the site's input feature map `z`
/// and the raw view `image`.
pub(crate) fn site_gate(ctx: &mut Ctx<'_>, cfg: &MoeConfig, site: &str, z: Var, image: Var) -> Var {
    if let Some(GateOverride(v)) = ctx.net().gate_override {
        let n = ctx
            .net()
            .param(&format!("{site}.gate.bias"))
            .expect("gate bias")
            .numel();
        return ctx.graph.constant(Tensor::full(&[n], v));
    }
    let e = route(ctx, cfg.router, site, z, image);
    let wg = ctx.param(&format!("{site}.gate.weight"));
    let b = ctx.param(&format!("{site}.gate.bias"));
    gate_graph(&mut ctx.graph, e, wg, b, cfg.activation)
}

fn check_projections(z: &FeatureMap, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<()> {
    let c = z.channels();
    let (qs, ks, vs) = (wq.shape(), wk.shape(), wv.shape());
    if qs.len() != 2 || qs[1] == 0 {
        return Err(Error::Config("attention dimension d must be >= 1".into()));
    }
    if qs[0] != c || ks != qs || vs != [c, c] {
        return Err(Error::Shape(format!(
            "projections {qs:?}/{ks:?}/{vs:?} do not fit {c} channels"
        )));
    }
    Ok(())
}

fn attention_constants(
    z: &FeatureMap,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    layout: TokenLayout,
) -> Result<Tensor> {
    check_projections(z, wq, wk, wv)?;
    let mut g = Graph::new();
    let zv = g.constant(z.data.clone());
    let (q, k, v) = (
        g.constant(wq.clone()),
        g.constant(wk.clone()),
        g.constant(wv.clone()),
    );
    let s = attention_summaries(&mut g, zv, q, k, v, layout);
    Ok(g.value(s).clone())
}

/// Row summaries `e_r` (`[H, C]`) before averaging over rows.
pub fn row_summaries(z: &FeatureMap, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    attention_constants(z, wq, wk, wv, TokenLayout::Rows)
}

/// Row-wise self-attention router: `e = (1/H) Σ_r e_r`.
pub fn row_attention_router(
    z: &FeatureMap,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<Tensor> {
    let s = row_summaries(z, wq, wk, wv)?;
    Ok(mean_rows(&s))
}

fn mean_rows(s: &Tensor) -> Tensor {
    let (b, c) = (s.shape()[0], s.shape()[1]);
    Tensor::from_fn(&[c], |j| {
        (0..b).map(|i| s.data()[i * c + j]).sum::<f64>() / b as f64
    })
}

/// Parameters consumed by [`router_variant`]; unused fields may be empty.
#[derive(Clone, Debug, Default)]
pub struct RouterParams {
    pub wq: Option<Tensor>,
    pub wk: Option<Tensor>,
    pub wv: Option<Tensor>,
    pub embed1: Option<Tensor>,
    pub embed2: Option<Tensor>,
}

/// Gating input from any router kind. `image` is the raw `[3, H, W]` view,
/// used only by the shallow-embedding router.
pub fn router_variant(
    z: &FeatureMap,
    image: Option<&Tensor>,
    kind: RouterKind,
    p: &RouterParams,
) -> Result<Tensor> {
    let missing = |what: &str| Error::Config(format!("router {kind:?} needs {what}"));
    match kind.layout() {
        Some(layout) => {
            let (wq, wk, wv) = (
                p.wq.as_ref().ok_or_else(|| missing("wq"))?,
                p.wk.as_ref().ok_or_else(|| missing("wk"))?,
                p.wv.as_ref().ok_or_else(|| missing("wv"))?,
            );
            Ok(mean_rows(&attention_constants(z, wq, wk, wv, layout)?))
        }
        None if kind == RouterKind::Gap => {
            let mut g = Graph::new();
            let zv = g.constant(z.data.clone());
            let e = g.spatial_mean(zv);
            Ok(g.value(e).clone())
        }
        None => {
            let image = image.ok_or_else(|| missing("the raw image"))?;
            let w1 = p.embed1.as_ref().ok_or_else(|| missing("embed1"))?;
            let w2 = p.embed2.as_ref().ok_or_else(|| missing("embed2"))?;
            let mut g = Graph::new();
            let x = g.constant(image.clone());
            let (w1, w2) = (g.constant(w1.clone()), g.constant(w2.clone()));
            let h = g.conv2d(x, w1, None, 2, 1);
            let h = g.relu(h);
            let h = g.conv2d(h, w2, None, 2, 1);
            let e = g.spatial_mean(h);
            Ok(g.value(e).clone())
        }
    }
}

/// `G(e) = act(W_g e + b)`.
pub fn gate(
    e: &Tensor,
    wg: &Tensor,
    bias: Option<&Tensor>,
    activation: Activation,
) -> Result<GatingVector> {
    let (o, c) = (wg.shape()[0], wg.shape()[1]);
    if e.numel() != c {
        return Err(Error::Shape(format!(
            "gate expects {c} inputs, got {}",
            e.numel()
        )));
    }
    let mut g = Graph::new();
    let ev = g.constant(e.clone().reshape(&[c])?);
    let wv = g.constant(wg.clone());
    let b = g.constant(bias.cloned().unwrap_or_else(|| Tensor::zeros(&[o])));
    let out = gate_graph(&mut g, ev, wv, b, activation);
    Ok(GatingVector {
        values: g.value(out).data().to_vec(),
    })
}

/// Applies a frozen convolution (`experts: [C, Cin, k, k]`, same padding)
/// with output channel `i` excited by `g_i`.
pub fn moe_apply(
    x: &FeatureMap,
    experts: &Tensor,
    stride: usize,
    g: &GatingVector,
) -> Result<FeatureMap> {
    let s = experts.shape();
    if s.len() != 4 || s[0] != g.values.len() {
        return Err(Error::Shape(format!(
            "{} gates for expert bank {:?}",
            g.values.len(),
            s
        )));
    }
    let mut gr = Graph::new();
    let xv = gr.constant(x.data.clone());
    let w = gr.constant(experts.clone());
    let gv = gr.constant(Tensor::from_vec(&[s[0]], g.values.clone())?);
    let y = gr.conv2d(xv, w, None, stride, s[2] / 2);
    let y = gr.scale_channels(y, gv);
    Ok(FeatureMap {
        data: gr.value(y).clone(),
        scale: x.scale * stride,
    })
}

/// Names of the router/gate parameters that [`insert_moe`] would add.
struct Site {
    name: String,
    in_channels: usize,
    out_channels: usize,
}

fn sites(net: &StereoNet, cfg: &MoeConfig) -> Vec<Site> {
    let mc = &net.config;
    let k = mc.moe_block_index;
    let mut out = vec![Site {
        name: format!("moe.enc{k}"),
        in_channels: mc.block_channels(k - 1),
        out_channels: mc.block_channels(k),
    }];
    if cfg.wrap_upsampling && k == mc.encoder_blocks {
        let n = mc.encoder_blocks;
        out.push(Site {
            name: "moe.up".into(),
            in_channels: mc.block_channels(n) + mc.block_channels(n - 1),
            out_channels: mc.block_channels(n - 1),
        });
    }
    out
}

/// Wraps the configured encoder block (and, for the deepest block, its
/// upsampling module) with MoE layers. Existing parameters are untouched.
pub fn insert_moe(net: &mut StereoNet, cfg: &MoeConfig) -> Result<()> {
    cfg.validate()?;
    if net.moe.is_some() {
        return Err(Error::Config("MoE layers are already inserted".into()));
    }
    let k = net.config.moe_block_index;
    if k == 0 || k > net.config.encoder_blocks {
        return Err(Error::Config(format!(
            "moe_block_index {k} outside 1..={}",
            net.config.encoder_blocks
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = cfg.router_init_scale;
    let mut noise = |shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            if scale > 0.0 {
                rng.random_range(-scale..scale)
            } else {
                0.0
            }
        })
    };
    for site in sites(net, cfg) {
        let c = site.in_channels;
        let r = format!("{}.router", site.name);
        match cfg.router {
            RouterKind::RowAttention | RouterKind::ColumnAttention | RouterKind::FullAttention => {
                let d = cfg.attention_dim_for(c);
                net.insert_param(&format!("{r}.wq"), noise(&[c, d]), ParamKind::Router);
                net.insert_param(&format!("{r}.wk"), noise(&[c, d]), ParamKind::Router);
                net.insert_param(&format!("{r}.wv"), noise(&[c, c]), ParamKind::Router);
            }
            RouterKind::Gap => {}
            RouterKind::ShallowEmbedding => {
                net.insert_param(
                    &format!("{r}.embed1.weight"),
                    noise(&[EMBED_CHANNELS, 3, 3, 3]),
                    ParamKind::Router,
                );
                net.insert_param(
                    &format!("{r}.embed2.weight"),
                    noise(&[c, EMBED_CHANNELS, 3, 3]),
                    ParamKind::Router,
                );
            }
        }
        net.insert_param(
            &format!("{}.gate.weight", site.name),
            Tensor::zeros(&[site.out_channels, c]),
            ParamKind::Gate,
        );
        net.insert_param(
            &format!("{}.gate.bias", site.name),
            Tensor::full(&[site.out_channels], cfg.gate_bias_init),
            ParamKind::Gate,
        );
    }
    net.moe = Some(cfg.clone());
    Ok(())
}

/// A copy of `net` with every MoE site removed (the plain backbone).
pub fn strip_moe(net: &StereoNet) -> StereoNet {
    let mut out = net.clone();
    out.remove_params_with_prefix("moe.");
    out.moe = None;
    out.gate_override = None;
    out
}

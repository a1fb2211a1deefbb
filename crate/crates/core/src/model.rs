//! The compact stereo backbone: strided encoder, one upsampling module with a
//! skip connection, cosine correlation volume, residual aggregation, and a
//! soft-argmax regression head.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BnStats, Graph, Var};
use crate::error::{Error, Result};
use crate::moe::{self, GateOverride, MoeConfig};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const NORMALIZE_EPS: f64 = 1e-12;
/// Correlation value assigned to shifts that fall outside the right image.
pub const OUT_OF_VIEW_SIMILARITY: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_blocks: usize,
    pub base_channels: usize,
    pub max_disparity: usize,
    /// 1-based index of the encoder block that hosts the MoE layer.
    pub moe_block_index: usize,
    pub seed: u64,
    pub softmax_temperature: f64,
    /// Initial diagonal of the 1x1 regression head.
    pub head_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_blocks: 3,
            base_channels: 16,
            max_disparity: 32,
            moe_block_index: 3,
            seed: 0,
            softmax_temperature: 1.0,
            head_init_scale: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_blocks < 2 {
            return Err(Error::Config("model.encoder_blocks must be >= 2".into()));
        }
        if self.base_channels < 2 {
            return Err(Error::Config("model.base_channels must be >= 2".into()));
        }
        if self.moe_block_index == 0 || self.moe_block_index > self.encoder_blocks {
            return Err(Error::Config(format!(
                "model.moe_block_index {} outside 1..={}",
                self.moe_block_index, self.encoder_blocks
            )));
        }
        if self.max_disparity < self.cost_scale() || self.max_disparity % self.cost_scale() != 0 {
            return Err(Error::Config(format!(
                "model.max_disparity must be a positive multiple of {}",
                self.cost_scale()
            )));
        }
        if !(self.softmax_temperature > 0.0) {
            return Err(Error::Config(
                "model.softmax_temperature must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Channel count of encoder block `i` (1-based).
    pub fn block_channels(&self, i: usize) -> usize {
        if i == 0 {
            3
        } else {
            self.base_channels + (i - 1) * self.base_channels / 2
        }
    }

    /// Downsampling factor of the cost volume (one level above the deepest block).
    pub fn cost_scale(&self) -> usize {
        1 << (self.encoder_blocks - 1)
    }

    pub fn disparities_at_cost_scale(&self) -> usize {
        self.max_disparity / self.cost_scale()
    }

    pub fn feature_channels(&self) -> usize {
        self.block_channels(self.encoder_blocks - 1)
    }

    pub fn aggregation_channels(&self) -> usize {
        2 * self.disparities_at_cost_scale()
    }
}

/// A rectified stereo pair; images are `[3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoPair {
    pub left: Tensor,
    pub right: Tensor,
    pub frame_index: u64,
}

impl StereoPair {
    pub fn new(left: Tensor, right: Tensor, frame_index: u64) -> Result<Self> {
        let pair = StereoPair {
            left,
            right,
            frame_index,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.left.shape() != self.right.shape() {
            return Err(Error::Input(format!(
                "left {:?} and right {:?} differ in shape",
                self.left.shape(),
                self.right.shape()
            )));
        }
        if self.left.shape().len() != 3 {
            return Err(Error::Input("images must be [C, H, W]".into()));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }

    /// Luma-like single channel (channel mean) of each view, `[H, W]`.
    pub fn gray(&self) -> (Tensor, Tensor) {
        (to_gray(&self.left), to_gray(&self.right))
    }
}

pub fn to_gray(img: &Tensor) -> Tensor {
    let (c, h, w) = img.dims3();
    let n = h * w;
    let d = img.data();
    Tensor::from_fn(&[h, w], |p| {
        (0..c).map(|ch| d[ch * n + p]).sum::<f64>() / c as f64
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[C, H, W]`.
    pub data: Tensor,
    pub scale: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.dims3().0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    /// `[H, W]` disparities in pixels.
    pub data: Tensor,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn dense(data: Tensor) -> Self {
        let n = data.numel();
        DisparityMap {
            data,
            valid: vec![true; n],
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn density(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Conv,
    Bias,
    BnGamma,
    BnBeta,
    Router,
    Gate,
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    StudentPeft,
    TeacherAdaptbn,
    FullTune,
    Frozen,
}

impl FromStr for PartitionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student_peft" => Ok(PartitionMode::StudentPeft),
            "teacher_adaptbn" => Ok(PartitionMode::TeacherAdaptbn),
            "full_tune" => Ok(PartitionMode::FullTune),
            "frozen" => Ok(PartitionMode::Frozen),
            other => Err(Error::Config(format!("unknown partition mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Per-sample statistics; running statistics are updated.
    Train,
    /// Frozen running statistics.
    Eval,
}

#[derive(Clone, Debug)]
pub struct StereoNet {
    pub config: ModelConfig,
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
    pub(crate) moe: Option<MoeConfig>,
    pub gate_override: Option<GateOverride>,
}

/// Graph handles produced by one forward pass.
pub struct ForwardVars {
    /// `[1, H, W]` disparity at input resolution.
    pub disparity: Var,
    /// Gate vectors of every MoE site evaluated (both views).
    pub gates: Vec<Var>,
    /// Encoder block outputs per view.
    pub left_blocks: Vec<Var>,
    pub right_blocks: Vec<Var>,
    /// Pre-softmax logits `[D, H/s, W/s]`.
    pub logits: Var,
}

/// Per-forward state: the graph, parameter leaves, and collected BN statistics.
pub struct Ctx<'a> {
    pub graph: Graph,
    net: &'a StereoNet,
    trainable: &'a BTreeSet<String>,
    norm: NormMode,
    vars: HashMap<String, Var>,
    batch_stats: Vec<BatchStat>,
}

/// Per-sample normalization statistics observed in a training forward.
#[derive(Clone, Debug)]
pub struct BatchStat {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel the statistics were computed over.
    pub count: usize,
}

impl<'a> Ctx<'a> {
    pub fn new(net: &'a StereoNet, trainable: &'a BTreeSet<String>, norm: NormMode) -> Self {
        Ctx {
            graph: Graph::new(),
            net,
            trainable,
            norm,
            vars: HashMap::new(),
            batch_stats: Vec::new(),
        }
    }

    /// Leaf for parameter `name`, created once per forward so both views share it.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let p = self
            .net
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        let v = self
            .graph
            .leaf(p.value.clone(), self.trainable.contains(name));
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    pub fn net(&self) -> &StereoNet {
        self.net
    }

    fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize, bias: bool) -> Var {
        let w = self.param(&format!("{prefix}.weight"));
        let b = bias.then(|| self.param(&format!("{prefix}.bias")));
        self.graph.conv2d(x, w, b, stride, pad)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Var {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        match self.norm {
            NormMode::Train => {
                let (y, stats) =
                    self.graph
                        .batch_norm(x, gamma, beta, BnStats::Batch { eps: BN_EPS });
                let (mean, var) = stats.expect("batch statistics");
                let (_, h, w) = self.graph.value(x).dims3();
                self.batch_stats.push(BatchStat {
                    prefix: prefix.to_string(),
                    mean,
                    var,
                    count: h * w,
                });
                y
            }
            NormMode::Eval => {
                let net = self.net;
                let mean = net.buffers[&format!("{prefix}.running_mean")].data();
                let var = net.buffers[&format!("{prefix}.running_var")].data();
                self.graph
                    .batch_norm(
                        x,
                        gamma,
                        beta,
                        BnStats::Running {
                            mean,
                            var,
                            eps: BN_EPS,
                        },
                    )
                    .0
            }
        }
    }

    /// Convolution whose output channels are optionally excited by `gate`.
    fn gated_conv(
        &mut self,
        x: Var,
        prefix: &str,
        stride: usize,
        bias: bool,
        gate: Option<Var>,
    ) -> Var {
        let y = self.conv(x, prefix, stride, 1, bias);
        match gate {
            Some(g) => self.graph.scale_channels(y, g),
            None => y,
        }
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }
}

impl StereoNet {
    /// A freshly initialized backbone without MoE layers.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut net = StereoNet {
            config: config.clone(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            moe: None,
            gate_override: None,
        };
        let n = config.encoder_blocks;
        for i in 1..=n {
            let (cin, cout) = (config.block_channels(i - 1), config.block_channels(i));
            net.add_conv(&mut rng, &format!("enc{i}.conv1"), cout, cin, 3, false, 1.0);
            net.add_bn(&format!("enc{i}.bn1"), cout);
            net.add_conv(
                &mut rng,
                &format!("enc{i}.conv2"),
                cout,
                cout,
                3,
                false,
                1.0,
            );
            net.add_bn(&format!("enc{i}.bn2"), cout);
        }
        let (cdeep, cskip) = (config.block_channels(n), config.block_channels(n - 1));
        let cf = config.feature_channels();
        net.add_conv(&mut rng, "up.conv1", cskip, cdeep + cskip, 3, false, 1.0);
        net.add_bn("up.bn1", cskip);
        net.add_conv(&mut rng, "up.conv2", cf, cskip, 3, true, 1.0);
        let (dn, a) = (
            config.disparities_at_cost_scale(),
            config.aggregation_channels(),
        );
        net.add_conv(&mut rng, "agg.conv1", a, dn, 3, false, 1.0);
        net.add_bn("agg.bn1", a);
        net.add_conv(&mut rng, "agg.conv2", dn, a, 3, true, 0.1);
        for name in ["agg.conv1.weight", "agg.conv2.weight", "agg.conv2.bias"] {
            if let Some(p) = net.params.get_mut(name) {
                p.kind = ParamKind::Regression;
            }
        }
        let mut head = Tensor::zeros(&[dn, dn, 1, 1]);
        for d in 0..dn {
            head.data_mut()[d * dn + d] = config.head_init_scale;
        }
        net.insert_param("head.weight", head, ParamKind::Regression);
        net.insert_param("head.bias", Tensor::zeros(&[dn]), ParamKind::Regression);
        Ok(net)
    }

    fn add_conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        bias: bool,
        gain: f64,
    ) {
        let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| normal.sample(rng));
        self.insert_param(&format!("{name}.weight"), w, ParamKind::Conv);
        if bias {
            self.insert_param(
                &format!("{name}.bias"),
                Tensor::zeros(&[cout]),
                ParamKind::Bias,
            );
        }
    }

    fn add_bn(&mut self, name: &str, c: usize) {
        self.insert_param(
            &format!("{name}.gamma"),
            Tensor::full(&[c], 1.0),
            ParamKind::BnGamma,
        );
        self.insert_param(
            &format!("{name}.beta"),
            Tensor::zeros(&[c]),
            ParamKind::BnBeta,
        );
        self.buffers
            .insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.buffers
            .insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
    }

    /// Rebuilds a network from stored tensors, checking every name and shape
    /// against a freshly constructed network of the same configuration.
    pub fn from_parts(
        config: ModelConfig,
        moe_cfg: Option<MoeConfig>,
        mut params: BTreeMap<String, Tensor>,
        mut buffers: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut net = StereoNet::new(config)?;
        if let Some(m) = &moe_cfg {
            moe::insert_moe(&mut net, m)?;
        }
        let expected = params.len() + buffers.len();
        for (name, p) in net.params.iter_mut() {
            let t = params
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        for (name, b) in net.buffers.iter_mut() {
            let t = buffers
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))?;
            if t.shape() != b.shape() {
                return Err(Error::Checkpoint(format!("buffer {name}: shape mismatch")));
            }
            *b = t;
        }
        if let Some(extra) = params.keys().chain(buffers.keys()).next() {
            return Err(Error::Checkpoint(format!(
                "unexpected tensor {extra} ({expected} stored)"
            )));
        }
        Ok(net)
    }

    pub(crate) fn insert_param(&mut self, name: &str, value: Tensor, kind: ParamKind) {
        self.params.insert(name.to_string(), Param { value, kind });
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub(crate) fn set_buffer(&mut self, name: &str, value: Tensor) {
        self.buffers.insert(name.to_string(), value);
    }

    pub(crate) fn remove_params_with_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn moe_config(&self) -> Option<&MoeConfig> {
        self.moe.as_ref()
    }

    pub fn has_moe(&self) -> bool {
        self.moe.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Number of batch-norm layers (each owns one gamma and one beta).
    pub fn norm_layer_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind == ParamKind::BnGamma)
            .count()
    }

    /// Checksum over the named parameters, in name order.
    pub fn checksum_of<'s>(&self, names: impl IntoIterator<Item = &'s String>) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for name in names {
            let t = &self.params[name].value;
            h = crate::tensor::fnv_step(h, t.checksum());
        }
        h
    }

    /// Checksum over every parameter and buffer.
    pub fn checksum(&self) -> u64 {
        let mut h = self.checksum_of(self.params.keys());
        for b in self.buffers.values() {
            h = crate::tensor::fnv_step(h, b.checksum());
        }
        h
    }

    /// Selects parameter names for an update mode.
    pub fn partition(&self, mode: PartitionMode) -> BTreeSet<String> {
        self.params
            .iter()
            .filter(|(_, p)| match mode {
                PartitionMode::StudentPeft => matches!(
                    p.kind,
                    ParamKind::Router | ParamKind::Gate | ParamKind::Regression
                ),
                PartitionMode::TeacherAdaptbn => {
                    matches!(p.kind, ParamKind::BnGamma | ParamKind::BnBeta)
                }
                PartitionMode::FullTune => true,
                PartitionMode::Frozen => false,
            })
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Names not in `set`.
    pub fn complement(&self, set: &BTreeSet<String>) -> BTreeSet<String> {
        self.params
            .keys()
            .filter(|k| !set.contains(*k))
            .cloned()
            .collect()
    }

    fn check_input(&self, pair: &StereoPair) -> Result<()> {
        pair.validate()?;
        let (c, h, w) = pair.left.dims3();
        if c != 3 {
            return Err(Error::Input(format!("expected 3-channel images, got {c}")));
        }
        let m = 1 << self.config.encoder_blocks;
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Input(format!(
                "image size {h}x{w} must be a positive multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Encoder (+ MoE) for one view. Returns block outputs and matching features.
    fn encode_view(&self, ctx: &mut Ctx<'_>, image: Var, gates: &mut Vec<Var>) -> (Vec<Var>, Var) {
        let n = self.config.encoder_blocks;
        let mut blocks = Vec::with_capacity(n);
        let mut x = image;
        for i in 1..=n {
            let gate = match &self.moe {
                Some(m) if i == self.config.moe_block_index => {
                    let g = moe::site_gate(ctx, m, &format!("moe.enc{i}"), x, image);
                    gates.push(g);
                    Some(g)
                }
                _ => None,
            };
            let y = ctx.gated_conv(x, &format!("enc{i}.conv1"), 2, false, gate);
            let y = ctx.bn(y, &format!("enc{i}.bn1"));
            let y = ctx.graph.relu(y);
            let y = ctx.gated_conv(y, &format!("enc{i}.conv2"), 1, false, gate);
            let y = ctx.bn(y, &format!("enc{i}.bn2"));
            x = ctx.graph.relu(y);
            blocks.push(x);
        }
        let deep_up = ctx.graph.upsample_nearest(blocks[n - 1], 2);
        let up_in = ctx.graph.concat_channels(deep_up, blocks[n - 2]);
        let gate = match &self.moe {
            Some(m) if m.wrap_upsampling && self.config.moe_block_index == n => {
                let g = moe::site_gate(ctx, m, "moe.up", up_in, image);
                gates.push(g);
                Some(g)
            }
            _ => None,
        };
        let y = ctx.gated_conv(up_in, "up.conv1", 1, false, gate);
        let y = ctx.bn(y, "up.bn1");
        let y = ctx.graph.relu(y);
        let feats = ctx.gated_conv(y, "up.conv2", 1, true, gate);
        (blocks, feats)
    }

    /// Builds the full forward graph for `pair`.
    pub fn forward_graph(&self, ctx: &mut Ctx<'_>, pair: &StereoPair) -> Result<ForwardVars> {
        self.check_input(pair)?;
        let mut gates = Vec::new();
        let left = ctx.graph.constant(pair.left.clone());
        let right = ctx.graph.constant(pair.right.clone());
        let (left_blocks, fl) = self.encode_view(ctx, left, &mut gates);
        let (right_blocks, fr) = self.encode_view(ctx, right, &mut gates);
        let dn = self.config.disparities_at_cost_scale();
        let fl = ctx.graph.normalize_channels(fl, NORMALIZE_EPS);
        let fr = ctx.graph.normalize_channels(fr, NORMALIZE_EPS);
        let cv = ctx.graph.correlation(fl, fr, dn, OUT_OF_VIEW_SIMILARITY);
        let h = ctx.conv(cv, "agg.conv1", 1, 1, false);
        let h = ctx.bn(h, "agg.bn1");
        let h = ctx.graph.relu(h);
        let h = ctx.conv(h, "agg.conv2", 1, 1, true);
        let agg = ctx.graph.add(cv, h);
        let logits = ctx.conv(agg, "head", 1, 0, true);
        let disparity = regress_graph(
            &mut ctx.graph,
            logits,
            self.config.softmax_temperature,
            self.config.cost_scale(),
        );
        Ok(ForwardVars {
            disparity,
            gates,
            left_blocks,
            right_blocks,
            logits,
        })
    }

    /// Inference with frozen statistics and no gradient tracking.
    pub fn predict(&self, pair: &StereoPair) -> Result<DisparityMap> {
        let none = BTreeSet::new();
        let mut ctx = Ctx::new(self, &none, NormMode::Eval);
        let out = self.forward_graph(&mut ctx, pair)?;
        let d = ctx.graph.value(out.disparity).clone();
        let (_, h, w) = d.dims3();
        Ok(DisparityMap::dense(d.reshape(&[h, w])?))
    }

    /// Folds per-sample batch statistics from a training forward into the
    /// running estimates (unbiased variance, momentum [`BN_MOMENTUM`]).
    pub fn absorb_batch_stats(&mut self, stats: Vec<BatchStat>) {
        for st in stats {
            let n = st.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let rm = self
                .buffers
                .get_mut(&format!("{}.running_mean", st.prefix))
                .expect("running mean");
            for (r, m) in rm.data_mut().iter_mut().zip(&st.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self
                .buffers
                .get_mut(&format!("{}.running_var", st.prefix))
                .expect("running var");
            for (r, v) in rv.data_mut().iter_mut().zip(&st.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }
}

/// Outcome of one differentiated forward pass.
#[derive(Clone, Debug)]
pub struct GradStep {
    pub loss: f64,
    /// Extra scalars requested by the loss closure, in order.
    pub components: Vec<f64>,
    /// `[H, W]` disparity from the same forward pass.
    pub prediction: Tensor,
    /// Gradients of every trainable parameter reached by the loss.
    pub grads: BTreeMap<String, Tensor>,
    pub batch_stats: Vec<BatchStat>,
}

impl StereoNet {
    /// Runs a forward pass, evaluates `loss` on it and backpropagates into the
    /// parameters named in `trainable`.
    pub fn differentiate(
        &self,
        pair: &StereoPair,
        trainable: &BTreeSet<String>,
        norm: NormMode,
        loss: impl FnOnce(&mut Graph, &ForwardVars) -> Result<(Var, Vec<Var>)>,
    ) -> Result<GradStep> {
        let mut ctx = Ctx::new(self, trainable, norm);
        let out = self.forward_graph(&mut ctx, pair)?;
        let (l, parts) = loss(&mut ctx.graph, &out)?;
        let loss_value = ctx.graph.value(l).item();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss_value}")));
        }
        let components = parts.iter().map(|&v| ctx.graph.value(v).item()).collect();
        let d = ctx.graph.value(out.disparity);
        let (_, h, w) = d.dims3();
        let prediction = d.clone().reshape(&[h, w])?;
        let batch_stats = ctx.take_batch_stats();
        let mut grads_all = ctx.graph.backward(l);
        let mut grads = BTreeMap::new();
        for (name, &v) in ctx.param_vars() {
            if trainable.contains(name) {
                if let Some(g) = grads_all.take(v) {
                    grads.insert(name.clone(), g);
                }
            }
        }
        Ok(GradStep {
            loss: loss_value,
            components,
            prediction,
            grads,
            batch_stats,
        })
    }
}

impl StereoNet {
    /// Replaces every running mean/variance with the average per-sample
    /// statistics observed over `pairs`. Parameters are not touched.
    pub fn recalibrate_norm_stats(&mut self, pairs: &[&StereoPair]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::Input("no frames to estimate statistics from".into()));
        }
        let none = BTreeSet::new();
        let mut sums: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for pair in pairs {
            let mut ctx = Ctx::new(self, &none, NormMode::Train);
            self.forward_graph(&mut ctx, pair)?;
            for st in ctx.take_batch_stats() {
                let n = st.count as f64;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let entry = sums
                    .entry(st.prefix)
                    .or_insert_with(|| (vec![0.0; st.mean.len()], vec![0.0; st.var.len()]));
                for (a, m) in entry.0.iter_mut().zip(&st.mean) {
                    *a += m;
                }
                for (a, v) in entry.1.iter_mut().zip(&st.var) {
                    *a += v * unbias;
                }
            }
        }
        let k = pairs.len() as f64;
        for (prefix, (m, v)) in sums {
            let c = m.len();
            self.set_buffer(
                &format!("{prefix}.running_mean"),
                Tensor::from_vec(&[c], m.into_iter().map(|x| x / k).collect())?,
            );
            self.set_buffer(
                &format!("{prefix}.running_var"),
                Tensor::from_vec(&[c], v.into_iter().map(|x| x / k).collect())?,
            );
        }
        Ok(())
    }
}

impl Ctx<'_> {
    pub fn take_batch_stats(&mut self) -> Vec<BatchStat> {
        std::mem::take(&mut self.batch_stats)
    }
}

/// Soft-argmax over `logits: [D, h, w]`, rescaled and upsampled by `scale`.
pub(crate) fn regress_graph(g: &mut Graph, logits: Var, temperature: f64, scale: usize) -> Var {
    let d = g.soft_argmax(logits, temperature);
    let d = g.mul_scalar(d, scale as f64);
    if scale > 1 {
        g.upsample_bilinear(d, scale)
    } else {
        d
    }
}

/// Runs the encoder on both views and returns the block outputs.
pub fn encode(pair: &StereoPair, model: &StereoNet) -> Result<(Vec<FeatureMap>, Vec<FeatureMap>)> {
    let none = BTreeSet::new();
    let mut ctx = Ctx::new(model, &none, NormMode::Eval);
    let out = model.forward_graph(&mut ctx, pair)?;
    let collect = |vars: &[Var]| {
        vars.iter()
            .enumerate()
            .map(|(i, &v)| FeatureMap {
                data: ctx.graph.value(v).clone(),
                scale: 1 << (i + 1),
            })
            .collect::<Vec<_>>()
    };
    Ok((collect(&out.left_blocks), collect(&out.right_blocks)))
}

/// Cosine correlation volume `[D, H, W]` between two feature maps.
pub fn build_cost_volume(
    fl: &FeatureMap,
    fr: &FeatureMap,
    max_disp_at_scale: usize,
) -> Result<Tensor> {
    if fl.data.shape() != fr.data.shape() {
        return Err(Error::Shape(format!(
            "feature maps {:?} and {:?} differ",
            fl.data.shape(),
            fr.data.shape()
        )));
    }
    if max_disp_at_scale == 0 {
        return Err(Error::Input("max_disp_at_scale must be >= 1".into()));
    }
    let mut g = Graph::new();
    let l = g.constant(fl.data.clone());
    let r = g.constant(fr.data.clone());
    let l = g.normalize_channels(l, NORMALIZE_EPS);
    let r = g.normalize_channels(r, NORMALIZE_EPS);
    let cv = g.correlation(l, r, max_disp_at_scale, OUT_OF_VIEW_SIMILARITY);
    Ok(g.value(cv).clone())
}

/// Per-pixel argmax over disparity of a `[D, H, W]` similarity volume; ties
/// resolve to the smaller disparity.
pub fn argmax_disparity(volume: &Tensor) -> Tensor {
    let (dn, h, w) = volume.dims3();
    let n = h * w;
    let v = volume.data();
    Tensor::from_fn(&[h, w], |p| {
        let mut best = 0;
        for d in 1..dn {
            if v[d * n + p] > v[best * n + p] {
                best = d;
            }
        }
        best as f64
    })
}

/// Soft-argmax regression of `[D, h, w]` logits, scaled and upsampled by `scale`.
pub fn regress_disparity(volume: &Tensor, temperature: f64, scale: usize) -> Result<DisparityMap> {
    if !volume.all_finite() {
        return Err(Error::Numeric("cost volume has non-finite entries".into()));
    }
    if volume.shape().len() != 3 || volume.shape()[0] == 0 {
        return Err(Error::Shape("volume must be [D, H, W] with D >= 1".into()));
    }
    let mut g = Graph::new();
    let v = g.constant(volume.clone());
    let d = regress_graph(&mut g, v, temperature, scale.max(1));
    let t = g.value(d).clone();
    let (_, h, w) = t.dims3();
    Ok(DisparityMap::dense(t.reshape(&[h, w])?))
}

/// Parameter names selected by `mode` (`"student_peft"`, `"teacher_adaptbn"`,
/// `"full_tune"`, `"frozen"`).
pub fn parameter_partition(model: &StereoNet, mode: &str) -> Result<BTreeSet<String>> {
    Ok(model.partition(mode.parse()?))
}

pub fn forward(pair: &StereoPair, model: &StereoNet) -> Result<DisparityMap> {
    model.predict(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_pair(seed: u64, h: usize, w: usize) -> StereoPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = Tensor::from_fn(&[3, h, w], |_| rng.random());
        let r = Tensor::from_fn(&[3, h, w], |_| rng.random());
        StereoPair::new(l, r, 0).unwrap()
    }

    #[test]
    fn encoder_scales_and_channels_follow_config() {
        let net = StereoNet::new(ModelConfig::default()).unwrap();
        let (lf, rf) = encode(&random_pair(1, 64, 128), &net).unwrap();
        assert_eq!(lf.len(), 3);
        for (i, f) in lf.iter().enumerate() {
            let s = 1 << (i + 1);
            assert_eq!(f.scale, s);
            assert_eq!(
                f.data.shape(),
                &[net.config.block_channels(i + 1), 64 / s, 128 / s]
            );
        }
        assert_eq!(rf.len(), 3);
    }

    #[test]
    fn zero_input_gives_zero_features_in_fresh_net() {
        let net = StereoNet::new(ModelConfig::default()).unwrap();
        let z = Tensor::zeros(&[3, 32, 64]);
        let pair = StereoPair::new(z.clone(), z, 0).unwrap();
        let (lf, _) = encode(&pair, &net).unwrap();
        for f in lf {
            assert!(f.data.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic_and_full_resolution() {
        let net = StereoNet::new(ModelConfig::default()).unwrap();
        let pair = random_pair(2, 64, 128);
        let a = forward(&pair, &net).unwrap();
        let b = forward(&pair, &net).unwrap();
        assert_eq!(a.data.shape(), &[64, 128]);
        assert_eq!(a.data.checksum(), b.data.checksum());
        assert!(a.valid.iter().all(|&v| v));
        assert!(a.data.min() >= 0.0 && a.data.max() <= 32.0);
    }

    #[test]
    fn mismatched_views_are_rejected() {
        let l = Tensor::zeros(&[3, 16, 32]);
        let r = Tensor::zeros(&[3, 16, 24]);
        assert!(matches!(StereoPair::new(l, r, 0), Err(Error::Input(_))));
    }

    #[test]
    fn identical_features_peak_at_zero_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = FeatureMap {
            data: Tensor::from_fn(&[6, 5, 12], |_| rng.random_range(-1.0..1.0)),
            scale: 4,
        };
        let cv = build_cost_volume(&f, &f, 4).unwrap();
        assert!(argmax_disparity(&cv).data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn shifted_features_peak_at_the_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (c, h, w, s) = (6, 4, 16, 3);
        let fl = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
        // right(x) = left(x + s): a left pixel at x appears at x - s in the right view
        let fr = Tensor::from_fn(&[c, h, w], |i| {
            let x = i % w;
            if x + s < w {
                fl.data()[i + s]
            } else {
                0.5
            }
        });
        let fl = FeatureMap { data: fl, scale: 1 };
        let fr = FeatureMap { data: fr, scale: 1 };
        let cv = build_cost_volume(&fl, &fr, 6).unwrap();
        // exhaustive scan oracle over the interior
        let (dn, n) = (6, h * w);
        for y in 0..h {
            for x in dn..w - s {
                let p = y * w + x;
                let best = (0..dn)
                    .max_by(|&a, &b| {
                        cv.data()[a * n + p]
                            .total_cmp(&cv.data()[b * n + p])
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                assert_eq!(best, s, "pixel ({y},{x})");
                assert_eq!(argmax_disparity(&cv).data()[p], s as f64);
            }
        }
    }

    #[test]
    fn single_hypothesis_volume_is_self_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = FeatureMap {
            data: Tensor::from_fn(&[3, 4, 5], |_| rng.random_range(0.1..1.0)),
            scale: 1,
        };
        let cv = build_cost_volume(&f, &f, 1).unwrap();
        assert_eq!(cv.shape(), &[1, 4, 5]);
        assert!(cv.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn regression_examples() {
        let mut onehot = Tensor::zeros(&[8, 2, 2]);
        for p in 0..4 {
            onehot.data_mut()[5 * 4 + p] = 100.0;
        }
        let d = regress_disparity(&onehot, 1.0, 1).unwrap();
        assert!(d.data.data().iter().all(|&v| (v - 5.0).abs() < 1e-3));

        let uniform = Tensor::zeros(&[8, 2, 3]);
        let d = regress_disparity(&uniform, 1.0, 1).unwrap();
        assert!(d.data.data().iter().all(|&v| (v - 3.5).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let random = Tensor::from_fn(&[8, 3, 3], |_| rng.random_range(-20.0..20.0));
        let d = regress_disparity(&random, 1.0, 1).unwrap();
        assert!(d.data.min() >= 0.0 && d.data.max() <= 7.0);

        let mut bad = Tensor::zeros(&[2, 1, 1]);
        bad.data_mut()[0] = f64::NAN;
        assert!(matches!(
            regress_disparity(&bad, 1.0, 1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn partition_modes() {
        let net = StereoNet::new(ModelConfig::default()).unwrap();
        let bn = net.partition(PartitionMode::TeacherAdaptbn);
        assert_eq!(bn.len(), 2 * net.norm_layer_count());
        assert!(net.partition(PartitionMode::Frozen).is_empty());
        let peft = net.partition(PartitionMode::StudentPeft);
        let mut union = peft.clone();
        union.extend(net.complement(&peft));
        assert_eq!(union, net.partition(PartitionMode::FullTune));
        assert!(peft.is_disjoint(&net.complement(&peft)));
        assert!(matches!(
            parameter_partition(&net, "bogus"),
            Err(Error::Config(_))
        ));
    }
}

//! Online adaptation harness: source warm-up, the predict-then-adapt loop
//! over a cycling sequence of corrupted domains, and per-frame bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{global_metrics, region_split_metrics};
use crate::model::{DisparityMap, NormMode, PartitionMode, StereoNet, StereoPair};
use crate::moe::insert_moe;
use crate::optim::{Adam, AdamConfig};
use crate::proxy::{proxy_label, ProxyLabel};
use crate::supervision::{masked_label_loss, photometric_loss_graph, total_loss_graph};
use crate::synth::{synth_pair, CorruptionKind, DomainSpec, SceneConfig};
use crate::teacher::{ema_update, init_teacher, TeacherMode, TeacherState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub rounds: usize,
    pub scene: SceneConfig,
    pub domains: Vec<DomainSpec>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            rounds: 3,
            scene: SceneConfig::default(),
            domains: vec![
                DomainSpec::new("haze", CorruptionKind::Fog, 0.4, 60),
                DomainSpec::new("rain", CorruptionKind::Rain, 0.7, 60),
                DomainSpec::new("fog", CorruptionKind::Fog, 0.7, 60),
            ],
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("sequence.rounds must be >= 1".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("sequence.domains must not be empty".into()));
        }
        self.scene.validate()?;
        for d in &self.domains {
            d.validate()?;
        }
        Ok(())
    }

    pub fn frames_per_round(&self) -> usize {
        self.domains.iter().map(|d| d.frames).sum()
    }

    pub fn total_frames(&self) -> usize {
        self.rounds * self.frames_per_round()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    /// Clean source frames used for both phases.
    pub source_frames: usize,
    /// Held-out clean frames for evaluation.
    pub heldout_frames: usize,
    /// Phase 1: full supervised training of the plain backbone.
    pub pretrain_epochs: usize,
    /// Final phase-1 epochs run with normalization statistics frozen.
    pub pretrain_frozen_norm_epochs: usize,
    pub pretrain_lr: f64,
    /// Phase 2: router, gate and regression parameters only.
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the mean-gate penalty during phase 2.
    pub gate_sparsity_weight: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            source_frames: 160,
            heldout_frames: 16,
            pretrain_epochs: 12,
            pretrain_frozen_norm_epochs: 4,
            pretrain_lr: 1e-3,
            epochs: 10,
            lr: 5e-4,
            gate_sparsity_weight: 0.0,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source_frames == 0 {
            return Err(Error::Config("warmup.source_frames must be >= 1".into()));
        }
        for (k, v) in [("pretrain_lr", self.pretrain_lr), ("lr", self.lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("warmup.{k} must be >= 0")));
            }
        }
        if self.pretrain_frozen_norm_epochs > self.pretrain_epochs {
            return Err(Error::Config(
                "warmup.pretrain_frozen_norm_epochs exceeds warmup.pretrain_epochs".into(),
            ));
        }
        if !(self.gate_sparsity_weight >= 0.0) {
            return Err(Error::Config(
                "warmup.gate_sparsity_weight must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Student optimizer and the parameter set it updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub partition: PartitionMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        OptimizerConfig {
            partition: PartitionMode::StudentPeft,
            lr: 1e-3,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    /// Scene stream of the adaptation sequence.
    pub sequence: u64,
    /// Scene stream of the warm-up source data.
    pub source: u64,
    /// Shuffling of source frames during warm-up.
    pub shuffle: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig {
            sequence: 1,
            source: 1000,
            shuffle: 7,
        }
    }
}

/// Labelled clean frames from the source stream.
pub fn source_stream(
    scene: &SceneConfig,
    frames: usize,
    seed: u64,
) -> Result<Vec<(StereoPair, DisparityMap)>> {
    let clean = DomainSpec::new("source", CorruptionKind::Clean, 0.0, frames.max(1));
    (0..frames as u64)
        .map(|i| synth_pair(&clean, scene, i, seed))
        .collect()
}

/// Mean end-point error of `model` over labelled frames.
pub fn evaluate(model: &StereoNet, frames: &[(StereoPair, DisparityMap)]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::Input("no frames to evaluate".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (pair, gt) in frames {
        let pred = model.predict(pair)?;
        if let Some(e) = global_metrics(&pred.data, gt)?.epe {
            total += e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("no frame has valid ground truth".into()));
    }
    Ok(total / n as f64)
}

fn epoch_order(n: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Phase 1: supervised training of every backbone parameter. The first
/// `epochs - frozen_norm_epochs` epochs normalize with per-sample statistics;
/// the running statistics are then re-estimated over the source frames and
/// the remaining epochs train against them frozen, matching inference.
/// Returns per-epoch mean loss.
pub fn pretrain_backbone(
    model: &StereoNet,
    source: &[(StereoPair, DisparityMap)],
    epochs: usize,
    frozen_norm_epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(StereoNet, Vec<f64>)> {
    if source.is_empty() {
        return Err(Error::Input("empty source stream".into()));
    }
    let mut net = model.clone();
    if epochs == 0 {
        return Ok((net, vec![]));
    }
    let trainable = net.partition(PartitionMode::FullTune);
    let mut opt = Adam::new(AdamConfig::with_lr(lr));
    let mut history = Vec::with_capacity(epochs);
    let pairs: Vec<&StereoPair> = source.iter().map(|(p, _)| p).collect();
    let switch = epochs.saturating_sub(frozen_norm_epochs);
    for epoch in 0..epochs {
        if epoch == switch {
            net.recalibrate_norm_stats(&pairs)?;
        }
        let norm = if epoch < switch {
            NormMode::Train
        } else {
            NormMode::Eval
        };
        let mut sum = 0.0;
        for i in epoch_order(source.len(), epoch, seed) {
            let (pair, gt) = &source[i];
            let step = net.differentiate(pair, &trainable, norm, |g, out| {
                Ok((
                    masked_label_loss(g, out.disparity, &gt.data, &gt.valid, 1.0),
                    vec![],
                ))
            })?;
            opt.step(&mut net, &trainable, &step.grads)?;
            net.absorb_batch_stats(step.batch_stats);
            sum += step.loss;
        }
        history.push(sum / source.len() as f64);
    }
    if switch == epochs {
        net.recalibrate_norm_stats(&pairs)?;
    }
    Ok((net, history))
}

/// Phase 2: trains router, gate and regression parameters of a model with
/// inserted MoE layers against ground truth, backbone frozen.
pub fn warmup(
    model_with_moe: &StereoNet,
    source: &[(StereoPair, DisparityMap)],
    epochs: usize,
    lr: f64,
    gate_sparsity_weight: f64,
    seed: u64,
) -> Result<(StereoNet, Vec<f64>)> {
    if source.is_empty() {
        return Err(Error::Input("empty source stream".into()));
    }
    let mut net = model_with_moe.clone();
    let trainable = net.partition(PartitionMode::StudentPeft);
    let mut opt = Adam::new(AdamConfig::with_lr(lr));
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut sum = 0.0;
        for i in epoch_order(source.len(), epoch, seed) {
            let (pair, gt) = &source[i];
            let step = net.differentiate(pair, &trainable, NormMode::Eval, |g, out| {
                let mut loss = masked_label_loss(g, out.disparity, &gt.data, &gt.valid, 1.0);
                if gate_sparsity_weight > 0.0 && !out.gates.is_empty() {
                    let mut acc = g.mean(out.gates[0]);
                    for &gv in &out.gates[1..] {
                        let m = g.mean(gv);
                        acc = g.add(acc, m);
                    }
                    let pen = g.mul_scalar(acc, gate_sparsity_weight / out.gates.len() as f64);
                    loss = g.add(loss, pen);
                }
                Ok((loss, vec![]))
            })?;
            opt.step(&mut net, &trainable, &step.grads)?;
            sum += step.loss;
        }
        history.push(sum / source.len() as f64);
    }
    Ok((net, history))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WarmupReport {
    pub pretrain_loss: Vec<f64>,
    pub warmup_loss: Vec<f64>,
    /// Held-out clean EPE of the untrained network, after phase 1, and after phase 2.
    pub heldout_epe_untrained: f64,
    pub heldout_epe_pretrained: f64,
    pub heldout_epe_warm: f64,
}

/// Output of warm-up: the source backbone the teacher starts from and the
/// student (backbone plus trained MoE layers).
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub source: StereoNet,
    pub student: StereoNet,
    pub report: WarmupReport,
}

/// Runs both warm-up phases as configured.
pub fn warm_start(cfg: &RunConfig) -> Result<WarmStart> {
    cfg.validate()?;
    let w = &cfg.warmup;
    let scene = &cfg.sequence.scene;
    let all = source_stream(scene, w.source_frames + w.heldout_frames, cfg.seeds.source)?;
    let (train, heldout) = all.split_at(w.source_frames);
    let init = StereoNet::new(cfg.model.clone())?;
    let untrained = if heldout.is_empty() {
        f64::NAN
    } else {
        evaluate(&init, heldout)?
    };
    let (source, pretrain_loss) = pretrain_backbone(
        &init,
        train,
        w.pretrain_epochs,
        w.pretrain_frozen_norm_epochs,
        w.pretrain_lr,
        cfg.seeds.shuffle,
    )?;
    let pretrained = if heldout.is_empty() {
        f64::NAN
    } else {
        evaluate(&source, heldout)?
    };
    let (student, warmup_loss) = phase_two(&source, cfg, train)?;
    let warm = if heldout.is_empty() {
        f64::NAN
    } else {
        evaluate(&student, heldout)?
    };
    Ok(WarmStart {
        source,
        student,
        report: WarmupReport {
            pretrain_loss,
            warmup_loss,
            heldout_epe_untrained: untrained,
            heldout_epe_pretrained: pretrained,
            heldout_epe_warm: warm,
        },
    })
}

/// Runs phase 2 only, on an already pre-trained `source` backbone. Lets MoE
/// variants share one backbone.
pub fn warm_start_from_source(source: &StereoNet, cfg: &RunConfig) -> Result<WarmStart> {
    cfg.validate()?;
    let w = &cfg.warmup;
    let all = source_stream(
        &cfg.sequence.scene,
        w.source_frames + w.heldout_frames,
        cfg.seeds.source,
    )?;
    let (train, heldout) = all.split_at(w.source_frames);
    let pretrained = if heldout.is_empty() {
        f64::NAN
    } else {
        evaluate(source, heldout)?
    };
    let (student, warmup_loss) = phase_two(source, cfg, train)?;
    let warm = if heldout.is_empty() {
        f64::NAN
    } else {
        evaluate(&student, heldout)?
    };
    Ok(WarmStart {
        source: source.clone(),
        student,
        report: WarmupReport {
            pretrain_loss: Vec::new(),
            warmup_loss,
            heldout_epe_untrained: f64::NAN,
            heldout_epe_pretrained: pretrained,
            heldout_epe_warm: warm,
        },
    })
}

/// Inserts MoE layers into a copy of `source` (when enabled) and runs phase 2.
pub fn phase_two(
    source: &StereoNet,
    cfg: &RunConfig,
    train: &[(StereoPair, DisparityMap)],
) -> Result<(StereoNet, Vec<f64>)> {
    let mut student = source.clone();
    if cfg.moe.enabled {
        insert_moe(&mut student, &cfg.moe)?;
    }
    let w = &cfg.warmup;
    warmup(
        &student,
        train,
        w.epochs,
        w.lr,
        w.gate_sparsity_weight,
        cfg.seeds.shuffle,
    )
}

/// One frame of a sequence with its proxy label precomputed.
#[derive(Clone, Debug)]
pub struct Frame {
    pub pair: StereoPair,
    pub gt: DisparityMap,
    pub proxy: ProxyLabel,
    pub domain: usize,
    pub scene_index: u64,
}

/// The distinct frames of one round. Rounds replay the same frames in the
/// same order, so labels are computed once and shared by every round.
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    pub domains: Vec<DomainSpec>,
    pub rounds: usize,
    pub frames: Vec<Frame>,
}

impl PreparedSequence {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.sequence.validate()?;
        cfg.proxy.validate()?;
        let seq = &cfg.sequence;
        let mut frames = Vec::with_capacity(seq.frames_per_round());
        let mut scene_index = 0u64;
        for (di, spec) in seq.domains.iter().enumerate() {
            for _ in 0..spec.frames {
                let (pair, gt) = synth_pair(spec, &seq.scene, scene_index, cfg.seeds.sequence)?;
                let proxy = proxy_label(&pair, &cfg.proxy)?;
                frames.push(Frame {
                    pair,
                    gt,
                    proxy,
                    domain: di,
                    scene_index,
                });
                scene_index += 1;
            }
        }
        Ok(PreparedSequence {
            domains: seq.domains.clone(),
            rounds: seq.rounds,
            frames,
        })
    }

    /// Same frames with every ground-truth disparity replaced by zero.
    pub fn with_zeroed_ground_truth(&self) -> Self {
        let mut out = self.clone();
        for f in &mut out.frames {
            f.gt.data = Tensor::zeros(f.gt.data.shape());
        }
        out
    }
}

/// One record per processed frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Position in the whole run, starting at 0.
    pub frame_index: u64,
    pub scene_index: u64,
    pub domain: String,
    /// Round, starting at 1.
    pub round: usize,
    pub epe: Option<f64>,
    pub d1_all: Option<f64>,
    pub epe_valid: Option<f64>,
    pub epe_invalid: Option<f64>,
    pub d1_valid: Option<f64>,
    pub d1_invalid: Option<f64>,
    pub proxy_density: f64,
    pub loss_proxy: f64,
    pub loss_teacher: f64,
    pub loss_total: f64,
    /// End-point error of the teacher label, when a teacher was queried.
    pub teacher_epe: Option<f64>,
    /// Checksum of all student parameters after this frame's update.
    pub student_checksum: String,
    pub wall_time_ms: f64,
}

impl MetricRecord {
    /// Equality on everything except wall-clock time.
    pub fn same_outcome(&self, other: &MetricRecord) -> bool {
        let mut a = self.clone();
        a.wall_time_ms = other.wall_time_ms;
        &a == other
    }
}

pub struct AdaptationState {
    pub student: StereoNet,
    pub trainable: BTreeSet<String>,
    pub optimizer: Adam,
    pub teacher: TeacherState,
    pub config: RunConfig,
    pub frame_counter: u64,
}

impl AdaptationState {
    pub fn new(warm: &WarmStart, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let trainable = warm.student.partition(cfg.optimizer.partition);
        let teacher = match cfg.teacher.mode {
            TeacherMode::Ema => init_teacher(&warm.student, TeacherMode::Ema, cfg.teacher.lr),
            mode => init_teacher(&warm.source, mode, cfg.teacher.lr),
        };
        Ok(AdaptationState {
            student: warm.student.clone(),
            trainable,
            optimizer: Adam::new(cfg.optimizer.adam()),
            teacher,
            config: cfg.clone(),
            frame_counter: 0,
        })
    }

    fn uses_teacher(&self) -> bool {
        !self.config.loss.photometric && self.config.loss.lambda > 0.0
    }

    /// Checksum of the student parameters that adaptation must never touch.
    pub fn frozen_checksum(&self) -> u64 {
        self.student
            .checksum_of(&self.student.complement(&self.trainable))
    }

    /// Checksum of the teacher parameters outside its trainable set.
    pub fn teacher_frozen_checksum(&self) -> u64 {
        let t = &self.teacher;
        t.model.checksum_of(&t.model.complement(&t.trainable))
    }
}

fn grads_all_zero(grads: &BTreeMap<String, Tensor>) -> bool {
    grads.values().all(|g| g.data().iter().all(|&v| v == 0.0))
}

/// Processes one frame: predict, score against ground truth, then adapt the
/// student (and teacher) from the frame's proxy and teacher labels only.
pub fn adapt_step(
    state: &mut AdaptationState,
    frame: &Frame,
    domain: &str,
    round: usize,
) -> Result<MetricRecord> {
    let started = Instant::now();
    let loss_cfg = state.config.loss.clone();
    let beta = loss_cfg.smooth_l1_beta;
    let label = &frame.proxy;
    let use_teacher = state.uses_teacher();
    let teacher_first = use_teacher
        && state.teacher.mode == TeacherMode::Adaptbn
        && !state.config.teacher.update_after_student;
    if teacher_first {
        state
            .teacher
            .prepare_update(&frame.pair, &label.disparity.data, &label.masks, beta)
            .and_then(|p| state.teacher.apply_update(&p))?;
    }

    let mut metrics = None;
    let mut teacher_epe = None;
    let mut pending_teacher = None;
    let adapting = !state.trainable.is_empty();
    let step = {
        let teacher = &state.teacher;
        let pair = &frame.pair;
        state
            .student
            .differentiate(pair, &state.trainable, NormMode::Eval, |g, out| {
                // (1)-(2): metrics of the prediction made before any update
                let (_, h, w) = g.value(out.disparity).dims3();
                let pred = g.value(out.disparity).clone().reshape(&[h, w])?;
                let all = global_metrics(&pred, &frame.gt)?;
                let (v, inv) = region_split_metrics(&pred, &frame.gt, &label.masks)?;
                metrics = Some((all, v, inv));
                if !adapting {
                    let zero = g.constant(Tensor::scalar(0.0));
                    return Ok((zero, vec![zero, zero]));
                }
                if loss_cfg.photometric {
                    let l = photometric_loss_graph(g, pair, out.disparity, loss_cfg.alpha);
                    let zero = g.constant(Tensor::scalar(0.0));
                    return Ok((l, vec![zero, zero]));
                }
                // (3)-(4): proxy label and teacher prediction
                let teacher_pred = if use_teacher {
                    if teacher.mode == TeacherMode::Adaptbn && !teacher_first {
                        let p = teacher.prepare_update(
                            pair,
                            &label.disparity.data,
                            &label.masks,
                            beta,
                        )?;
                        let d = p.prediction.clone();
                        pending_teacher = Some(p);
                        Some(d)
                    } else {
                        Some(teacher.model.predict(pair)?.data)
                    }
                } else {
                    None
                };
                if let Some(t) = &teacher_pred {
                    teacher_epe = global_metrics(t, &frame.gt)?.epe;
                }
                let (total, lp, lt) = total_loss_graph(
                    g,
                    out.disparity,
                    &label.disparity.data,
                    teacher_pred.as_ref(),
                    &label.masks,
                    &loss_cfg,
                );
                Ok((total, vec![lp, lt]))
            })?
    };

    // (5) student update
    if adapting && !grads_all_zero(&step.grads) {
        state
            .optimizer
            .step(&mut state.student, &state.trainable, &step.grads)?;
    }
    // (6) teacher update
    if let Some(p) = pending_teacher {
        state.teacher.apply_update(&p)?;
    }
    if use_teacher && state.teacher.mode == TeacherMode::Ema {
        let m = state.config.teacher.ema_momentum;
        ema_update(&mut state.teacher, &state.student, m)?;
    }

    let (all, v, inv) = metrics.expect("metrics are computed in the forward pass");
    let record = MetricRecord {
        frame_index: state.frame_counter,
        scene_index: frame.scene_index,
        domain: domain.to_string(),
        round,
        epe: all.epe,
        d1_all: all.d1,
        epe_valid: v.epe,
        epe_invalid: inv.epe,
        d1_valid: v.d1,
        d1_invalid: inv.d1,
        proxy_density: label.density,
        loss_proxy: step.components[0],
        loss_teacher: step.components[1],
        loss_total: step.loss,
        teacher_epe,
        student_checksum: format!("{:016x}", state.student.checksum()),
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    state.frame_counter += 1;
    Ok(record)
}

/// Records and per-(round, domain) means of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub summary: Vec<crate::report::SummaryRow>,
}

impl RunOutput {
    /// Frame-weighted mean of a metric over every frame of `round`.
    pub fn round_mean(
        &self,
        round: usize,
        metric: impl Fn(&MetricRecord) -> Option<f64>,
    ) -> Option<f64> {
        crate::report::mean_defined(self.records.iter().filter(|r| r.round == round).map(metric))
    }
}

/// Runs every round of `prepared` from `warm`, calling `on_frame` after each
/// frame with the record and the updated state.
pub fn run_prepared(
    cfg: &RunConfig,
    warm: &WarmStart,
    prepared: &PreparedSequence,
    mut on_frame: impl FnMut(&MetricRecord, &AdaptationState),
) -> Result<RunOutput> {
    let mut state = AdaptationState::new(warm, cfg)?;
    let mut records = Vec::with_capacity(prepared.rounds * prepared.frames.len());
    for round in 1..=prepared.rounds {
        for frame in &prepared.frames {
            let name = &prepared.domains[frame.domain].name;
            let rec = adapt_step(&mut state, frame, name, round)?;
            on_frame(&rec, &state);
            records.push(rec);
        }
    }
    let summary = crate::report::summarize(&records)?;
    Ok(RunOutput { records, summary })
}

/// Generates the configured sequence and runs it.
pub fn run_sequence(cfg: &RunConfig, warm: &WarmStart) -> Result<RunOutput> {
    let prepared = PreparedSequence::new(cfg)?;
    run_prepared(cfg, warm, &prepared, |_, _| {})
}

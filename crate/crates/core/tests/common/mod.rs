//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robia_core::model::{ModelConfig, StereoNet, StereoPair};
use robia_core::moe::{insert_moe, MoeConfig};
use robia_core::Tensor;

/// Minimum path energy over every disparity sequence on a 1×W strip that
/// ends in disparity `d` at column `x`: data costs plus transition penalties.
pub fn brute_force_energy(cost: &[Vec<u32>], p1: u32, p2: u32) -> Vec<Vec<u64>> {
    let w = cost.len();
    let dn = cost[0].len();
    let mut best = vec![vec![u64::MAX; dn]; w];
    for x in 0..w {
        let len = x + 1;
        for code in 0..dn.pow(len as u32) {
            let mut seq = Vec::with_capacity(len);
            let mut c = code;
            for _ in 0..len {
                seq.push(c % dn);
                c /= dn;
            }
            let mut e = 0u64;
            for (i, &d) in seq.iter().enumerate() {
                e += cost[i][d] as u64;
                if i > 0 {
                    e += match seq[i - 1].abs_diff(d) {
                        0 => 0,
                        1 => p1 as u64,
                        _ => p2 as u64,
                    };
                }
            }
            best[x][seq[len - 1]] = best[x][seq[len - 1]].min(e);
        }
    }
    best
}

/// Scalar-loop end-point error over valid pixels.
pub fn oracle_epe(pred: &[f64], gt: &[f64], valid: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..pred.len() {
        if valid[i] {
            sum += (pred[i] - gt[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Scalar-loop D1: share of valid pixels whose error exceeds both 3 px and 5 % of ground truth.
pub fn oracle_d1(pred: &[f64], gt: &[f64], valid: &[bool]) -> Option<f64> {
    let mut bad = 0;
    let mut n = 0;
    for i in 0..pred.len() {
        if valid[i] {
            let e = (pred[i] - gt[i]).abs();
            if e > 3.0 && e > 0.05 * gt[i] {
                bad += 1;
            }
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(bad as f64 / n as f64)
    }
}

/// A model below 5k parameters: two encoder blocks of 4/6 channels,
/// disparity range 8, MoE on the deepest block.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder_blocks: 2,
        base_channels: 4,
        max_disparity: 8,
        moe_block_index: 2,
        seed: 3,
        ..ModelConfig::default()
    }
}

pub fn tiny_student() -> StereoNet {
    let mut net = StereoNet::new(tiny_config()).unwrap();
    let cfg = MoeConfig {
        router_init_scale: 0.3,
        ..MoeConfig::default()
    };
    insert_moe(&mut net, &cfg).unwrap();
    perturb(&mut net, 11);
    net
}

/// Moves every parameter slightly off its initial value so that no
/// gradient is structurally zero (e.g. zero-initialised gate weights).
pub fn perturb(net: &mut StereoNet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = net.params().keys().cloned().collect();
    for name in names {
        for v in net.param_mut(&name).unwrap().data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
}

pub fn random_pair(h: usize, w: usize, seed: u64) -> StereoPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StereoPair::new(
        Tensor::from_fn(&[3, h, w], |_| rng.random()),
        Tensor::from_fn(&[3, h, w], |_| rng.random()),
        0,
    )
    .unwrap()
}

/// Largest tensor-wise relative error between analytic gradients and
/// central differences of `loss` over the named parameters.
pub fn max_relative_fd_error(
    net: &StereoNet,
    names: &BTreeSet<String>,
    analytic: &BTreeMap<String, Tensor>,
    h: f64,
    loss: impl Fn(&StereoNet) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for name in names {
        let a = &analytic[name];
        let mut probe = net.clone();
        let n = a.numel();
        let mut num = vec![0.0; n];
        for (i, slot) in num.iter_mut().enumerate() {
            let orig = probe.param(name).unwrap().data()[i];
            probe.param_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.param_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.param_mut(name).unwrap().data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = a
            .data()
            .iter()
            .zip(&num)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = a
            .data()
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(num.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// A run small enough for protocol tests: 32×64 frames, two short domains,
/// two rounds and a few warm-up epochs.
pub fn small_run_config() -> robia_core::config::RunConfig {
    use robia_core::synth::{CorruptionKind, DomainSpec};
    let mut c = robia_core::config::RunConfig::default();
    c.model.max_disparity = 16;
    c.proxy.max_disp = 16;
    c.sequence.scene.height = 32;
    c.sequence.scene.width = 64;
    c.sequence.scene.max_disparity = 12.0;
    c.sequence.rounds = 2;
    c.sequence.domains = vec![
        DomainSpec::new("haze", CorruptionKind::Fog, 0.4, 4),
        DomainSpec::new("rain", CorruptionKind::Rain, 0.7, 4),
    ];
    c.warmup.source_frames = 24;
    c.warmup.heldout_frames = 6;
    c.warmup.pretrain_epochs = 6;
    c.warmup.pretrain_frozen_norm_epochs = 2;
    c.warmup.epochs = 2;
    c
}

mod common;

use proptest::prelude::*;
use robia_core::checkpoint::{load_model, save_model};
use robia_core::config::{parse_config, RunConfig};
use robia_core::metrics::{global_metrics, region_split_metrics};
use robia_core::model::{DisparityMap, StereoNet};
use robia_core::moe::{gate, Activation};
use robia_core::proxy::MaskPair;
use robia_core::teacher::{init_teacher, TeacherMode};
use robia_core::Tensor;

use common::{oracle_d1, oracle_epe, random_pair, tiny_config, tiny_student};

fn map_strategy(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, Vec<bool>)> {
    (
        proptest::collection::vec(0.0..20.0f64, n),
        proptest::collection::vec(0.0..20.0f64, n),
        proptest::collection::vec(any::<bool>(), n),
        proptest::collection::vec(any::<bool>(), n),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn region_split_recombines_to_global((pred, gt, gt_valid, proxy_valid) in map_strategy(48)) {
        let p = Tensor::from_vec(&[6, 8], pred.clone()).unwrap();
        let g = DisparityMap { data: Tensor::from_vec(&[6, 8], gt.clone()).unwrap(), valid: gt_valid.clone() };
        let masks = MaskPair::from_valid(proxy_valid, 0.5);
        let all = global_metrics(&p, &g).unwrap();
        let (v, i) = region_split_metrics(&p, &g, &masks).unwrap();
        prop_assert_eq!(v.pixels + i.pixels, all.pixels);
        prop_assert_eq!(all.epe, oracle_epe(&pred, &gt, &gt_valid));
        let d1 = oracle_d1(&pred, &gt, &gt_valid);
        prop_assert_eq!(all.d1.is_some(), d1.is_some());
        if let (Some(a), Some(b)) = (all.d1, d1) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        if all.pixels > 0 {
            let weighted = |m: robia_core::metrics::RegionMetrics, f: fn(&robia_core::metrics::RegionMetrics) -> Option<f64>| {
                f(&m).unwrap_or(0.0) * m.pixels as f64
            };
            let epe = (weighted(v, |m| m.epe) + weighted(i, |m| m.epe)) / all.pixels as f64;
            let d1 = (weighted(v, |m| m.d1) + weighted(i, |m| m.d1)) / all.pixels as f64;
            prop_assert!((epe - all.epe.unwrap()).abs() < 1e-9);
            prop_assert!((d1 - all.d1.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn gates_stay_in_range(
        e in proptest::collection::vec(-50.0..50.0f64, 6),
        w in proptest::collection::vec(-3.0..3.0f64, 36),
        b in proptest::collection::vec(-5.0..5.0f64, 6),
    ) {
        let e = Tensor::from_vec(&[6], e).unwrap();
        let w = Tensor::from_vec(&[6, 6], w).unwrap();
        let b = Tensor::from_vec(&[6], b).unwrap();
        let s = gate(&e, &w, Some(&b), Activation::Sigmoid).unwrap();
        prop_assert!(s.values.iter().all(|&g| (0.0..=1.0).contains(&g)));
        let r = gate(&e, &w, Some(&b), Activation::Relu).unwrap();
        prop_assert!(r.values.iter().all(|&g| g >= 0.0 && g.is_finite()));
    }

    #[test]
    fn resolved_config_round_trips(rounds in 1usize..6, lr in 1e-6..1e-1f64, lambda in 0.0..2.0f64, seed in any::<u32>()) {
        let mut cfg = RunConfig::default();
        cfg.sequence.rounds = rounds;
        cfg.optimizer.lr = lr;
        cfg.loss.lambda = lambda;
        cfg.seeds.sequence = seed as u64;
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}

#[test]
fn checkpoint_round_trip_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let net = tiny_student();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_model(&net, Some(TeacherMode::Adaptbn), &a).unwrap();
    let (loaded, mode) = load_model(&a).unwrap();
    assert_eq!(mode, Some(TeacherMode::Adaptbn));
    save_model(&loaded, Some(TeacherMode::Adaptbn), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        loaded.params().keys().collect::<Vec<_>>(),
        net.params().keys().collect::<Vec<_>>()
    );

    let pair = random_pair(16, 32, 5);
    let p0 = net.predict(&pair).unwrap();
    let p1 = loaded.predict(&pair).unwrap();
    let worst = p0
        .data
        .data()
        .iter()
        .zip(p1.data.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(
        worst < 1e-3,
        "stored precision changed predictions by {worst}"
    );
}

#[test]
fn small_teacher_steps_descend() {
    let source = StereoNet::new(tiny_config()).unwrap();
    let pair = random_pair(16, 32, 9);
    let target = Tensor::full(&[16, 32], 3.0);
    let masks = MaskPair::from_valid(vec![true; 16 * 32], 0.5);
    for lr in [1e-7, 5e-6] {
        let mut teacher = init_teacher(&source, TeacherMode::Adaptbn, lr);
        let before = teacher.prepare_update(&pair, &target, &masks, 1.0).unwrap();
        teacher.apply_update(&before).unwrap();
        let after = teacher.prepare_update(&pair, &target, &masks, 1.0).unwrap();
        assert!(
            after.loss <= before.loss,
            "lr {lr}: {} -> {}",
            before.loss,
            after.loss
        );
    }
}

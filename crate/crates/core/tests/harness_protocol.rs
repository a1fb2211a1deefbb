mod common;

use std::sync::OnceLock;

use robia_core::config::RunConfig;
use robia_core::harness::{evaluate, run_prepared, warm_start, PreparedSequence, WarmStart};
use robia_core::metrics::global_metrics;
use robia_core::model::{PartitionMode, StereoPair};
use robia_core::proxy::MaskPair;
use robia_core::report::mean_defined;
use robia_core::synth::{synth_pair, CorruptionKind, DomainSpec};
use robia_core::teacher::TeacherMode;

use common::small_run_config;

fn warm() -> &'static WarmStart {
    static WARM: OnceLock<WarmStart> = OnceLock::new();
    WARM.get_or_init(|| warm_start(&small_run_config()).unwrap())
}

#[test]
fn warm_up_beats_the_untrained_network() {
    let r = &warm().report;
    assert!(r.heldout_epe_pretrained < r.heldout_epe_untrained, "{r:?}");
    assert!(r.heldout_epe_warm < r.heldout_epe_untrained, "{r:?}");
}

#[test]
#[ignore = "known failure: the learned scene prior leaves 1-4 px mean disparity on identical views"]
fn identical_views_give_near_zero_disparity() {
    let cfg = small_run_config();
    let (pair, _) = synth_pair(
        &DomainSpec::new("c", CorruptionKind::Clean, 0.0, 1),
        &cfg.sequence.scene,
        999,
        cfg.seeds.source,
    )
    .unwrap();
    let same = StereoPair::new(pair.left.clone(), pair.left.clone(), 0).unwrap();
    let mean = warm().student.predict(&same).unwrap().data.mean();
    assert!(mean < 1.0, "mean disparity {mean}");
}

#[test]
fn phase_two_only_touches_moe_and_regression_parameters() {
    let w = warm();
    let peft = w.student.partition(PartitionMode::StudentPeft);
    for (name, p) in w.source.params() {
        if !peft.contains(name) {
            assert_eq!(&p.value, w.student.param(name).unwrap(), "{name}");
        }
    }
    assert_eq!(w.source.buffers(), w.student.buffers());
}

#[test]
fn no_adapt_summary_equals_plain_evaluation() {
    let mut cfg = small_run_config();
    cfg.sequence.rounds = 1;
    cfg.sequence.domains.truncate(1);
    cfg.optimizer.partition = PartitionMode::Frozen;
    let prepared = PreparedSequence::new(&cfg).unwrap();
    let out = run_prepared(&cfg, warm(), &prepared, |_, _| {}).unwrap();
    let frames: Vec<_> = prepared
        .frames
        .iter()
        .map(|f| (f.pair.clone(), f.gt.clone()))
        .collect();
    let expected = evaluate(&warm().student, &frames).unwrap();
    assert_eq!(out.summary.len(), 1);
    assert!((out.summary[0].epe.unwrap() - expected).abs() < 1e-12);
    let sums: Vec<_> = out.records.iter().map(|r| &r.student_checksum).collect();
    assert!(sums.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn metrics_are_taken_before_the_update() {
    let cfg = small_run_config();
    let prepared = PreparedSequence::new(&cfg).unwrap();
    let out = run_prepared(&cfg, warm(), &prepared, |_, _| {}).unwrap();
    let f = &prepared.frames[0];
    let before = global_metrics(&warm().student.predict(&f.pair).unwrap().data, &f.gt).unwrap();
    assert_eq!(out.records[0].epe, before.epe);
    assert_ne!(
        out.records[0].student_checksum,
        out.records[1].student_checksum
    );
}

#[test]
fn zero_lambda_with_no_valid_labels_leaves_the_student_unchanged() {
    let mut cfg = small_run_config();
    cfg.loss.lambda = 0.0;
    let mut prepared = PreparedSequence::new(&cfg).unwrap();
    for f in &mut prepared.frames {
        let n = f.proxy.masks.valid.len();
        f.proxy.masks = MaskPair::from_valid(vec![false; n], f.proxy.masks.epsilon);
    }
    let initial = format!("{:016x}", warm().student.checksum());
    let out = run_prepared(&cfg, warm(), &prepared, |_, _| {}).unwrap();
    assert!(out.records.iter().all(|r| r.student_checksum == initial));
}

#[test]
fn runs_are_deterministic() {
    let cfg = small_run_config();
    let prepared = PreparedSequence::new(&cfg).unwrap();
    let a = run_prepared(&cfg, warm(), &prepared, |_, _| {}).unwrap();
    let b = run_prepared(
        &cfg,
        warm(),
        &PreparedSequence::new(&cfg).unwrap(),
        |_, _| {},
    )
    .unwrap();
    assert_eq!(a.records.len(), b.records.len());
    assert!(a
        .records
        .iter()
        .zip(&b.records)
        .all(|(x, y)| x.same_outcome(y)));
}

#[test]
fn summary_cells_are_means_of_their_records() {
    let cfg = small_run_config();
    let out = run_prepared(
        &cfg,
        warm(),
        &PreparedSequence::new(&cfg).unwrap(),
        |_, _| {},
    )
    .unwrap();
    assert_eq!(
        out.summary.len(),
        cfg.sequence.rounds * cfg.sequence.domains.len()
    );
    for row in &out.summary {
        let cell: Vec<_> = out
            .records
            .iter()
            .filter(|r| r.round == row.round && r.domain == row.domain)
            .collect();
        assert_eq!(cell.len(), row.frames);
        assert_eq!(row.epe, mean_defined(cell.iter().map(|r| r.epe)));
        assert_eq!(
            row.d1_invalid,
            mean_defined(cell.iter().map(|r| r.d1_invalid))
        );
    }
}

#[test]
fn alternative_supervision_modes_run() {
    let base = small_run_config();
    let prepared = PreparedSequence::new(&base).unwrap();
    let variants: Vec<RunConfig> = vec![
        {
            let mut c = base.clone();
            c.loss.photometric = true;
            c
        },
        {
            let mut c = base.clone();
            c.teacher.mode = TeacherMode::Ema;
            c
        },
        {
            let mut c = base.clone();
            c.teacher.mode = TeacherMode::SourceFrozen;
            c
        },
        {
            let mut c = base.clone();
            c.teacher.update_after_student = false;
            c
        },
    ];
    for cfg in variants {
        let out = run_prepared(&cfg, warm(), &prepared, |_, _| {}).unwrap();
        let first = &out.records[0].student_checksum;
        assert!(
            out.records.iter().any(|r| &r.student_checksum != first),
            "{:?}",
            cfg.teacher
        );
        assert!(out.records.iter().all(|r| r.epe.unwrap().is_finite()));
    }
}

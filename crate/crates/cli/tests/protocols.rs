//! Desk-scale fixtures of the full training protocols on the blobs preset.

use std::sync::OnceLock;

use dckd_cli::commands::{run_compare, CompareReport};
use dckd_cli::config::{Arm, ExperimentConfig};
use dckd_core::data::{gen_blobs, OVERLAPPING_PAIRS};
use dckd_core::losses::LossWeights;
use dckd_core::metrics;
use dckd_core::trainer::{train_students, DistillConfig};

/// Observed validation top-1 of the preset teacher (seed 7); see the README
/// for why this sits below the ceiling the generator allows.
const TEACHER_TOP1_SEED7: f64 = 0.56;
const FIXTURE_TOL: f64 = 0.02;

fn preset() -> &'static CompareReport {
    static REPORT: OnceLock<CompareReport> = OnceLock::new();
    REPORT.get_or_init(|| run_compare(&ExperimentConfig::default()).unwrap())
}

#[test]
fn teacher_fixture() {
    let t = preset().seeds[0].teacher.as_ref().unwrap();
    assert_eq!(preset().seeds[0].seed, 7);
    assert!((t.top1 - TEACHER_TOP1_SEED7).abs() <= FIXTURE_TOL, "{}", t.top1);
}

#[test]
fn linear_probe_is_imperfect() {
    let (train, val) = gen_blobs(10, 200, 2, 0.4, 7).unwrap().split(0.2, 7).unwrap();
    let cfg = DistillConfig { weights: LossWeights::cross_entropy_only(), epochs: 30, ..Default::default() };
    let (probe, _) = train_students(None, &[2, 10], &[7], &cfg, &train, &val, "probe").unwrap();
    let (top1, _) = metrics::evaluate(&probe[0], &val).unwrap();
    assert!(top1 < 1.0);
    assert!(top1 <= preset().seeds[0].teacher.as_ref().unwrap().top1 + FIXTURE_TOL);
}

#[test]
fn edckd_net1_tracks_dckd_net1() {
    for s in &preset().seeds {
        let d = s.arm(Arm::Dckd).unwrap().net1_top1();
        let e = s.arm(Arm::Edckd).unwrap().net1_top1();
        assert!((d - e).abs() <= FIXTURE_TOL, "seed {}: {d} vs {e}", s.seed);
    }
}

#[test]
fn ensembled_student_matches_ce_baseline() {
    let wins = preset()
        .seeds
        .iter()
        .filter(|s| s.arm(Arm::Ensembled).unwrap().mean_top1() >= s.arm(Arm::BaselineCe).unwrap().mean_top1())
        .count();
    assert!(wins >= 2, "{wins}/3");
}

#[test]
fn dckd_students_match_ce_baseline() {
    let wins = preset()
        .seeds
        .iter()
        .filter(|s| s.arm(Arm::Dckd).unwrap().mean_top1() >= s.arm(Arm::BaselineCe).unwrap().mean_top1())
        .count();
    assert!(wins >= 2, "{wins}/3");
}

#[test]
fn overlapping_pair_shows_secondary_peak() {
    use dckd_core::models::{Checkpoint, Model};
    let s = &preset().seeds[0];
    let (_, val) = gen_blobs(10, 200, 2, 0.4, s.seed).unwrap().split(0.2, s.seed).unwrap();
    let net1 = &s.arm(Arm::Dckd).unwrap().checkpoints[0];
    let model = Model::from_checkpoint(&Checkpoint::from_bytes(net1).unwrap()).unwrap();
    for (a, b) in OVERLAPPING_PAIRS {
        let profile = metrics::class_accumulation(&model, &val, a, 4.0).unwrap();
        assert!(profile.profile[b] > 0.1, "class {a}: p[{b}] = {}", profile.profile[b]);
        assert!(profile.secondary_peaks(0.1).contains(&b));
    }
}

//! Training loop behaviour on small synthetic cohorts.

mod common;

use common::*;
use progsiam::cohort::{label_cohort, split_participants, SplitConfig, TripletManifest};
use progsiam::encoder::EncoderParams;
use progsiam::eval::{self, BinSource};
use progsiam::synth::{self, SynthConfig};
use progsiam::train::{train_run, RunLog, TrainConfig};
use progsiam::volume::VolumeSet;
use progsiam::LossKind;

fn setup(cfg: &SynthConfig) -> (TripletManifest, TripletManifest, VolumeSet) {
    let (records, vols) = synth::render_cohort(cfg).unwrap();
    let (neg, ad) = label_cohort(&records).unwrap().partition();
    let (train, test) = split_participants(&neg, &ad, &SplitConfig::default()).unwrap();
    (train, test, vols)
}

fn short(kind: LossKind, epochs: usize) -> TrainConfig {
    TrainConfig { loss_kind: kind, epochs, ..Default::default() }
}

#[test]
fn unit_alpha_weighted_run_equals_unweighted_bitwise() {
    // Only 0.9 negatives, so every alpha is 1.0.
    let cfg = SynthConfig { level_quotas: quotas(&[(9, 8), (10, 8)]), ..small_synth(0.2) };
    let (train, test, vols) = setup(&cfg);
    assert!(train.triplets.iter().all(|t| t.alpha.value() == 1.0));
    let enc = small_encoder();
    let (pw, lw) = train_run(&train, &test, &vols, &enc, &short(LossKind::Weighted, 5), 3).unwrap();
    let (pu, lu) = train_run(&train, &test, &vols, &enc, &short(LossKind::Unweighted, 5), 3).unwrap();
    assert_eq!(pw.to_bytes().unwrap(), pu.to_bytes().unwrap());
    for (a, b) in lw.epochs.iter().zip(&lu.epochs) {
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        assert_eq!(a.test_loss.to_bits(), b.test_loss.to_bits());
    }
}

#[test]
fn runs_are_reproducible() {
    let (train, test, vols) = setup(&small_synth(0.2));
    let enc = small_encoder();
    let cfg = short(LossKind::Weighted, 4);
    let (p1, l1) = train_run(&train, &test, &vols, &enc, &cfg, 11).unwrap();
    let (p2, l2) = train_run(&train, &test, &vols, &enc, &cfg, 11).unwrap();
    assert_eq!(p1.to_bytes().unwrap(), p2.to_bytes().unwrap());
    assert_eq!(l1.epochs, l2.epochs);
    let (p3, _) = train_run(&train, &test, &vols, &enc, &cfg, 12).unwrap();
    assert_ne!(p1, p3);
}

#[test]
fn noise_free_training_reduces_loss() {
    let (train, test, vols) = setup(&small_synth(0.0));
    let (params, log) = train_run(&train, &test, &vols, &small_encoder(), &short(LossKind::Weighted, 150), 1).unwrap();
    assert_eq!(log.epochs.len(), 150);
    let first = log.epochs[0].train_loss;
    let last = log.epochs[149].train_loss;
    assert!(last < 0.5 * first, "train loss {first} -> {last}");
    assert!(log.epochs.windows(2).all(|w| w[1].lr < w[0].lr));
    // The trained encoder orders the training negatives well enough to beat chance.
    let rep = eval::evaluate(&params, &train, &vols, &BinSource::Fit).unwrap();
    assert!(rep.mae < 1.5, "train mae {}", rep.mae);
}

#[test]
fn log_files_round_trip() {
    let (train, test, vols) = setup(&small_synth(0.2));
    let (_, log) = train_run(&train, &test, &vols, &small_encoder(), &short(LossKind::Unweighted, 3), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    log.write_csv(&dir.path().join("log.csv")).unwrap();
    log.write_summary(&dir.path().join("summary.json")).unwrap();
    assert_eq!(RunLog::read_csv(&dir.path().join("log.csv")).unwrap(), log.epochs);
    let text = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert!(text.starts_with("epoch,train_loss,test_loss,lr\n0,"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 3);
    assert!(summary.get("wall_time_secs").is_none());
}

#[test]
fn missing_volume_is_reported_before_training() {
    let (train, test, vols) = setup(&small_synth(0.2));
    let partial: VolumeSet = train
        .scan_refs()
        .into_iter()
        .map(|r| (r.to_string(), vols.get(r).unwrap().clone()))
        .collect();
    let err = train_run(&train, &test, &partial, &small_encoder(), &short(LossKind::Weighted, 1), 1).unwrap_err();
    assert!(matches!(err, progsiam::Error::UnknownScan(_)));
}

#[test]
fn checkpoint_reloads_to_identical_embeddings() {
    let (train, test, vols) = setup(&small_synth(0.2));
    let (params, _) = train_run(&train, &test, &vols, &small_encoder(), &short(LossKind::Weighted, 2), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    params.save(&path).unwrap();
    let back = EncoderParams::load(&path).unwrap();
    let a = eval::negative_distances(&params, &test, &vols).unwrap();
    let b = eval::negative_distances(&back, &test, &vols).unwrap();
    assert_eq!(a, b);
}

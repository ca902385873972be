use std::ffi::{CStr, CString};
use std::ptr;

use miat::harness::checkpoint::Checkpoint;
use miat::harness::config::RunConfig;
use miat::harness::train::TrainState;
use miat::params::ParamStore;
use miat::tensor::Tensor;
use miat_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(miat_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn param_counts_match_core() {
    let mut n = 0u64;
    assert_eq!(
        unsafe { miat_param_count(MiatLayerKind::Ltmi, 3, 512, 1, &mut n) },
        MiatStatus::Ok
    );
    assert_eq!(n, 2_366_976);
    assert_eq!(
        unsafe { miat_param_count(MiatLayerKind::Naive, 3, 512, 1, &mut n) },
        MiatStatus::Ok
    );
    assert_eq!(n, 28_353_024);
    assert_eq!(
        unsafe { miat_param_count(MiatLayerKind::Ltmi, 1, 2, 1, &mut n) },
        MiatStatus::Ok
    );
    assert_eq!(n, 14);
}

#[test]
fn errors_set_status_and_message() {
    let mut n = 0u64;
    assert_eq!(
        unsafe { miat_param_count(MiatLayerKind::Ltmi, 0, 4, 1, &mut n) },
        MiatStatus::Usage
    );
    assert!(last_error().contains("positive"));
    assert_eq!(
        unsafe { miat_param_count(MiatLayerKind::Ltmi, 1, 4, 1, ptr::null_mut()) },
        MiatStatus::NullPointer
    );
    assert!(last_error().contains("null"));
    assert_eq!(
        unsafe { miat_param_count(MiatLayerKind::Ltmi, 1, 4, 1, &mut n) },
        MiatStatus::Ok
    );
    assert_eq!(last_error(), "");
}

#[test]
fn schedule_values() {
    let mut lr = 0.0;
    for (epoch, want) in [(0.0, 1e-5), (1.0, 1e-3), (5.0, 2.5e-4)] {
        assert_eq!(
            unsafe { miat_schedule_lr(1e-5, 1e-3, 1.0, 2.0, epoch, &mut lr) },
            MiatStatus::Ok
        );
        assert!((lr - want).abs() < 1e-18);
    }
    assert_eq!(
        unsafe { miat_schedule_lr(1e-3, 1e-5, 1.0, 2.0, 0.0, &mut lr) },
        MiatStatus::Usage
    );
}

#[test]
fn ranking_metrics_through_abi() {
    let scores = [0.1, 0.9, 0.5, 0.3];
    let rel = [0.0, 1.0, 0.5, 0.0];
    let mut m = MiatRankingMetrics::default();
    let st = unsafe { miat_ranking_metrics(scores.as_ptr(), 4, 2, rel.as_ptr(), &mut m) };
    assert_eq!(st, MiatStatus::Ok);
    assert!(m.has_gold && m.has_ndcg);
    assert_eq!(m.rank, 2);
    assert_eq!(m.mrr, 0.5);
    assert_eq!((m.r_at_1, m.r_at_5), (0.0, 1.0));
    assert!((m.ndcg - 1.0).abs() < 1e-12);

    let st = unsafe { miat_ranking_metrics(scores.as_ptr(), 4, -1, ptr::null(), &mut m) };
    assert_eq!(st, MiatStatus::Usage);
    let st = unsafe { miat_ranking_metrics(scores.as_ptr(), 4, 9, ptr::null(), &mut m) };
    assert_eq!(st, MiatStatus::Data);
}

#[test]
fn box_loss_through_abi() {
    let b = [0.0, 0.0, 1.0, 1.0];
    let mut l = MiatBoxLoss::default();
    assert_eq!(
        unsafe { miat_box_loss(b.as_ptr(), b.as_ptr(), &mut l) },
        MiatStatus::Ok
    );
    assert!(l.total.abs() < 1e-15);
    let far = [2.0, 2.0, 3.0, 3.0];
    assert_eq!(
        unsafe { miat_box_loss(b.as_ptr(), far.as_ptr(), &mut l) },
        MiatStatus::Ok
    );
    assert!((l.l1 - 8.0).abs() < 1e-12);
    assert!((l.giou - (1.0 + 7.0 / 9.0)).abs() < 1e-12);
    let degenerate = [0.5, 0.5, 0.5, 1.0];
    assert_eq!(
        unsafe { miat_box_loss(b.as_ptr(), degenerate.as_ptr(), &mut l) },
        MiatStatus::Data
    );
}

#[test]
fn ltmi_handle_roundtrip() {
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { miat_ltmi_new(2, 4, 2, 1, 7, &mut h) },
        MiatStatus::Ok
    );
    let mut n = 0u64;
    assert_eq!(unsafe { miat_ltmi_param_count(h, &mut n) }, MiatStatus::Ok);
    let mut core = 0u64;
    unsafe { miat_param_count(MiatLayerKind::Ltmi, 2, 4, 1, &mut core) };
    assert_eq!(n, core);

    let a: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
    let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
    let mut oa = vec![0.0; 8];
    let mut ob = vec![0.0; 12];
    let ins = [a.as_ptr(), b.as_ptr()];
    let rows = [2usize, 3];
    let outs = [oa.as_mut_ptr(), ob.as_mut_ptr()];
    assert_eq!(
        unsafe { miat_ltmi_forward(h, ins.as_ptr(), rows.as_ptr(), outs.as_ptr()) },
        MiatStatus::Ok
    );
    assert!(oa.iter().chain(&ob).all(|v| v.is_finite()));
    // layer-normalised rows with unit gain and zero bias have zero mean
    for r in oa.chunks(4).chain(ob.chunks(4)) {
        assert!(r.iter().sum::<f64>().abs() < 1e-9);
    }
    let again = oa.clone();
    let outs = [oa.as_mut_ptr(), ob.as_mut_ptr()];
    unsafe { miat_ltmi_forward(h, ins.as_ptr(), rows.as_ptr(), outs.as_ptr()) };
    assert_eq!(oa, again);
    unsafe { miat_ltmi_free(h) };
    unsafe { miat_ltmi_free(ptr::null_mut()) };

    assert_eq!(
        unsafe { miat_ltmi_new(2, 6, 4, 1, 7, &mut h) },
        MiatStatus::Usage
    );
    assert!(h.is_null());
}

#[test]
fn checkpoint_handle_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let mut store = ParamStore::new();
    store.add("w", Tensor::row(&[1.0, -2.0, 3.5]));
    let state = TrainState::new(&store, &cfg);
    let src = dir.path().join("a.ckpt");
    Checkpoint::capture(&cfg, &store, &state)
        .save(&src)
        .unwrap();

    let path = CString::new(src.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(
        unsafe { miat_checkpoint_load(path.as_ptr(), &mut h) },
        MiatStatus::Ok
    );
    let (mut epoch, mut count) = (9u32, 0usize);
    unsafe {
        miat_checkpoint_epoch(h, &mut epoch);
        miat_checkpoint_tensor_count(h, &mut count);
    }
    assert_eq!((epoch, count), (0, 1));
    let dst = dir.path().join("b.ckpt");
    let dst_c = CString::new(dst.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { miat_checkpoint_save(h, dst_c.as_ptr()) },
        MiatStatus::Ok
    );
    unsafe { miat_checkpoint_free(h) };
    assert_eq!(std::fs::read(&src).unwrap(), std::fs::read(&dst).unwrap());

    std::fs::write(&dst, &std::fs::read(&src).unwrap()[..20]).unwrap();
    assert_eq!(
        unsafe { miat_checkpoint_load(dst_c.as_ptr(), &mut h) },
        MiatStatus::Data
    );
    assert!(h.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/miat.h")).unwrap();
    for f in [
        "miat_last_error",
        "miat_param_count",
        "miat_schedule_lr",
        "miat_ranking_metrics",
        "miat_box_loss",
        "miat_ltmi_new",
        "miat_ltmi_forward",
        "miat_ltmi_param_count",
        "miat_ltmi_free",
        "miat_checkpoint_load",
        "miat_checkpoint_save",
        "miat_checkpoint_epoch",
        "miat_checkpoint_tensor_count",
        "miat_checkpoint_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
}

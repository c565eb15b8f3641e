use std::ffi::CString;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use stale_lab::config::{ModelConfig, TrainConfig};
use stale_lab::datamodel::{make_splits, LabelSpace};
use stale_lab::synthdata::{gen_corpus, SynthConfig};
use stale_lab::trainer::{save_checkpoint, train, SetMode};
use stale_lab_ffi::*;

fn det(start: f64, end: f64, class_index: u32, confidence: f64) -> StaleDetection {
    StaleDetection {
        start,
        end,
        class_index,
        confidence,
        source_snippet: 0,
    }
}

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { stale_last_error(buf.as_mut_ptr().cast(), buf.len()) };
    buf.truncate(n.min(511));
    String::from_utf8(buf).unwrap()
}

/// Tiny trained checkpoint; returns (dir guard, manifest path, input dim, token dim).
fn checkpoint() -> (tempfile::TempDir, PathBuf) {
    let corpus = gen_corpus(&SynthConfig {
        n_classes: 4,
        videos_per_class: 2,
        t_raw: 16,
        feature_dim: 6,
        token_dim: 4,
        latent_dim: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let split = make_splits(&LabelSpace::new(corpus.classes.clone()).unwrap(), 0.5, 1, 0)
        .unwrap()
        .remove(0);
    let cfg = TrainConfig {
        epochs: 1,
        t_len: 8,
        model: ModelConfig {
            embed_dim: 8,
            heads: 2,
            encoder_layers: 1,
            context_len: 2,
            text_layers: 1,
            text_heads: 2,
            num_queries: 2,
            decoder_layers: 1,
            consistency_dim: 4,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let run = train::<f64>(&corpus, &split, SetMode::Open, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    save_checkpoint(&path, &run, &cfg).unwrap();
    (dir, path)
}

#[test]
fn tiou_and_soft_nms() {
    assert!((stale_tiou(0.0, 2.0 / 3.0, 1.0 / 3.0, 1.0) - 1.0 / 3.0).abs() < 1e-12);
    let input = [det(0.0, 0.5, 0, 0.9), det(0.0, 0.5, 0, 0.8)];
    let mut out = [det(0.0, 0.0, 0, 0.0); 2];
    let mut n = 0;
    let s = unsafe { stale_soft_nms(input.as_ptr(), 2, 0.5, 1e-4, 100, out.as_mut_ptr(), 2, &mut n) };
    assert_eq!(s, StaleStatus::Ok);
    assert_eq!(n, 2);
    assert!((out[1].confidence - 0.8 * (-2.0f64).exp()).abs() < 1e-12);
}

#[test]
fn soft_nms_reports_small_buffers() {
    let input = [det(0.0, 0.2, 0, 0.9), det(0.5, 0.7, 1, 0.8)];
    let mut out = [det(0.0, 0.0, 0, 0.0); 1];
    let mut n = 0;
    let s = unsafe { stale_soft_nms(input.as_ptr(), 2, 0.5, 1e-4, 100, out.as_mut_ptr(), 1, &mut n) };
    assert_eq!(s, StaleStatus::BufferTooSmall);
    assert_eq!(n, 2);
    assert!(last_error().contains("capacity"));
    let s = unsafe { stale_soft_nms(ptr::null(), 2, 0.5, 1e-4, 100, out.as_mut_ptr(), 1, &mut n) };
    assert_eq!(s, StaleStatus::NullPointer);
}

#[test]
fn average_precision_half() {
    let (dv, ds, de, sc) = ([0u32, 0], [0.6, 0.1], [0.9, 0.4], [0.9, 0.5]);
    let (gv, gs, ge) = ([0u32], [0.1], [0.4]);
    let mut ap = -1.0;
    let s = unsafe {
        stale_average_precision(
            dv.as_ptr(),
            ds.as_ptr(),
            de.as_ptr(),
            sc.as_ptr(),
            2,
            gv.as_ptr(),
            gs.as_ptr(),
            ge.as_ptr(),
            1,
            0.5,
            &mut ap,
        )
    };
    assert_eq!(s, StaleStatus::Ok);
    assert!((ap - 0.5).abs() < 1e-12);
}

#[test]
fn model_round_trip() {
    let (_dir, path) = checkpoint();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle: *mut StaleModel = ptr::null_mut();
    assert_eq!(
        unsafe { stale_model_load(c_path.as_ptr(), &mut handle) },
        StaleStatus::Ok
    );
    let (mut c_in, mut c_tok, mut t) = (0, 0, 0);
    assert_eq!(
        unsafe { stale_model_dims(handle, &mut c_in, &mut c_tok, &mut t) },
        StaleStatus::Ok
    );
    assert_eq!((c_in, c_tok, t), (6, 4, 8));

    let features: Vec<f64> = (0..c_in * t).map(|i| (i as f64 * 0.37).sin()).collect();
    let tokens: Vec<f64> = (0..2 * c_tok).map(|i| (i as f64 * 0.11).cos()).collect();
    let mut p = vec![0.0; 3 * t];
    let mut m = vec![0.0; t * t];
    let s = unsafe {
        stale_model_forward(
            handle,
            features.as_ptr(),
            t,
            tokens.as_ptr(),
            2,
            p.as_mut_ptr(),
            m.as_mut_ptr(),
        )
    };
    assert_eq!(s, StaleStatus::Ok);
    for j in 0..t {
        assert!((p[j] + p[t + j] + p[2 * t + j] - 1.0).abs() < 1e-9);
    }
    assert!(m.iter().all(|&x| x > 0.0 && x < 1.0));

    let mut dets = vec![det(0.0, 0.0, 0, 0.0); 200];
    let mut n = 0;
    let s = unsafe {
        stale_model_detect(
            handle,
            features.as_ptr(),
            t,
            tokens.as_ptr(),
            2,
            0.3,
            dets.as_mut_ptr(),
            200,
            &mut n,
        )
    };
    assert_eq!(s, StaleStatus::Ok);
    assert!(dets[..n].iter().all(|d| d.start < d.end && d.class_index < 2));
    unsafe { stale_model_free(handle) };
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let path = CString::new("/nonexistent/checkpoint.json").unwrap();
    let mut handle: *mut StaleModel = ptr::null_mut();
    assert_eq!(unsafe { stale_model_load(path.as_ptr(), &mut handle) }, StaleStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("/nonexistent"));
}

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = lib_dir.join("libstale_lab_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let out = tempfile::tempdir().unwrap();
    let bin = out.path().join("smoke");
    let status = Command::new("cc")
        .arg(crate_dir.join("tests/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let (_dir, ckpt) = checkpoint();
    let run = Command::new(&bin).arg(&ckpt).output().unwrap();
    assert!(run.status.success(), "smoke exited with {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}

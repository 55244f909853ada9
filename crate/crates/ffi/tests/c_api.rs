use std::ffi::{c_char, CStr, CString};
use std::ptr;

use affect_bnn::dataset::{generate_corpus, CorpusSpec, FRAME_SAMPLES};
use affect_bnn::losses;
use affect_bnn::model::{build_model, predict_distribution, Checkpoint, ConvSpec, ModelConfig, SystemKind};
use affect_bnn_ffi::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        conv: vec![
            ConvSpec { kernel: 3, channels: 4, pool: 8 },
            ConvSpec { kernel: 3, channels: 4, pool: 8 },
            ConvSpec { kernel: 2, channels: 4, pool: 10 },
        ],
        lstm_layers: 1,
        lstm_hidden: 8,
        head_hidden: vec![8],
        window_frames: 10,
        median_window: 5,
        ..ModelConfig::default()
    }
}

fn save(kind: SystemKind, dir: &std::path::Path) -> CString {
    let model = build_model(&tiny(), kind).unwrap();
    let ck = Checkpoint {
        adam: affect_bnn::model::Adam::new(&model.store, 1e-3),
        model,
        epoch: 0,
        best_loss: f64::INFINITY,
    };
    let path = dir.join(format!("{kind}.ckpt"));
    ck.save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe { abn_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn waveform() -> Vec<f32> {
    let spec = CorpusSpec { n_train: 1, n_dev: 1, duration_s: 2.0, ..CorpusSpec::default() };
    generate_corpus(&spec).unwrap().remove(0).waveform
}

#[test]
fn predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let wave = waveform();
    let frames = abn_frames_for_samples(wave.len());
    assert_eq!(frames, 50);
    for (kind, system) in [(SystemKind::Lu, AbnSystem::Lu), (SystemKind::Stl, AbnSystem::Stl)] {
        let path = save(kind, dir.path());
        let mut handle = ptr::null_mut();
        assert_eq!(unsafe { abn_model_load(path.as_ptr(), &mut handle) }, AbnStatus::Ok);
        let mut got = AbnSystem::Mu;
        assert_eq!(unsafe { abn_model_system(handle, &mut got) }, AbnStatus::Ok);
        assert_eq!(got, system);

        let (mut m, mut s, mut t) = (vec![0.0; frames], vec![0.0; frames], 0usize);
        let status = unsafe {
            abn_predict(handle, wave.as_ptr(), wave.len(), 6, 3, m.as_mut_ptr(), s.as_mut_ptr(), frames, &mut t)
        };
        assert_eq!(status, AbnStatus::Ok, "{}", last_error());
        assert_eq!(t, frames);
        let model = Checkpoint::load(std::path::Path::new(path.to_str().unwrap())).unwrap().model;
        let expected = predict_distribution(&model, &wave, 6, 3).unwrap();
        assert_eq!(m, expected.m_hat);
        match expected.s_hat {
            Some(e) => assert_eq!(s, e),
            None => assert!(s.iter().all(|v| v.is_nan())),
        }
        unsafe { abn_model_free(handle) };
    }
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut handle = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { abn_model_load(missing.as_ptr(), &mut handle) }, AbnStatus::Io);
    assert!(handle.is_null());

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { abn_model_load(junk.as_ptr(), &mut handle) }, AbnStatus::InvalidCheckpoint);
    assert!(!last_error().is_empty());

    let path = save(SystemKind::Mu, dir.path());
    assert_eq!(unsafe { abn_model_load(path.as_ptr(), &mut handle) }, AbnStatus::Ok);
    let wave = vec![0.0f32; 3 * FRAME_SAMPLES];
    let (mut m, mut t) = (vec![0.0; 3], 0usize);
    let predict = |samples: usize, passes: usize, cap: usize, m: &mut [f64], t: &mut usize| unsafe {
        abn_predict(handle, wave.as_ptr(), samples, passes, 0, m.as_mut_ptr(), ptr::null_mut(), cap, t)
    };
    assert_eq!(predict(wave.len() - 1, 4, 3, &mut m, &mut t), AbnStatus::InvalidArgument);
    assert_eq!(predict(wave.len(), 4, 2, &mut m, &mut t), AbnStatus::BufferTooSmall);
    assert_eq!(t, 3);
    assert_eq!(predict(wave.len(), 1, 3, &mut m, &mut t), AbnStatus::InvalidArgument);
    assert_eq!(predict(wave.len(), 2, 3, &mut m, &mut t), AbnStatus::Ok);
    unsafe { abn_model_free(handle) };
    unsafe { abn_model_free(ptr::null_mut()) };
}

#[test]
fn metrics_match_the_library() {
    let x = [0.1, 0.4, -0.2, 0.3, 0.0];
    let y = [0.0, 0.5, -0.1, 0.2, 0.1];
    let s = [0.2, 0.1, 0.3, 0.25, 0.05];
    let mut out = 0.0;
    assert_eq!(unsafe { abn_ccc(x.as_ptr(), y.as_ptr(), x.len(), &mut out) }, AbnStatus::Ok);
    assert_eq!(out, losses::ccc(&x, &y).unwrap());
    assert_eq!(unsafe { abn_gaussian_kl(0.0, 1.0, 1.0, 2.0, &mut out) }, AbnStatus::Ok);
    assert_eq!(out, losses::gaussian_kl(0.0, 1.0, 1.0, 2.0).unwrap());
    assert_eq!(
        unsafe { abn_kl_metric(x.as_ptr(), s.as_ptr(), y.as_ptr(), s.as_ptr(), x.len(), &mut out) },
        AbnStatus::Ok
    );
    assert_eq!(out, losses::kl_metric(&x, &s, &y, &s).unwrap());
    let mut filtered = [0.0; 5];
    assert_eq!(unsafe { abn_median_filter(x.as_ptr(), x.len(), 3, filtered.as_mut_ptr()) }, AbnStatus::Ok);
    assert_eq!(filtered.to_vec(), losses::median_filter(&x, 3).unwrap());
    assert_eq!(
        unsafe { abn_gaussian_kl(0.0, 0.0, 0.0, 1.0, &mut out) },
        AbnStatus::InvalidArgument
    );
    assert_eq!(unsafe { abn_median_filter(x.as_ptr(), x.len(), 0, filtered.as_mut_ptr()) }, AbnStatus::InvalidArgument);
}

#[test]
fn header_declares_every_entry_point() {
    let header = include_str!("../include/affect_bnn.h");
    for name in [
        "abn_last_error",
        "abn_model_load",
        "abn_model_free",
        "abn_model_system",
        "abn_frames_for_samples",
        "abn_predict",
        "abn_ccc",
        "abn_gaussian_kl",
        "abn_kl_metric",
        "abn_median_filter",
        "typedef struct AbnModel AbnModel",
        "ABN_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

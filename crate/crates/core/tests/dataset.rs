use affect_bnn::dataset::{
    corpus_stats, frame_waveform, generate_corpus, load_corpus, load_wav, save_corpus, synthesize_recording, write_wav,
    CorpusSpec, DatasetError, Split, FRAME_SAMPLES,
};
use affect_bnn::losses::ccc;
use proptest::prelude::*;

fn desk_spec() -> CorpusSpec {
    CorpusSpec {
        duration_s: 30.0,
        ..CorpusSpec::default()
    }
}

#[test]
fn default_corpus_matches_target_statistics() {
    let corpus = generate_corpus(&CorpusSpec::default()).unwrap();
    assert_eq!(corpus.len(), 18);
    assert!(corpus.iter().all(|r| r.frames() == 7500));
    let stats = corpus_stats(&corpus);
    assert!((stats.mean_of_m - 0.01).abs() <= 0.05, "{stats:?}");
    assert!((stats.mean_of_s - 0.23).abs() <= 0.05, "{stats:?}");
}

#[test]
fn generation_is_deterministic() {
    let spec = CorpusSpec {
        n_train: 2,
        n_dev: 2,
        duration_s: 4.0,
        ..CorpusSpec::default()
    };
    assert_eq!(generate_corpus(&spec).unwrap(), generate_corpus(&spec).unwrap());
    let other = CorpusSpec { seed: 8, ..spec.clone() };
    assert_ne!(generate_corpus(&spec).unwrap(), generate_corpus(&other).unwrap());
}

#[test]
fn mean_annotation_follows_latent() {
    let spec = desk_spec();
    for split in [Split::Train, Split::Dev] {
        for i in 0..spec.n_train {
            let synth = synthesize_recording(&spec, split, i).unwrap();
            let label = synth.recording.trace.label_distribution();
            let c = ccc(&synth.latent, &label.m).unwrap();
            assert!(c > 0.8, "{} ccc {c}", synth.recording.id);
            assert!(label.s.iter().all(|&s| s >= 0.0));
        }
    }
}

#[test]
fn splits_are_disjoint() {
    let corpus = generate_corpus(&desk_spec()).unwrap();
    let train: Vec<_> = corpus.iter().filter(|r| r.split == Split::Train).map(|r| &r.id).collect();
    assert!(corpus.iter().filter(|r| r.split == Split::Dev).all(|r| !train.contains(&&r.id)));
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        n_train: 2,
        n_dev: 1,
        duration_s: 2.0,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    save_corpus(dir.path(), &corpus).unwrap();
    assert_eq!(load_corpus(dir.path(), None).unwrap(), corpus);
    let dev = load_corpus(dir.path(), Some(Split::Dev)).unwrap();
    assert_eq!(dev.len(), 1);
    assert_eq!(dev[0].id, "dev_01");
}

fn write_spec(path: &std::path::Path, spec: hound::WavSpec, samples: &[i16]) {
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

fn pcm16(channels: u16, rate: u32) -> hound::WavSpec {
    hound::WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

#[test]
fn pcm16_is_scaled() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.wav");
    write_spec(&p, pcm16(1, 16_000), &[32767, -32768, 0]);
    let w = load_wav(&p).unwrap();
    assert!((w[0] as f64 - 32767.0 / 32768.0).abs() < 1e-7);
    assert_eq!(w[1], -1.0);
    assert_eq!(w[2], 0.0);
}

#[test]
fn wav_errors_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let stereo = dir.path().join("s.wav");
    write_spec(&stereo, pcm16(2, 16_000), &[0, 0]);
    assert!(matches!(load_wav(&stereo), Err(DatasetError::ChannelCount { channels: 2, .. })));

    let cd = dir.path().join("cd.wav");
    write_spec(&cd, pcm16(1, 44_100), &[0]);
    assert!(matches!(load_wav(&cd), Err(DatasetError::SampleRate { rate: 44_100, .. })));

    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"RIFF0000WAVEnotreally").unwrap();
    assert!(matches!(load_wav(&junk), Err(DatasetError::MalformedHeader { .. })));
}

#[test]
fn float_wav_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.wav");
    let data = vec![0.25f32, -0.5, 0.999];
    write_wav(&p, &data).unwrap();
    assert_eq!(load_wav(&p).unwrap(), data);
}

proptest! {
    #[test]
    fn framing_then_concatenation_restores_padded_waveform(samples in prop::collection::vec(-1.0f32..1.0, 1..3000)) {
        let frames = frame_waveform(&samples).unwrap();
        prop_assert_eq!(frames.len(), samples.len().div_ceil(FRAME_SAMPLES));
        let joined: Vec<f32> = frames.concat();
        let mut padded = samples.clone();
        padded.resize(frames.len() * FRAME_SAMPLES, 0.0);
        prop_assert_eq!(joined, padded);
    }
}

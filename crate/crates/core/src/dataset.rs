//! Synthetic arousal corpus, raw-audio framing and WAV/manifest I/O.
//!
//! Each synthetic recording starts from a slowly varying latent arousal
//! trace. Six (by default) simulated annotators follow it with their own lag,
//! bias and noise, where the noise level grows with arousal so that the
//! perception uncertainty is partly predictable from the audio. The audio is
//! a harmonic-plus-noise signal whose pitch, loudness and syllabic
//! modulation track the latent trace.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{self, AnnotationTrace, LabelError, FRAME_PERIOD_S};
use crate::seeds::{derive_seed, stream};

pub const SAMPLE_RATE: u32 = 16_000;
/// Audio samples per annotation frame (40 ms at 16 kHz).
pub const FRAME_SAMPLES: usize = 640;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const MAX_LAG_FRAMES: usize = 25;
const NOISE_TIME_CONSTANT_FRAMES: f64 = 25.0;
const AMBIGUITY_GAIN: f64 = 1.2;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("waveform is empty")]
    EmptyWaveform,
    #[error("{path}: expected a mono file, found {channels} channels")]
    ChannelCount { path: String, channels: u16 },
    #[error("{path}: expected {SAMPLE_RATE} Hz, found {rate} Hz")]
    SampleRate { path: String, rate: u32 },
    #[error("{path}: unsupported sample format ({detail})")]
    SampleFormat { path: String, detail: String },
    #[error("{path}: malformed WAV header: {detail}")]
    MalformedHeader { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("recording {id}: audio has {audio} frames but annotations have {labels}")]
    FrameMismatch { id: String, audio: usize, labels: usize },
    #[error("recording id {0} appears more than once")]
    DuplicateId(String),
    #[error(transparent)]
    Label(#[from] LabelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            other => Err(format!("unknown split '{other}' (expected train or dev)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub duration_s: f64,
    pub annotators: usize,
    pub seed: u64,
    pub target_mean_of_m: f64,
    pub target_mean_of_s: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_train: 9,
            n_dev: 9,
            duration_s: 300.0,
            annotators: 6,
            seed: 7,
            target_mean_of_m: 0.01,
            target_mean_of_s: 0.23,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidSpec(m.to_string()));
        if self.n_train == 0 || self.n_dev == 0 {
            return bad("n_train and n_dev must be positive");
        }
        if self.annotators < 2 {
            return bad("at least 2 annotators are needed");
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return bad("duration_s must be positive");
        }
        let frames = (self.duration_s / FRAME_PERIOD_S).round();
        if frames < 1.0 || (frames * FRAME_PERIOD_S - self.duration_s).abs() > 1e-9 {
            return bad("duration_s must be a positive multiple of 0.04 s");
        }
        if !(self.target_mean_of_m.abs() < 0.5) {
            return bad("target_mean_of_m must lie in (-0.5, 0.5)");
        }
        if !(self.target_mean_of_s > 0.0 && self.target_mean_of_s < 0.6) {
            return bad("target_mean_of_s must lie in (0, 0.6)");
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration_s / FRAME_PERIOD_S).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub id: String,
    pub split: Split,
    /// Seed the recording was synthesized from (0 for external data).
    pub seed: u64,
    /// Mono samples in [-1, 1] at 16 kHz; length is a multiple of 640.
    pub waveform: Vec<f32>,
    pub trace: AnnotationTrace,
}

impl Recording {
    pub fn frames(&self) -> usize {
        self.trace.frames()
    }
}

/// A generated recording together with the latent trace it was built from.
#[derive(Clone, Debug)]
pub struct SyntheticRecording {
    pub recording: Recording,
    pub latent: Vec<f64>,
}

pub fn recording_id(split: Split, index: usize) -> String {
    format!("{}_{:02}", split, index + 1)
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Recording>, DatasetError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_train + spec.n_dev);
    for (split, count) in [(Split::Train, spec.n_train), (Split::Dev, spec.n_dev)] {
        for i in 0..count {
            out.push(synthesize_recording(spec, split, i)?.recording);
        }
    }
    Ok(out)
}

pub fn synthesize_recording(spec: &CorpusSpec, split: Split, index: usize) -> Result<SyntheticRecording, DatasetError> {
    spec.validate()?;
    let stream = match split {
        Split::Train => stream::TRAIN_RECORDING,
        Split::Dev => stream::DEV_RECORDING,
    };
    let seed = derive_seed(spec.seed, stream, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = spec.frames();
    let latent = latent_arousal(&mut rng, frames, spec.target_mean_of_m);
    let rows = annotate(&mut rng, &latent, spec.annotators, spec.target_mean_of_s);
    let id = recording_id(split, index);
    let trace = AnnotationTrace::new(id.clone(), &rows)?;
    let waveform = synthesize_audio(&mut rng, &latent);
    Ok(SyntheticRecording {
        recording: Recording {
            id,
            split,
            seed,
            waveform,
            trace,
        },
        latent,
    })
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Stationary unit-variance AR(1) sequence with coefficient `phi`.
fn ar1<R: Rng + ?Sized>(rng: &mut R, len: usize, phi: f64) -> Vec<f64> {
    let innovation = (1.0 - phi * phi).sqrt();
    let mut x = normal(rng);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(x);
        x = phi * x + innovation * normal(rng);
    }
    out
}

fn latent_arousal<R: Rng + ?Sized>(rng: &mut R, frames: usize, target_mean: f64) -> Vec<f64> {
    let components = rng.random_range(3..=6);
    let waves: Vec<(f64, f64, f64)> = (0..components)
        .map(|_| {
            (
                rng.random_range(0.02..0.1),
                rng.random_range(0.3..1.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let power: f64 = waves.iter().map(|w| w.1 * w.1 / 2.0).sum();
    let drift = ar1(rng, frames, 0.995);
    let mut z: Vec<f64> = (0..frames)
        .map(|t| {
            let time = t as f64 * FRAME_PERIOD_S;
            let periodic: f64 = waves.iter().map(|&(f, a, p)| a * (2.0 * PI * f * time + p).sin()).sum();
            periodic / power.sqrt() + 0.3 * drift[t]
        })
        .collect();
    // short recordings may cover only part of a cycle; rescale so every
    // recording spans a comparable arousal range
    let mean = z.iter().sum::<f64>() / frames as f64;
    let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / frames as f64).sqrt();
    for v in z.iter_mut() {
        *v = 0.55 * ((*v - mean) / std.max(1e-6)).tanh();
    }
    let shift = target_mean - z.iter().sum::<f64>() / frames as f64;
    z.iter_mut().for_each(|v| *v += shift);
    z
}

/// Annotator rows `[frames][annotators]`, with the spread calibrated so the
/// recording's mean perception uncertainty is close to `target_s`.
fn annotate<R: Rng + ?Sized>(rng: &mut R, latent: &[f64], annotators: usize, target_s: f64) -> Vec<Vec<f64>> {
    let frames = latent.len();
    let lags: Vec<usize> = (0..annotators).map(|_| rng.random_range(0..=MAX_LAG_FRAMES)).collect();
    let mut biases: Vec<f64> = (0..annotators).map(|_| 0.3 * normal(rng)).collect();
    let bias_mean = biases.iter().sum::<f64>() / annotators as f64;
    biases.iter_mut().for_each(|b| *b -= bias_mean);
    let phi = (-1.0 / NOISE_TIME_CONSTANT_FRAMES).exp();
    let noise: Vec<Vec<f64>> = (0..annotators).map(|_| ar1(rng, frames, phi)).collect();
    let ambiguity: Vec<f64> = latent.iter().map(|&l| (AMBIGUITY_GAIN * l).exp()).collect();

    let build = |k: f64| -> Vec<Vec<f64>> {
        (0..frames)
            .map(|t| {
                (0..annotators)
                    .map(|j| {
                        let followed = latent[t.saturating_sub(lags[j])];
                        (followed + k * (biases[j] + ambiguity[t] * noise[j][t])).clamp(-1.0, 1.0)
                    })
                    .collect()
            })
            .collect()
    };
    let mean_s = |rows: &[Vec<f64>]| -> f64 {
        rows.iter()
            .map(|r| labels::unbiased_std(r).unwrap_or(0.0))
            .sum::<f64>()
            / frames as f64
    };

    let (mut lo, mut hi) = (0.0, 2.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if mean_s(&build(mid)) < target_s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    build(0.5 * (lo + hi))
}

fn synthesize_audio<R: Rng + ?Sized>(rng: &mut R, latent: &[f64]) -> Vec<f32> {
    let dt = 1.0 / SAMPLE_RATE as f64;
    let harmonic_norm: f64 = (1..=4).map(|h| 1.0 / h as f64).sum();
    let mut pitch_phase = 0.0f64;
    let mut syllable_phase = rng.random_range(0.0..2.0 * PI);
    let mut out = Vec::with_capacity(latent.len() * FRAME_SAMPLES);
    for t in 0..latent.len() {
        let next = latent.get(t + 1).copied().unwrap_or(latent[t]);
        for i in 0..FRAME_SAMPLES {
            let frac = i as f64 / FRAME_SAMPLES as f64;
            let a = ((latent[t] * (1.0 - frac) + next * frac + 1.0) / 2.0).clamp(0.0, 1.0);
            let f0 = 100.0 + 150.0 * a;
            pitch_phase = (pitch_phase + 2.0 * PI * f0 * dt) % (2.0 * PI);
            syllable_phase = (syllable_phase + 2.0 * PI * (2.0 + 4.0 * a) * dt) % (2.0 * PI);
            let harmonics: f64 = (1..=4).map(|h| (h as f64 * pitch_phase).sin() / h as f64).sum::<f64>() / harmonic_norm;
            let depth = 0.2 + 0.8 * a;
            let envelope = 1.0 - depth * (0.5 + 0.5 * syllable_phase.sin());
            let amplitude = 0.1 + 0.6 * a;
            let noise = (0.02 + 0.1 * a) * normal(rng);
            out.push((amplitude * envelope * harmonics + noise).clamp(-1.0, 1.0) as f32);
        }
    }
    out
}

/// Splits a waveform into non-overlapping 640-sample frames, zero-padding
/// (with a warning) when the length is not a multiple of the frame size.
pub fn frame_waveform(waveform: &[f32]) -> Result<Vec<Vec<f32>>, DatasetError> {
    if waveform.is_empty() {
        return Err(DatasetError::EmptyWaveform);
    }
    let rem = waveform.len() % FRAME_SAMPLES;
    if rem != 0 {
        log::warn!(
            "waveform length {} is not a multiple of {FRAME_SAMPLES}; padding {} zeros",
            waveform.len(),
            FRAME_SAMPLES - rem
        );
    }
    Ok(waveform
        .chunks(FRAME_SAMPLES)
        .map(|c| {
            let mut frame = c.to_vec();
            frame.resize(FRAME_SAMPLES, 0.0);
            frame
        })
        .collect())
}

pub fn write_wav(path: &Path, waveform: &[f32]) -> Result<(), DatasetError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wrap = |e: hound::Error| wav_error(path, e);
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in waveform {
        writer.write_sample(s).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

fn wav_error(path: &Path, e: hound::Error) -> DatasetError {
    let path_s = path.display().to_string();
    match e {
        hound::Error::IoError(source) => DatasetError::Io { path: path_s, source },
        hound::Error::Unsupported => DatasetError::SampleFormat {
            path: path_s,
            detail: "unsupported encoding".into(),
        },
        other => DatasetError::MalformedHeader {
            path: path_s,
            detail: other.to_string(),
        },
    }
}

/// Reads a mono 16 kHz WAV file (PCM16 or float32) into samples in [-1, 1].
pub fn load_wav(path: &Path) -> Result<Vec<f32>, DatasetError> {
    let path_s = || path.display().to_string();
    let file = fs::File::open(path).map_err(io_err(path))?;
    // the file is readable, so any failure while parsing the header is a format problem
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(|e| match e {
        hound::Error::IoError(source) => DatasetError::MalformedHeader {
            path: path_s(),
            detail: source.to_string(),
        },
        other => wav_error(path, other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DatasetError::ChannelCount {
            path: path_s(),
            channels: spec.channels,
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(DatasetError::SampleRate {
            path: path_s(),
            rate: spec.sample_rate,
        });
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0).map_err(|e| wav_error(path, e)))
            .collect(),
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map_err(|e| wav_error(path, e)))
            .collect(),
        (format, bits) => Err(DatasetError::SampleFormat {
            path: path_s(),
            detail: format!("{bits}-bit {format:?}"),
        }),
    }
}

/// One line of `manifest.jsonl`. Paths are relative to the corpus directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub wav: PathBuf,
    pub csv: PathBuf,
    pub seed: u64,
}

/// Writes `wav/<id>.wav`, `csv/<id>.csv` and the manifest under `dir`.
pub fn save_corpus(dir: &Path, recordings: &[Recording]) -> Result<(), DatasetError> {
    for sub in ["wav", "csv"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut manifest = String::new();
    for r in recordings {
        let entry = ManifestEntry {
            id: r.id.clone(),
            split: r.split,
            wav: PathBuf::from("wav").join(format!("{}.wav", r.id)),
            csv: PathBuf::from("csv").join(format!("{}.csv", r.id)),
            seed: r.seed,
        };
        write_wav(&dir.join(&entry.wav), &r.waveform)?;
        labels::write_annotation_csv(&r.trace, &dir.join(&entry.csv))?;
        manifest.push_str(&serde_json::to_string(&entry).expect("manifest entry serializes"));
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(manifest.as_bytes()).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let path = dir.join(MANIFEST_FILE);
    let f = fs::File::open(&path).map_err(io_err(&path))?;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| DatasetError::Manifest {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if entries.iter().any(|e| e.id == entry.id) {
            return Err(DatasetError::DuplicateId(entry.id));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads every recording listed in the manifest, optionally restricted to
/// one split. Waveforms are padded to whole frames and must match the
/// annotation frame count.
pub fn load_corpus(dir: &Path, split: Option<Split>) -> Result<Vec<Recording>, DatasetError> {
    let mut out = Vec::new();
    for entry in read_manifest(dir)? {
        if split.is_some_and(|s| s != entry.split) {
            continue;
        }
        let mut waveform = load_wav(&dir.join(&entry.wav))?;
        let trace_raw = labels::load_annotation_csv(&dir.join(&entry.csv))?;
        let rows: Vec<Vec<f64>> = trace_raw.rows().map(|r| r.to_vec()).collect();
        let trace = AnnotationTrace::new(entry.id.clone(), &rows)?;
        let audio_frames = frame_waveform(&waveform)?.len();
        if audio_frames != trace.frames() {
            return Err(DatasetError::FrameMismatch {
                id: entry.id,
                audio: audio_frames,
                labels: trace.frames(),
            });
        }
        waveform.resize(audio_frames * FRAME_SAMPLES, 0.0);
        out.push(Recording {
            id: entry.id,
            split: entry.split,
            seed: entry.seed,
            waveform,
            trace,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub recordings: usize,
    pub frames: usize,
    pub mean_of_m: f64,
    pub mean_of_s: f64,
}

/// Frame-weighted corpus averages of m and s.
pub fn corpus_stats(recordings: &[Recording]) -> CorpusStats {
    let (mut sum_m, mut sum_s, mut frames) = (0.0, 0.0, 0usize);
    for r in recordings {
        let label = r.trace.label_distribution();
        sum_m += label.m.iter().sum::<f64>();
        sum_s += label.s.iter().sum::<f64>();
        frames += label.m.len();
    }
    let n = frames.max(1) as f64;
    CorpusStats {
        recordings: recordings.len(),
        frames,
        mean_of_m: sum_m / n,
        mean_of_s: sum_s / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_spec() -> CorpusSpec {
        CorpusSpec {
            n_train: 2,
            n_dev: 1,
            duration_s: 8.0,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(CorpusSpec::default().validate().is_ok());
        assert!(CorpusSpec { duration_s: 1.01, ..short_spec() }.validate().is_err());
        assert!(CorpusSpec { annotators: 1, ..short_spec() }.validate().is_err());
        assert!(CorpusSpec { n_dev: 0, ..short_spec() }.validate().is_err());
        assert_eq!(CorpusSpec { duration_s: 30.0, ..short_spec() }.frames(), 750);
    }

    #[test]
    fn shapes_and_ids() {
        let corpus = generate_corpus(&short_spec()).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus[0].id, "train_01");
        assert_eq!(corpus[2].id, "dev_01");
        for r in &corpus {
            assert_eq!(r.frames(), 200);
            assert_eq!(r.waveform.len(), 200 * FRAME_SAMPLES);
            assert_eq!(r.trace.annotators(), 6);
            assert!(r.waveform.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn two_annotator_spec() {
        let spec = CorpusSpec { annotators: 2, ..short_spec() };
        let corpus = generate_corpus(&spec).unwrap();
        assert!(corpus.iter().all(|r| r.trace.annotators() == 2));
    }

    #[test]
    fn framing() {
        assert_eq!(frame_waveform(&[0.1; 1280]).unwrap().len(), 2);
        let padded = frame_waveform(&[0.5; 1000]).unwrap();
        assert_eq!(padded.len(), 2);
        assert_eq!(padded[1][359], 0.5);
        assert_eq!(padded[1][360], 0.0);
        assert!(matches!(frame_waveform(&[]), Err(DatasetError::EmptyWaveform)));
        assert_eq!(frame_waveform(&vec![0.0; 300 * 16_000]).unwrap().len(), 7500);
    }

    #[test]
    fn split_parsing() {
        assert_eq!("dev".parse::<Split>().unwrap(), Split::Dev);
        assert!("test".parse::<Split>().is_err());
    }
}

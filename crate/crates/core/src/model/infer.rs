use super::config::SystemKind;
use super::network::Model;
use super::ModelError;
use crate::autodiff::{Graph, Tensor};
use crate::dataset::{frame_waveform, Recording, FRAME_SAMPLES};
use crate::layers::LstmState;
use crate::losses::median_filter;
use crate::seeds::{derive_seed, stream};

/// Frames pushed through the extractor per graph at inference.
const ENCODE_CHUNK_FRAMES: usize = 64;

/// Per-frame predictive distribution of one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDistribution {
    /// `n x T` stochastic outputs; empty for deterministic systems.
    pub samples: Vec<Vec<f64>>,
    /// Output with every weight at its posterior mean.
    pub m_hat: Vec<f64>,
    /// Spread of `samples` (or the uncertainty head); `None` for systems
    /// without an uncertainty estimate.
    pub s_hat: Option<Vec<f64>>,
}

impl PredictionDistribution {
    pub fn frames(&self) -> usize {
        self.m_hat.len()
    }
}

/// LSTM outputs `[T, hidden]` for a whole waveform, computed in chunks with
/// the recurrent state carried across chunk boundaries.
pub fn encode(model: &Model, waveform: &[f32]) -> Result<Tensor, ModelError> {
    let frames = frame_waveform(waveform)?;
    let hidden = model.config.lstm_hidden;
    let mut out = Vec::with_capacity(frames.len() * hidden);
    let mut carried: Option<Vec<(Tensor, Tensor)>> = None;
    for chunk in frames.chunks(ENCODE_CHUNK_FRAMES) {
        let mut g = Graph::new(0);
        let p = model.store.bind_frozen(&mut g);
        let data: Vec<f64> = chunk.iter().flatten().map(|&v| v as f64).collect();
        let x = g.constant(Tensor::new(vec![chunk.len(), 1, FRAME_SAMPLES], data)?);
        let feats = model.features(&mut g, &p, x)?;
        let init = carried.as_ref().map(|states| {
            states
                .iter()
                .map(|(h, c)| LstmState {
                    h: g.constant(h.clone()),
                    c: g.constant(c.clone()),
                })
                .collect()
        });
        let (h, states) = model.recurrent(&mut g, &p, feats, chunk.len(), 1, init)?;
        out.extend_from_slice(g.value(h).data());
        carried = Some(
            states
                .iter()
                .map(|s| (g.value(s.h).clone(), g.value(s.c).clone()))
                .collect(),
        );
    }
    Ok(Tensor::new(vec![frames.len(), hidden], out)?)
}

/// Unbiased standard deviation, computed on values shifted by the first
/// one so identical inputs give exactly zero.
fn spread(values: &[f64]) -> f64 {
    let x0 = values[0];
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v - x0).sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - x0 - mean).powi(2)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Unfiltered per-frame outputs.
struct RawPrediction {
    samples: Vec<Vec<f64>>,
    m: Vec<f64>,
    s: Option<Vec<f64>>,
}

fn raw_prediction(model: &Model, waveform: &[f32], n: usize, seed: u64) -> Result<RawPrediction, ModelError> {
    let hidden = encode(model, waveform)?;
    let frames = hidden.shape()[0];
    let mut g = Graph::new(0);
    let p = model.store.bind_frozen(&mut g);
    let h = g.constant(hidden.clone());
    let y = model.head_mean(&mut g, &p, h, &[])?;
    let m = g.value(y).data().to_vec();
    match model.kind {
        SystemKind::Mu | SystemKind::Lu => {
            let mut samples = Vec::with_capacity(n);
            for i in 0..n {
                let mut g = Graph::new(derive_seed(seed, stream::INFERENCE, i as u64));
                let p = model.store.bind_frozen(&mut g);
                let h = g.constant(hidden.clone());
                let (y, _) = model.head_sample(&mut g, &p, h, frames, 1, &[], None)?;
                samples.push(g.value(y).data().to_vec());
            }
            let s = (0..frames)
                .map(|t| spread(&samples.iter().map(|row| row[t]).collect::<Vec<_>>()))
                .collect();
            Ok(RawPrediction { samples, m, s: Some(s) })
        }
        SystemKind::MtlPu => {
            let ys = model.head_uncertainty(&mut g, &p, h, &[])?.expect("two-head model");
            let s = g.value(ys).data().to_vec();
            let m = match model.tuning_beta {
                Some(beta) => {
                    let mean_s = s.iter().sum::<f64>() / frames as f64;
                    m.iter().zip(&s).map(|(mi, si)| mi + beta * (si - mean_s)).collect()
                }
                None => m,
            };
            Ok(RawPrediction {
                samples: Vec::new(),
                m,
                s: Some(s),
            })
        }
        SystemKind::Stl => Ok(RawPrediction {
            samples: Vec::new(),
            m,
            s: None,
        }),
    }
}

/// `n` stochastic passes (fresh windowed weight draws each, pass `i` seeded
/// from `(seed, i)`) plus one mean-weight pass, all median-filtered.
/// Deterministic systems ignore `n` and `seed`.
pub fn predict_distribution(
    model: &Model,
    waveform: &[f32],
    n: usize,
    seed: u64,
) -> Result<PredictionDistribution, ModelError> {
    if n < 2 && model.kind.is_bayesian() {
        return Err(ModelError::TooFewPasses(n));
    }
    let raw = raw_prediction(model, waveform, n, seed)?;
    let w = model.config.median_window;
    let samples = raw
        .samples
        .iter()
        .map(|row| median_filter(row, w))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PredictionDistribution {
        samples,
        m_hat: median_filter(&raw.m, w)?,
        s_hat: raw.s.map(|s| median_filter(&s, w)).transpose()?,
    })
}

/// Seed used for the stochastic passes over recording `index` of a split.
pub fn recording_seed(model: &Model, index: usize) -> u64 {
    derive_seed(model.config.seed, stream::INFERENCE, index as u64)
}

/// Fits the two-head baseline's adjustment `m + beta * (s - mean s)` by
/// least squares on the training recordings.
pub fn fit_tuning(model: &mut Model, train: &[Recording]) -> Result<f64, ModelError> {
    model.tuning_beta = None;
    let (mut num, mut den) = (0.0, 0.0);
    for (k, rec) in train.iter().enumerate() {
        let pred = predict_distribution(model, &rec.waveform, 2, recording_seed(model, k))?;
        let s = pred.s_hat.as_ref().expect("uncertainty head");
        let label = rec.trace.label_distribution();
        let mean_s = s.iter().sum::<f64>() / s.len() as f64;
        for t in 0..s.len().min(label.m.len()) {
            let d = s[t] - mean_s;
            num += (label.m[t] - pred.m_hat[t]) * d;
            den += d * d;
        }
    }
    let beta = if den > 0.0 { num / den } else { 0.0 };
    model.tuning_beta = Some(beta);
    Ok(beta)
}

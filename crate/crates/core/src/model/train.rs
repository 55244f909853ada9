use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::{ModelConfig, SystemKind};
use super::network::{build_model, Model, StepMasks};
use super::optim::Adam;
use super::ModelError;
use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::dataset::{Recording, FRAME_SAMPLES};
use crate::labels::GaussianLabel;
use crate::layers::{dropout_mask, Bindings, WeightSchedule};
use crate::losses::{self, LossBreakdown, MetricError};
use crate::seeds::{derive_seed, stream};

/// A training window: `len` frames of recording `recording` from `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub recording: usize,
    pub start: usize,
}

/// Cuts every recording into `seq_len`-frame windows. The last window of a
/// recording ends at its final frame and may overlap the previous one. The
/// window length shrinks to the shortest recording when needed.
pub fn segments(recordings: &[Recording], seq_len: usize) -> (usize, Vec<Segment>) {
    let shortest = recordings.iter().map(Recording::frames).min().unwrap_or(0);
    let len = seq_len.min(shortest);
    let mut out = Vec::new();
    if len == 0 {
        return (0, out);
    }
    for (r, rec) in recordings.iter().enumerate() {
        let frames = rec.frames();
        let mut start = 0;
        while start + len <= frames {
            out.push(Segment { recording: r, start });
            start += len;
        }
        if start < frames {
            out.push(Segment {
                recording: r,
                start: frames - len,
            });
        }
    }
    (len, out)
}

/// Per-epoch means of the loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
}

/// Data prepared once per training run.
struct Batches<'a> {
    recordings: &'a [Recording],
    labels: Vec<GaussianLabel>,
    len: usize,
    segments: Vec<Segment>,
}

impl Batches<'_> {
    fn frames_per_epoch(&self) -> usize {
        self.len * self.segments.len()
    }

    fn assemble(&self, batch: &[Segment]) -> TrainBatch {
        TrainBatch::assemble(self.recordings, &self.labels, batch, self.len)
    }
}

/// One minibatch in time-major layout: row `t * sequences + b` is frame `t`
/// of sequence `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    /// `[steps * sequences, 1, 640]`
    pub frames: Tensor,
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    pub steps: usize,
    pub sequences: usize,
}

impl TrainBatch {
    /// Gathers `len` frames of each segment. `labels[i]` belongs to
    /// `recordings[i]`.
    pub fn assemble(recordings: &[Recording], labels: &[GaussianLabel], batch: &[Segment], len: usize) -> Self {
        let b = batch.len();
        let mut frames = Vec::with_capacity(len * b * FRAME_SAMPLES);
        let mut m = Vec::with_capacity(len * b);
        let mut s = Vec::with_capacity(len * b);
        for t in 0..len {
            for seg in batch {
                let frame = seg.start + t;
                let wave = &recordings[seg.recording].waveform;
                frames.extend(wave[frame * FRAME_SAMPLES..(frame + 1) * FRAME_SAMPLES].iter().map(|&v| v as f64));
                let label = &labels[seg.recording];
                m.push(label.m[frame]);
                s.push(label.s[frame]);
            }
        }
        let frames = Tensor::new(vec![len * b, 1, FRAME_SAMPLES], frames).expect("finite audio");
        Self {
            frames,
            m,
            s,
            steps: len,
            sequences: b,
        }
    }
}

/// Labels a failing loss component.
fn term(name: &'static str) -> impl FnOnce(AutodiffError) -> ModelError {
    move |e| match e {
        AutodiffError::NonFinite { op, node } => ModelError::NonFiniteLoss {
            term: name,
            detail: format!("op {op} at node {node}"),
        },
        other => ModelError::Autodiff(other),
    }
}

fn metric_term(name: &'static str) -> impl FnOnce(MetricError) -> ModelError {
    move |e| match e {
        MetricError::Graph(inner) => term(name)(inner),
        other => ModelError::Metric(other),
    }
}

/// Graph nodes of the individual loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ccc: Var,
    /// Bayesian systems only.
    pub bbb: Option<Var>,
    /// Computed for every Bayesian system, even when `alpha = 0`.
    pub kl: Option<Var>,
}

/// Loss of one step: the node to differentiate, its parts and their values.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub terms: LossTerms,
    pub breakdown: LossBreakdown,
}

impl Model {
    fn step_masks(&self, g: &mut Graph, rows: usize) -> StepMasks {
        let p = self.config.dropout;
        if p == 0.0 {
            return StepMasks::default();
        }
        let features = dropout_mask(g.rng(), &[rows, self.config.feature_width()], p);
        let head = self
            .config
            .head_hidden
            .iter()
            .map(|&w| dropout_mask(g.rng(), &[rows, w], p))
            .collect();
        StepMasks {
            features: Some(features),
            head,
        }
    }

    /// Builds the full training loss of one batch on `g`, with parameters
    /// bound as `p`. Dropout masks and weight draws come from `g`'s RNG.
    /// `complexity_weight` multiplies the summed `log q - log P` of the
    /// Bayesian head.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        p: &Bindings,
        data: &TrainBatch,
        complexity_weight: f64,
    ) -> Result<StepLoss, ModelError> {
        let c = &self.config;
        let (steps, batch) = (data.steps, data.sequences);
        let (m, s) = (&data.m[..], &data.s[..]);
        let rows = steps * batch;
        if data.frames.shape().first() != Some(&rows) || m.len() != rows || s.len() != rows {
            return Err(ModelError::InvalidConfig(format!(
                "batch of {steps} x {batch} frames has inconsistent data lengths"
            )));
        }
        let masks = self.step_masks(g, rows);
        let frames = g.constant(data.frames.clone());
        let mut feats = self.features(g, p, frames).map_err(term("features"))?;
        if let Some(mask) = &masks.features {
            feats = g.apply_mask(feats, mask.clone()).map_err(term("features"))?;
        }
        let (hidden, _) = self
            .recurrent(g, &p, feats, steps, batch, None)
            .map_err(term("recurrent"))?;

        let label_m = g.constant(Tensor::vector(m.to_vec())?);
        let per_sequence = |g: &mut Graph, y: Var| -> Result<Vec<Var>, AutodiffError> {
            let grid = g.reshape(y, vec![steps, batch])?;
            (0..batch)
                .map(|b| {
                    let col = g.slice(grid, 1, b, b + 1)?;
                    g.reshape(col, vec![steps])
                })
                .collect()
        };
        let label_columns = |g: &mut Graph, values: &[f64]| -> Result<Vec<Var>, AutodiffError> {
            (0..batch)
                .map(|b| {
                    let col: Vec<f64> = (0..steps).map(|t| values[t * batch + b]).collect();
                    Ok(g.constant(Tensor::vector(col)?))
                })
                .collect()
        };

        let y_mean = self.head_mean(g, p, hidden, &masks.head).map_err(term("ccc"))?;
        let preds = per_sequence(g, y_mean).map_err(term("ccc"))?;
        let targets = label_columns(g, m)?;
        let mut ccc_term = losses::ccc_training_term(g, &preds, &targets).map_err(metric_term("ccc"))?;

        let (bbb_term, kl_term) = match self.kind {
            SystemKind::Mu | SystemKind::Lu => {
                let prior = c.prior();
                let mut schedules: Vec<WeightSchedule> = Vec::new();
                let mut outputs = Vec::with_capacity(c.n_train);
                let mut fits = Vec::with_capacity(c.n_train);
                for _ in 0..c.n_train {
                    let (y, sched) = self
                        .head_sample(g, p, hidden, steps, batch, &masks.head, Some(&prior))
                        .map_err(term("bbb"))?;
                    schedules.extend(sched);
                    let flat = g.reshape(y, vec![rows]).map_err(term("bbb"))?;
                    fits.push(
                        losses::gaussian_nll_graph(g, label_m, flat, c.sigma_obs).map_err(term("bbb"))?,
                    );
                    outputs.push(g.reshape(y, vec![1, rows]).map_err(term("kl"))?);
                }
                let fit_all = g.concat(&fits, 0).map_err(term("bbb"))?;
                let data_fit = g.mean(fit_all, None).map_err(term("bbb"))?;
                let bbb = losses::bbb_loss(g, &schedules, c.n_train, complexity_weight, data_fit)
                    .map_err(metric_term("bbb"))?;
                let samples = g.concat(&outputs, 0).map_err(term("kl"))?;
                let kl = losses::kl_label_loss(g, m, s, samples).map_err(metric_term("kl"))?;
                (Some(bbb), Some(kl))
            }
            SystemKind::MtlPu => {
                let y_s = self
                    .head_uncertainty(g, p, hidden, &masks.head)
                    .map_err(term("ccc"))?
                    .expect("two-head model");
                let preds_s = per_sequence(g, y_s).map_err(term("ccc"))?;
                let targets_s = label_columns(g, s)?;
                let ccc_s = losses::ccc_training_term(g, &preds_s, &targets_s).map_err(metric_term("ccc"))?;
                ccc_term = g.add(ccc_term, ccc_s).map_err(term("ccc"))?;
                (None, None)
            }
            SystemKind::Stl => (None, None),
        };

        let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().expect("scalar"));
        let ccc_v = value(g, Some(ccc_term));
        let bbb_v = value(g, bbb_term);
        let kl_v = value(g, kl_term);
        let breakdown = losses::total_loss(ccc_v, bbb_v, kl_v, c.alpha)?;
        let bbb = match bbb_term {
            Some(b) => b,
            None => g.scalar(0.0),
        };
        let total = losses::total_loss_graph(g, ccc_term, bbb, kl_term, c.alpha).map_err(metric_term("total"))?;
        Ok(StepLoss {
            total,
            terms: LossTerms {
                ccc: ccc_term,
                bbb: bbb_term,
                kl: kl_term,
            },
            breakdown,
        })
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_loss: f64,
}

impl TrainState {
    pub fn new(config: &ModelConfig, kind: SystemKind) -> Result<Self, ModelError> {
        let model = build_model(config, kind)?;
        let adam = Adam::new(&model.store, model.config.learning_rate);
        Ok(Self {
            model,
            adam,
            epoch: 0,
            best_loss: f64::INFINITY,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            model: ck.model,
            adam: ck.adam,
            epoch: ck.epoch,
            best_loss: ck.best_loss,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            best_loss: self.best_loss,
        }
    }
}

/// Scale of the summed `log q - log P` term: one draw's worth of
/// complexity, spread over the frames of an epoch.
pub fn complexity_weight(config: &ModelConfig, seq_len: usize, frames_per_epoch: usize) -> f64 {
    let draws = WeightSchedule::draw_count(seq_len, config.window_frames);
    1.0 / (draws * frames_per_epoch) as f64
}

/// Runs one epoch. The shuffle order and every step's randomness derive from
/// `(seed, epoch)`, so resuming from a checkpoint reproduces an
/// uninterrupted run exactly.
pub fn train_epoch(state: &mut TrainState, train: &[Recording]) -> Result<EpochRecord, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptySplit("train".into()));
    }
    let config = state.model.config.clone();
    let (len, segs) = segments(train, config.seq_len);
    if len < 2 {
        return Err(ModelError::InvalidConfig("training recordings need at least 2 frames".into()));
    }
    let mut batches = Batches {
        recordings: train,
        labels: train.iter().map(|r| r.trace.label_distribution()).collect(),
        len,
        segments: segs,
    };
    let epoch = state.epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream::EPOCH, epoch as u64));
    batches.segments.shuffle(&mut rng);

    let complexity_weight = complexity_weight(&config, len, batches.frames_per_epoch());

    let mut sum = LossBreakdown {
        alpha: config.alpha,
        ..LossBreakdown::default()
    };
    let mut steps = 0;
    for chunk in batches.segments.chunks(config.batch_size) {
        let data = batches.assemble(chunk);
        let mut g = Graph::new(rng.random());
        let p = state.model.store.bind(&mut g);
        let loss = state.model.batch_loss(&mut g, &p, &data, complexity_weight)?;
        g.backward(loss.total)?;
        let grads = state.model.store.gradients(&g, &p);
        state.adam.step(&mut state.model.store, &grads);
        sum.ccc_term += loss.breakdown.ccc_term;
        sum.bbb_term += loss.breakdown.bbb_term;
        sum.kl_term += loss.breakdown.kl_term;
        sum.total += loss.breakdown.total;
        steps += 1;
        log::debug!("epoch {epoch} step {steps}: {:.5}", loss.breakdown.total);
    }
    let n = steps as f64;
    let mean = LossBreakdown {
        ccc_term: sum.ccc_term / n,
        bbb_term: sum.bbb_term / n,
        kl_term: sum.kl_term / n,
        alpha: config.alpha,
        total: sum.total / n,
    };
    state.epoch += 1;
    Ok(EpochRecord {
        epoch: state.epoch,
        steps,
        loss: mean,
    })
}

/// Trains until `state.epoch == epochs`, calling `on_epoch` after every
/// epoch with whether the epoch-mean loss improved on the best so far.
pub fn train<F>(state: &mut TrainState, train: &[Recording], epochs: usize, mut on_epoch: F) -> Result<Vec<EpochRecord>, ModelError>
where
    F: FnMut(&TrainState, &EpochRecord, bool) -> Result<(), ModelError>,
{
    let mut curve = Vec::new();
    while state.epoch < epochs {
        let record = train_epoch(state, train)?;
        let improved = record.loss.total < state.best_loss;
        if improved {
            state.best_loss = record.loss.total;
        }
        log::info!(
            "epoch {}: total {:.5} (ccc {:.5}, bbb {:.5}, kl {:.5}){}",
            record.epoch,
            record.loss.total,
            record.loss.ccc_term,
            record.loss.bbb_term,
            record.loss.kl_term,
            if improved { " *" } else { "" }
        );
        on_epoch(state, &record, improved)?;
        curve.push(record);
    }
    Ok(curve)
}

/// Trains a fresh model and returns the checkpoint with the lowest
/// epoch-mean training loss, plus the loss curve.
pub fn train_best(
    config: &ModelConfig,
    kind: SystemKind,
    train_set: &[Recording],
) -> Result<(Checkpoint, Vec<EpochRecord>), ModelError> {
    let mut state = TrainState::new(config, kind)?;
    let mut best: Option<Checkpoint> = None;
    let curve = train(&mut state, train_set, config.epochs, |s, _, improved| {
        if improved {
            best = Some(s.checkpoint());
        }
        Ok(())
    })?;
    let mut best = best.unwrap_or_else(|| state.checkpoint());
    if kind == SystemKind::MtlPu {
        super::infer::fit_tuning(&mut best.model, train_set)?;
    }
    Ok((best, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_corpus, CorpusSpec, Split};

    #[test]
    fn segmentation_covers_every_frame() {
        let spec = CorpusSpec {
            n_train: 2,
            n_dev: 1,
            duration_s: 1.0,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let train: Vec<_> = corpus.into_iter().filter(|r| r.split == Split::Train).collect();
        let (len, segs) = segments(&train, 10);
        assert_eq!(len, 10);
        // 25 frames -> windows at 0, 10 and a final one at 15
        assert_eq!(segs.iter().filter(|s| s.recording == 0).map(|s| s.start).collect::<Vec<_>>(), vec![0, 10, 15]);
        let (len, segs) = segments(&train, 300);
        assert_eq!(len, 25);
        assert_eq!(segs.len(), 2);
    }
}

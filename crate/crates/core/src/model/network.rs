use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, SystemKind};
use super::ModelError;
use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::layers::{BayesLinear, Bindings, ConvBlock, Dense, LstmLayer, LstmState, ParamStore, Prior, WeightSchedule};
use crate::seeds::{derive_seed, stream};

/// Output stage of a system.
#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Bayes(Vec<BayesLinear>),
    Deterministic(Vec<Dense>),
    /// Separate mean and uncertainty stacks; the latter ends in softplus.
    TwoHeads { m: Vec<Dense>, s: Vec<Dense> },
}

/// Raw frames -> conv stack -> LSTM -> head.
///
/// Batched tensors are time-major: row `t * batch + b` is frame `t` of
/// sequence `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: SystemKind,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub conv: Vec<ConvBlock>,
    pub lstm: Vec<LstmLayer>,
    pub head: Head,
    /// Fitted adjustment of the two-head baseline.
    pub tuning_beta: Option<f64>,
}

/// Builds a freshly initialized model. The feature extractor is drawn
/// first, so all systems with the same seed start from the same one.
pub fn build_model(config: &ModelConfig, kind: SystemKind) -> Result<Model, ModelError> {
    config.validate()?;
    let config = config.for_system(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream::INIT, 0));
    let mut store = ParamStore::new();

    let mut conv = Vec::with_capacity(config.conv.len());
    let mut in_ch = 1;
    for (i, c) in config.conv.iter().enumerate() {
        conv.push(ConvBlock::new(&mut store, &format!("conv{i}"), in_ch, c.channels, c.kernel, c.pool, &mut rng));
        in_ch = c.channels;
    }
    let mut lstm = Vec::with_capacity(config.lstm_layers);
    let mut width = config.feature_width();
    for i in 0..config.lstm_layers {
        lstm.push(LstmLayer::new(&mut store, &format!("lstm{i}"), width, config.lstm_hidden, &mut rng));
        width = config.lstm_hidden;
    }

    let mut widths = vec![config.lstm_hidden];
    widths.extend(&config.head_hidden);
    widths.push(1);
    let dense_stack = |store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng| -> Vec<Dense> {
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{prefix}{i}"), w[0], w[1], rng))
            .collect()
    };
    let head = match kind {
        SystemKind::Mu | SystemKind::Lu => Head::Bayes(
            widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| {
                    BayesLinear::new(
                        &mut store,
                        &format!("bbb{i}"),
                        w[0],
                        w[1],
                        (config.mu_init[0], config.mu_init[1]),
                        (config.rho_init[0], config.rho_init[1]),
                        &mut rng,
                    )
                })
                .collect(),
        ),
        SystemKind::Stl => Head::Deterministic(dense_stack(&mut store, "head", &mut rng)),
        SystemKind::MtlPu => {
            let m = dense_stack(&mut store, "head", &mut rng);
            let s = dense_stack(&mut store, "head_s", &mut rng);
            Head::TwoHeads { m, s }
        }
    };
    Ok(Model {
        kind,
        config,
        store,
        conv,
        lstm,
        head,
        tuning_beta: None,
    })
}

/// Rows `[r0, r1)` of a 2-D tensor.
pub(crate) fn row_block(t: &Tensor, r0: usize, r1: usize) -> Tensor {
    let w = t.shape()[1];
    Tensor::new(vec![r1 - r0, w], t.data()[r0 * w..r1 * w].to_vec()).expect("valid row block")
}

/// Dropout masks for one training step, shared by every pass.
#[derive(Clone, Debug, Default)]
pub(crate) struct StepMasks {
    pub features: Option<Tensor>,
    /// One per hidden head layer.
    pub head: Vec<Tensor>,
}

impl Model {
    /// Parameters belonging to the Bayesian head.
    pub fn is_bayes_param(&self, name: &str) -> bool {
        name.starts_with("bbb")
    }

    pub fn bayes_layers(&self) -> &[BayesLinear] {
        match &self.head {
            Head::Bayes(layers) => layers,
            _ => &[],
        }
    }

    /// Collapses every weight posterior onto its mean.
    pub fn collapse_posterior(&mut self) {
        if let Head::Bayes(layers) = &self.head {
            for l in layers.clone() {
                l.collapse_posterior(&mut self.store);
            }
        }
    }

    /// `frames: [N, 1, 640]` -> `[N, features]`.
    pub(crate) fn features(&self, g: &mut Graph, p: &Bindings, frames: Var) -> Result<Var, AutodiffError> {
        let n = g.shape(frames)[0];
        let mut x = frames;
        for block in &self.conv {
            x = block.forward(g, p, x)?;
        }
        if self.config.final_pool > 1 {
            x = g.maxpool1d(x, self.config.final_pool)?;
        }
        g.reshape(x, vec![n, self.config.feature_width()])
    }

    /// Runs the LSTM stack over time-major `x: [steps * batch, width]`.
    /// Returns the top layer's outputs and every layer's final state.
    pub(crate) fn recurrent(
        &self,
        g: &mut Graph,
        p: &Bindings,
        x: Var,
        steps: usize,
        batch: usize,
        init: Option<Vec<LstmState>>,
    ) -> Result<(Var, Vec<LstmState>), AutodiffError> {
        let mut states = match init {
            Some(s) => s,
            None => self.lstm.iter().map(|l| l.zero_state(g, batch)).collect(),
        };
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut h = g.slice(x, 0, t * batch, (t + 1) * batch)?;
            for (layer, state) in self.lstm.iter().zip(states.iter_mut()) {
                *state = layer.step(g, p, h, *state)?;
                h = state.h;
            }
            outputs.push(h);
        }
        Ok((g.concat(&outputs, 0)?, states))
    }

    fn dense_stack(
        g: &mut Graph,
        p: &Bindings,
        layers: &[Dense],
        mut x: Var,
        masks: &[Tensor],
    ) -> Result<Var, AutodiffError> {
        for (i, layer) in layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i + 1 < layers.len() {
                x = g.tanh(x)?;
                if let Some(m) = masks.get(i) {
                    x = g.apply_mask(x, m.clone())?;
                }
            }
        }
        Ok(x)
    }

    /// Deterministic output `[rows, 1]`: the mean-weight pass for the
    /// Bayesian head, the (mean) head otherwise.
    pub(crate) fn head_mean(&self, g: &mut Graph, p: &Bindings, x: Var, masks: &[Tensor]) -> Result<Var, AutodiffError> {
        match &self.head {
            Head::Bayes(layers) => {
                let mut x = x;
                for (i, layer) in layers.iter().enumerate() {
                    x = layer.mean(g, p, x)?;
                    if i + 1 < layers.len() {
                        x = g.tanh(x)?;
                        if let Some(m) = masks.get(i) {
                            x = g.apply_mask(x, m.clone())?;
                        }
                    }
                }
                Ok(x)
            }
            Head::Deterministic(layers) | Head::TwoHeads { m: layers, .. } => Self::dense_stack(g, p, layers, x, masks),
        }
    }

    /// Uncertainty head of the two-head baseline, `[rows, 1]`.
    pub(crate) fn head_uncertainty(
        &self,
        g: &mut Graph,
        p: &Bindings,
        x: Var,
        masks: &[Tensor],
    ) -> Result<Option<Var>, AutodiffError> {
        match &self.head {
            Head::TwoHeads { s, .. } => {
                let y = Self::dense_stack(g, p, s, x, masks)?;
                Ok(Some(g.softplus(y)?))
            }
            _ => Ok(None),
        }
    }

    /// One stochastic pass of the Bayesian head over time-major
    /// `x: [steps * batch, width]`. Every window of `window_frames` time
    /// steps gets its own weight draw, shared by all sequences in the
    /// batch. With `prior` set, log densities are tracked and one schedule
    /// per layer is returned.
    pub(crate) fn head_sample(
        &self,
        g: &mut Graph,
        p: &Bindings,
        x: Var,
        steps: usize,
        batch: usize,
        masks: &[Tensor],
        prior: Option<&Prior>,
    ) -> Result<(Var, Vec<WeightSchedule>), AutodiffError> {
        let layers = self.bayes_layers();
        assert!(!layers.is_empty(), "stochastic pass needs a Bayesian head");
        let window = self.config.window_frames;
        let draws = WeightSchedule::draw_count(steps, window);
        let mut schedules: Vec<WeightSchedule> = layers
            .iter()
            .map(|_| WeightSchedule {
                draws: Vec::with_capacity(draws),
                window_frames: window,
                frames: steps,
            })
            .collect();
        let mut pieces = Vec::with_capacity(draws);
        for j in 0..draws {
            let (t0, t1) = (j * window, ((j + 1) * window).min(steps));
            let (r0, r1) = (t0 * batch, t1 * batch);
            let mut h = g.slice(x, 0, r0, r1)?;
            for (i, layer) in layers.iter().enumerate() {
                let (w, b) = match prior {
                    Some(prior) => {
                        let d = layer.draw(g, p, prior)?;
                        schedules[i].draws.push(d);
                        (d.weight, d.bias)
                    }
                    None => layer.draw_weights(g, p)?,
                };
                h = layer.forward_with(g, h, w, b)?;
                if i + 1 < layers.len() {
                    h = g.tanh(h)?;
                    if let Some(m) = masks.get(i) {
                        h = g.apply_mask(h, row_block(m, r0, r1))?;
                    }
                }
            }
            pieces.push(h);
        }
        let y = g.concat(&pieces, 0)?;
        if prior.is_none() {
            schedules.clear();
        }
        Ok((y, schedules))
    }
}

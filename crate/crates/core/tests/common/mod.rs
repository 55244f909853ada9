//! Independent oracles and fixtures shared by the integration and
//! acceptance tests.
#![allow(dead_code)]

use affect_bnn::autodiff::{gradcheck, gradcheck_report, AutodiffError, GradcheckReport, Graph, OpAttrs, OpTag, Tensor};
use affect_bnn::dataset::{generate_corpus, CorpusSpec, Recording, Split, FRAME_SAMPLES};
use affect_bnn::labels::GaussianLabel;
use affect_bnn::layers::{dropout_mask, BayesLinear, Bindings, ParamStore, Prior};
use affect_bnn::losses::bbb_loss;
use affect_bnn::model::{build_model, ConvSpec, Model, ModelConfig, SystemKind, TrainBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRADCHECK_EPS: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

// ----- metric oracles ---------------------------------------------------------

/// Two-pass CCC with population moments.
pub fn ccc_two_pass(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    let (vx, vy, cov) = (vx / n, vy / n, cov / n);
    2.0 * cov / (vx + vy + (mx - my) * (mx - my))
}

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// `KL(N(mu_p, s_p) || N(mu_q, s_q))` by composite Simpson integration of
/// `p log(p / q)` over `mu_p +- 14 s_p`.
pub fn kl_quadrature(mu_p: f64, s_p: f64, mu_q: f64, s_q: f64) -> f64 {
    let intervals = 40_000;
    let (a, b) = (mu_p - 14.0 * s_p, mu_p + 14.0 * s_p);
    let h = (b - a) / intervals as f64;
    let f = |x: f64| {
        let p = normal_pdf(x, mu_p, s_p);
        if p == 0.0 {
            return 0.0;
        }
        // log p - log q in closed form avoids underflow in the tails
        let lp = -0.5 * ((x - mu_p) / s_p).powi(2) - s_p.ln();
        let lq = -0.5 * ((x - mu_q) / s_q).powi(2) - s_q.ln();
        p * (lp - lq)
    };
    let mut acc = f(a) + f(b);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Sorts every window from scratch.
pub fn median_naive(seq: &[f64], window: usize) -> Vec<f64> {
    let before = (window - 1) / 2;
    let after = window / 2;
    (0..seq.len())
        .map(|t| {
            let lo = t.saturating_sub(before);
            let hi = (t + after + 1).min(seq.len());
            let mut w = seq[lo..hi].to_vec();
            w.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = w.len();
            if k % 2 == 1 {
                w[k / 2]
            } else {
                0.5 * (w[k / 2 - 1] + w[k / 2])
            }
        })
        .collect()
}

/// Closed-form `KL(q || N(0, 1))` written out independently of the crate.
pub fn kl_to_standard_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| -s.ln() + 0.5 * (s * s + m * m) - 0.5)
        .sum()
}

/// Monte-Carlo complexity of a random posterior versus its closed form.
/// Returns `(mc, closed)`.
pub fn mc_complexity(seed: u64, samples: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inputs, outputs) = (rng.random_range(2..6), rng.random_range(1..5));
    let mut store = ParamStore::new();
    let layer = BayesLinear::new(&mut store, "q", inputs, outputs, (-1.0, 1.0), (-3.0, 0.5), &mut rng);
    let params = layer.params(&store);
    let mu: Vec<f64> = params.mu_w.data().iter().chain(params.mu_b.data()).copied().collect();
    let sigma: Vec<f64> = params.sigma_w().into_iter().chain(params.sigma_b()).collect();
    let closed = kl_to_standard_normal(&mu, &sigma);

    let mut g = Graph::new(seed ^ 0x5eed);
    let p = store.bind_frozen(&mut g);
    let schedule = layer
        .sample_schedule(&mut g, &p, &Prior::standard(), samples, 1)
        .unwrap();
    let zero = g.scalar(0.0);
    let loss = bbb_loss(&mut g, &[schedule], 1, 1.0 / samples as f64, zero).unwrap();
    (g.value(loss).item().unwrap(), closed)
}

// ----- gradcheck points --------------------------------------------------------

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[0.2, 1.5]` and random sign, away from kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced at least 0.05 apart, so max-pool has no ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    let data = values.into_iter().map(|v| v + rng.random_range(0.0..0.05)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn broadcast_pair(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (r, c) = (rng.random_range(1..4), rng.random_range(1..5));
    match rng.random_range(0..4) {
        0 => (vec![r, c], vec![r, c]),
        1 => (vec![r, c], vec![c]),
        2 => (vec![r, 1], vec![1, c]),
        _ => (vec![1], vec![r, c]),
    }
}

/// A random valid input point and attributes for `op`.
pub fn primitive_point(op: OpTag, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, OpAttrs) {
    let mut attrs = OpAttrs::default();
    let small = |rng: &mut ChaCha8Rng| vec![rng.random_range(1..4), rng.random_range(1..5)];
    let point = match op {
        OpTag::Add | OpTag::Sub | OpTag::Mul => {
            let (a, b) = broadcast_pair(rng);
            vec![rand_tensor(rng, &a, -2.0, 2.0), rand_tensor(rng, &b, -2.0, 2.0)]
        }
        OpTag::Div => {
            let (a, b) = broadcast_pair(rng);
            vec![rand_tensor(rng, &a, -2.0, 2.0), away_from_zero(rng, &b)]
        }
        OpTag::MatMul => {
            let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
            vec![rand_tensor(rng, &[m, k], -1.0, 1.0), rand_tensor(rng, &[k, n], -1.0, 1.0)]
        }
        OpTag::Conv1d => {
            let (b, cin, cout) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
            let (k, len) = (rng.random_range(1..5), rng.random_range(3..9));
            vec![
                rand_tensor(rng, &[b, cin, len], -1.0, 1.0),
                rand_tensor(rng, &[cout, cin, k], -1.0, 1.0),
                rand_tensor(rng, &[cout], -1.0, 1.0),
            ]
        }
        OpTag::MaxPool1d => {
            attrs.pool = rng.random_range(1..4);
            let len = attrs.pool * rng.random_range(1..4);
            let shape = [rng.random_range(1..3), rng.random_range(1..3), len];
            vec![distinct(rng, &shape)]
        }
        OpTag::Relu => {
            let shape = small(rng);
            vec![away_from_zero(rng, &shape)]
        }
        OpTag::Log | OpTag::Sqrt => {
            let shape = small(rng);
            vec![rand_tensor(rng, &shape, 0.3, 2.0)]
        }
        OpTag::Sigmoid | OpTag::Tanh | OpTag::Softplus | OpTag::Exp | OpTag::Square => {
            let shape = small(rng);
            vec![rand_tensor(rng, &shape, -2.0, 2.0)]
        }
        OpTag::Sum | OpTag::Mean | OpTag::Variance => {
            let shape = vec![rng.random_range(2..4), rng.random_range(2..5)];
            attrs.axis = [None, Some(0), Some(1)][rng.random_range(0..3)];
            attrs.ddof = rng.random_range(0..2);
            vec![rand_tensor(rng, &shape, -2.0, 2.0)]
        }
        OpTag::Slice => {
            let shape = vec![rng.random_range(2..5), rng.random_range(2..5)];
            let axis = rng.random_range(0..2);
            attrs.axis = Some(axis);
            attrs.start = rng.random_range(0..shape[axis]);
            attrs.end = rng.random_range(attrs.start + 1..=shape[axis]);
            vec![rand_tensor(rng, &shape, -2.0, 2.0)]
        }
        OpTag::Concat => {
            let axis = rng.random_range(0..2);
            attrs.axis = Some(axis);
            let other = rng.random_range(1..4);
            (0..rng.random_range(1..4))
                .map(|_| {
                    let along = rng.random_range(1..4);
                    let shape = if axis == 0 { vec![along, other] } else { vec![other, along] };
                    rand_tensor(rng, &shape, -2.0, 2.0)
                })
                .collect()
        }
        OpTag::DropoutMaskApply => {
            let shape = small(rng);
            attrs.mask = Some(dropout_mask(rng, &shape, 0.5));
            vec![rand_tensor(rng, &shape, -2.0, 2.0)]
        }
        OpTag::Reshape => {
            let (a, b) = (rng.random_range(1..4), rng.random_range(1..4));
            attrs.shape = Some(vec![b, a]);
            vec![rand_tensor(rng, &[a, b], -2.0, 2.0)]
        }
        OpTag::Leaf => unreachable!("leaf is not a primitive"),
    };
    (point, attrs)
}

/// Worst gradcheck error over every primitive at points drawn from `seed`,
/// with the op that produced it.
pub fn gradcheck_primitives(seed: u64) -> Result<(f64, OpTag), AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, OpTag::Add);
    for op in OpTag::PRIMITIVES {
        let (point, attrs) = primitive_point(op, &mut rng);
        let err = gradcheck(op, &point, &attrs, GRADCHECK_EPS)?;
        if err > worst.0 {
            worst = (err, op);
        }
    }
    Ok(worst)
}

// ----- tiny models --------------------------------------------------------------

pub const TINY_FRAMES: usize = 8;

/// A model small enough to gradcheck quickly: 4-channel convs pooling
/// 8 * 8 * 10, LSTM hidden 8, trained on 8-frame sequences.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        conv: vec![
            ConvSpec { kernel: 3, channels: 4, pool: 8 },
            ConvSpec { kernel: 3, channels: 4, pool: 8 },
            ConvSpec { kernel: 2, channels: 4, pool: 10 },
        ],
        lstm_layers: 1,
        lstm_hidden: 8,
        head_hidden: vec![8],
        window_frames: 3,
        n_infer: 4,
        n_train: 2,
        seq_len: TINY_FRAMES,
        batch_size: 2,
        epochs: 2,
        median_window: 3,
        seed,
        ..ModelConfig::default()
    }
}

/// Random audio frames and labels in the training layout.
pub fn random_batch(seed: u64, steps: usize, sequences: usize) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = steps * sequences;
    TrainBatch {
        frames: rand_tensor(&mut rng, &[rows, 1, FRAME_SAMPLES], -0.5, 0.5),
        m: (0..rows).map(|_| rng.random_range(-0.8..0.8)).collect(),
        s: (0..rows).map(|_| rng.random_range(0.02..0.4)).collect(),
        steps,
        sequences,
    }
}

/// Gradcheck of the full training loss of `kind` with respect to every
/// parameter of a freshly initialized tiny model.
pub fn gradcheck_model(kind: SystemKind, seed: u64) -> Result<GradcheckReport, AutodiffError> {
    let model: Model = build_model(&tiny_config(seed), kind).unwrap();
    let batch = random_batch(seed, TINY_FRAMES, 1);
    let point: Vec<Tensor> = model.store.iter().map(|(_, t)| t.clone()).collect();
    gradcheck_report(&point, GRADCHECK_EPS, GRADCHECK_TOLERANCE, seed, |g, vars| {
        let p = Bindings::from_vars(vars.to_vec());
        let loss = model
            .batch_loss(g, &p, &batch, 0.01)
            .unwrap_or_else(|e| panic!("tiny {kind} loss failed: {e}"));
        Ok(loss.total)
    })
}

// ----- corpora ------------------------------------------------------------------

/// Deterministic corpus split into (train, dev).
pub fn corpus(spec: &CorpusSpec) -> (Vec<Recording>, Vec<Recording>) {
    generate_corpus(spec)
        .unwrap()
        .into_iter()
        .partition(|r| r.split == Split::Train)
}

/// Hand-built label for metric fixtures.
pub fn label(m: Vec<f64>, s: Vec<f64>) -> GaussianLabel {
    GaussianLabel { m, s }
}

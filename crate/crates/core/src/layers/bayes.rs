//! Bayes-by-Backprop linear layer.
//!
//! Each weight and bias carries a Gaussian variational posterior
//! `N(mu, softplus(rho))`. Samples use the reparameterization
//! `w = mu + softplus(rho) * eps` with `eps ~ N(0, 1)` drawn outside the
//! graph, so gradients reach both `mu` and `rho`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{uniform, Bindings, ParamId, ParamStore};
use crate::autodiff::{softplus, AutodiffError, Graph, Tensor, Var};

/// `rho` value whose softplus underflows to exactly zero.
pub const DEGENERATE_RHO: f64 = -1e4;

/// Gaussian weight prior `P(w)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prior {
    mean: f64,
    std: f64,
}

impl Prior {
    pub fn new(mean: f64, std: f64) -> Option<Self> {
        (std > 0.0 && std.is_finite() && mean.is_finite()).then_some(Self { mean, std })
    }

    pub fn standard() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn log_density(&self, x: f64) -> f64 {
        gaussian_log_density(x, self.mean, self.std)
    }
}

impl Default for Prior {
    fn default() -> Self {
        Self::standard()
    }
}

pub fn gaussian_log_density(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * (2.0 * PI).ln() - std.ln() - 0.5 * z * z
}

/// Variational parameters of one layer, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesParams {
    pub mu_w: Tensor,
    pub rho_w: Tensor,
    pub mu_b: Tensor,
    pub rho_b: Tensor,
}

impl BayesParams {
    pub fn sigma_w(&self) -> Vec<f64> {
        self.rho_w.data().iter().map(|&r| softplus(r)).collect()
    }

    pub fn sigma_b(&self) -> Vec<f64> {
        self.rho_b.data().iter().map(|&r| softplus(r)).collect()
    }

    /// Closed-form `KL(q || prior)` summed over every weight and bias.
    pub fn kl_to_prior(&self, prior: &Prior) -> f64 {
        let mus = self.mu_w.data().iter().chain(self.mu_b.data());
        let sigmas = self.sigma_w().into_iter().chain(self.sigma_b());
        mus.zip(sigmas)
            .map(|(&m, s)| {
                let (pm, ps) = (prior.mean, prior.std);
                (ps / s).ln() + (s * s + (m - pm).powi(2)) / (2.0 * ps * ps) - 0.5
            })
            .sum()
    }
}

/// One weight draw of a layer with its log densities.
#[derive(Clone, Copy, Debug)]
pub struct WeightDraw {
    pub weight: Var,
    pub bias: Var,
    /// `log q(w | theta)` summed over weights and biases.
    pub log_q: Var,
    /// `log P(w)` summed over weights and biases.
    pub log_prior: Var,
}

/// Weight draws for a sequence of `frames` frames, one draw per window of
/// `window_frames` consecutive frames.
#[derive(Clone, Debug)]
pub struct WeightSchedule {
    pub draws: Vec<WeightDraw>,
    pub window_frames: usize,
    pub frames: usize,
}

impl WeightSchedule {
    pub fn draw_count(frames: usize, window_frames: usize) -> usize {
        frames.div_ceil(window_frames)
    }

    /// Draw used by frame `t`.
    pub fn draw_index(&self, t: usize) -> usize {
        t / self.window_frames
    }

    /// Frame range `[start, end)` covered by draw `i`.
    pub fn window(&self, i: usize) -> (usize, usize) {
        let start = i * self.window_frames;
        (start, (start + self.window_frames).min(self.frames))
    }

    /// `sum_i (log q(w_i) - log P(w_i))` over all draws.
    pub fn complexity(&self, g: &mut Graph) -> Result<Var, AutodiffError> {
        let mut terms = Vec::with_capacity(self.draws.len());
        for d in &self.draws {
            terms.push(g.sub(d.log_q, d.log_prior)?);
        }
        let all = g.concat(&terms, 0)?;
        g.sum(all, None)
    }
}

/// Linear layer with variational weights `[inputs, outputs]` and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesLinear {
    pub mu_w: ParamId,
    pub rho_w: ParamId,
    pub mu_b: ParamId,
    pub rho_b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl BayesLinear {
    /// `mu ~ U[mu_range]`, `rho ~ U[rho_range]` for weights and biases alike.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        mu_range: (f64, f64),
        rho_range: (f64, f64),
        rng: &mut R,
    ) -> Self {
        let mu_w = store.add(format!("{name}.mu_w"), uniform(rng, &[inputs, outputs], mu_range.0, mu_range.1));
        let rho_w = store.add(format!("{name}.rho_w"), uniform(rng, &[inputs, outputs], rho_range.0, rho_range.1));
        let mu_b = store.add(format!("{name}.mu_b"), uniform(rng, &[outputs], mu_range.0, mu_range.1));
        let rho_b = store.add(format!("{name}.rho_b"), uniform(rng, &[outputs], rho_range.0, rho_range.1));
        Self {
            mu_w,
            rho_w,
            mu_b,
            rho_b,
            inputs,
            outputs,
        }
    }

    pub fn params(&self, store: &ParamStore) -> BayesParams {
        BayesParams {
            mu_w: store.get(self.mu_w).clone(),
            rho_w: store.get(self.rho_w).clone(),
            mu_b: store.get(self.mu_b).clone(),
            rho_b: store.get(self.rho_b).clone(),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.mu_w, self.rho_w, self.mu_b, self.rho_b]
    }

    /// Sets every `rho` so the posterior collapses onto its mean.
    pub fn collapse_posterior(&self, store: &mut ParamStore) {
        for id in [self.rho_w, self.rho_b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|r| *r = DEGENERATE_RHO);
        }
    }

    fn sample_one(
        g: &mut Graph,
        mu: Var,
        rho: Var,
        prior: &Prior,
        with_density: bool,
    ) -> Result<(Var, Option<(Var, Var)>), AutodiffError> {
        let shape = g.shape(mu).to_vec();
        let n: usize = shape.iter().product();
        let eps: Vec<f64> = (0..n).map(|_| g.rng().sample(StandardNormal)).collect();
        let eps_sq: f64 = eps.iter().map(|e| e * e).sum();
        let eps = g.constant(Tensor::from_parts(shape, eps));
        let sigma = g.softplus(rho)?;
        let noise = g.mul(sigma, eps)?;
        let w = g.add(mu, noise)?;
        if !with_density {
            return Ok((w, None));
        }
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        // log q = sum(-log sigma) - n/2 log 2pi - sum(eps^2)/2, since (w - mu)/sigma = eps
        let log_sigma = g.log(sigma)?;
        let sum_log_sigma = g.sum(log_sigma, None)?;
        let log_q = g.rsub_scalar(-(n as f64) * half_log_2pi - 0.5 * eps_sq, sum_log_sigma)?;
        let centered = g.add_scalar(w, -prior.mean)?;
        let sq = g.square(centered)?;
        let sq_sum = g.sum(sq, None)?;
        let scaled = g.mul_scalar(sq_sum, -0.5 / (prior.std * prior.std))?;
        let log_prior = g.add_scalar(scaled, -(n as f64) * (half_log_2pi + prior.std.ln()))?;
        Ok((w, Some((log_q, log_prior))))
    }

    /// Draws one weight set with its log densities.
    pub fn draw(&self, g: &mut Graph, p: &Bindings, prior: &Prior) -> Result<WeightDraw, AutodiffError> {
        let (weight, dw) = Self::sample_one(g, p[self.mu_w], p[self.rho_w], prior, true)?;
        let (bias, db) = Self::sample_one(g, p[self.mu_b], p[self.rho_b], prior, true)?;
        let ((qw, pw), (qb, pb)) = (dw.expect("density"), db.expect("density"));
        Ok(WeightDraw {
            weight,
            bias,
            log_q: g.add(qw, qb)?,
            log_prior: g.add(pw, pb)?,
        })
    }

    /// Draws weights only. Valid for a collapsed posterior, whose log
    /// density is undefined.
    pub fn draw_weights(&self, g: &mut Graph, p: &Bindings) -> Result<(Var, Var), AutodiffError> {
        let prior = Prior::standard();
        let (w, _) = Self::sample_one(g, p[self.mu_w], p[self.rho_w], &prior, false)?;
        let (b, _) = Self::sample_one(g, p[self.mu_b], p[self.rho_b], &prior, false)?;
        Ok((w, b))
    }

    /// `x W + b` for given (sampled or mean) weights.
    pub fn forward_with(&self, g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
        let xw = g.matmul(x, weight)?;
        g.add(xw, bias)
    }

    /// Stochastic forward: returns `(output, log_q, log_prior)`.
    pub fn sample(&self, g: &mut Graph, p: &Bindings, x: Var, prior: &Prior) -> Result<(Var, Var, Var), AutodiffError> {
        let d = self.draw(g, p, prior)?;
        let y = self.forward_with(g, x, d.weight, d.bias)?;
        Ok((y, d.log_q, d.log_prior))
    }

    /// Deterministic forward with `w = mu`; consumes no randomness.
    pub fn mean(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var, AutodiffError> {
        self.forward_with(g, x, p[self.mu_w], p[self.mu_b])
    }

    /// `ceil(frames / window_frames)` independent draws.
    pub fn sample_schedule(
        &self,
        g: &mut Graph,
        p: &Bindings,
        prior: &Prior,
        frames: usize,
        window_frames: usize,
    ) -> Result<WeightSchedule, AutodiffError> {
        assert!(frames >= 1 && window_frames >= 1, "frames and window must be positive");
        let draws = (0..WeightSchedule::draw_count(frames, window_frames))
            .map(|_| self.draw(g, p, prior))
            .collect::<Result<_, _>>()?;
        Ok(WeightSchedule {
            draws,
            window_frames,
            frames,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_weight_layer(mu: f64, rho: f64) -> (ParamStore, BayesLinear) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = BayesLinear::new(&mut store, "b", 1, 1, (0.0, 0.1), (-3.0, -2.0), &mut rng);
        *store.get_mut(layer.mu_w) = Tensor::scalar(mu).reshaped(vec![1, 1]).unwrap();
        *store.get_mut(layer.rho_w) = Tensor::scalar(rho).reshaped(vec![1, 1]).unwrap();
        *store.get_mut(layer.mu_b) = Tensor::scalar(mu);
        *store.get_mut(layer.rho_b) = Tensor::scalar(rho);
        (store, layer)
    }

    #[test]
    fn log_density_closed_form() {
        assert!((gaussian_log_density(0.0, 0.0, 1.0) + 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn posterior_equal_to_prior_has_zero_complexity() {
        // softplus(rho) = 1  <=>  rho = ln(e - 1)
        let rho = (std::f64::consts::E - 1.0).ln();
        let (store, layer) = single_weight_layer(0.0, rho);
        for seed in 0..20 {
            let mut g = Graph::new(seed);
            let p = store.bind(&mut g);
            let d = layer.draw(&mut g, &p, &Prior::standard()).unwrap();
            let diff = g.value(d.log_q).item().unwrap() - g.value(d.log_prior).item().unwrap();
            assert!(diff.abs() < 1e-12, "{diff}");
        }
    }

    #[test]
    fn schedule_draw_counts_and_mapping() {
        let (store, layer) = single_weight_layer(0.0, -3.0);
        for (frames, expected) in [(300, 6), (50, 1), (51, 2)] {
            let mut g = Graph::new(1);
            let p = store.bind(&mut g);
            let s = layer.sample_schedule(&mut g, &p, &Prior::standard(), frames, 50).unwrap();
            assert_eq!(s.draws.len(), expected);
        }
        let mut g = Graph::new(1);
        let p = store.bind(&mut g);
        let s = layer.sample_schedule(&mut g, &p, &Prior::standard(), 51, 50).unwrap();
        assert_eq!(s.draw_index(49), 0);
        assert_eq!(s.draw_index(50), 1);
        assert_eq!(s.window(1), (50, 51));
    }

    #[test]
    fn collapsed_posterior_matches_mean_pass() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = BayesLinear::new(&mut store, "b", 4, 3, (-0.1, 0.1), (-3.0, -2.0), &mut rng);
        layer.collapse_posterior(&mut store);
        let mut g = Graph::new(5);
        let p = store.bind_frozen(&mut g);
        let x = g.constant(uniform(&mut rng, &[7, 4], -1.0, 1.0));
        let (w, b) = layer.draw_weights(&mut g, &p).unwrap();
        let y_s = layer.forward_with(&mut g, x, w, b).unwrap();
        let y_m = layer.mean(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y_s), g.value(y_m));
    }

    #[test]
    fn kl_to_prior_single_weight() {
        let rho = (std::f64::consts::E - 1.0).ln();
        let (store, layer) = single_weight_layer(1.0, rho);
        // weight and bias each contribute (1 + 1)/2 - 0 - 1/2 = 0.5
        let kl = layer.params(&store).kl_to_prior(&Prior::standard());
        assert!((kl - 1.0).abs() < 1e-12);
    }
}

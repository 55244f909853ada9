//! Training objectives and evaluation metrics.
//!
//! Plain-`f64` versions are used for evaluation; the `*_graph` variants build
//! the same quantities on an autodiff [`Graph`] for training.
//!
//! The training objective is
//! `(1 - CCC(m_hat, m)) + [complexity + data fit] + alpha * KL(label || prediction)`.

use std::f64::consts::PI;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::labels::S_MIN;
use crate::layers::WeightSchedule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("standard deviations must be positive (got {0})")]
    NonPositiveSigma(f64),
    #[error("median filter window must be at least 1")]
    InvalidWindow,
    #[error("alpha must be non-negative and finite (got {0})")]
    InvalidAlpha(f64),
    #[error("no weight schedules supplied")]
    EmptySchedules,
    #[error(transparent)]
    Graph(#[from] AutodiffError),
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Concordance correlation coefficient with population moments.
///
/// Returns 1 when both sequences are the same constant (zero denominator).
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooShort { needed: 2, got: x.len() });
    }
    let (mx, my) = (mean(x), mean(y));
    let n = x.len() as f64;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    let denom = vx / n + vy / n + (mx - my).powi(2);
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * (cov / n) / denom)
}

/// Differentiable CCC of two `[T]` sequences.
pub fn ccc_graph(g: &mut Graph, x: Var, y: Var) -> Result<Var, AutodiffError> {
    let mx = g.mean(x, None)?;
    let my = g.mean(y, None)?;
    let vx = g.variance(x, None, 0)?;
    let vy = g.variance(y, None, 0)?;
    let dx = g.sub(x, mx)?;
    let dy = g.sub(y, my)?;
    let prod = g.mul(dx, dy)?;
    let cov = g.mean(prod, None)?;
    let bias = g.sub(mx, my)?;
    let bias_sq = g.square(bias)?;
    let denom = g.add(vx, vy)?;
    let denom = g.add(denom, bias_sq)?;
    let num = g.mul_scalar(cov, 2.0)?;
    g.div(num, denom)
}

/// Mean over sequences of `1 - CCC(label, prediction)`.
pub fn ccc_training_term(g: &mut Graph, predictions: &[Var], labels: &[Var]) -> Result<Var, MetricError> {
    if predictions.len() != labels.len() {
        return Err(MetricError::LengthMismatch(predictions.len(), labels.len()));
    }
    if predictions.is_empty() {
        return Err(MetricError::TooShort { needed: 1, got: 0 });
    }
    let mut terms = Vec::with_capacity(predictions.len());
    for (&p, &l) in predictions.iter().zip(labels) {
        let (lp, ll) = (g.value(p).len(), g.value(l).len());
        if lp != ll {
            return Err(MetricError::LengthMismatch(lp, ll));
        }
        if lp < 2 {
            return Err(MetricError::TooShort { needed: 2, got: lp });
        }
        let c = ccc_graph(g, l, p)?;
        terms.push(g.rsub_scalar(1.0, c)?);
    }
    let all = g.concat(&terms, 0)?;
    Ok(g.mean(all, None)?)
}

/// `KL(N(mu_p, sigma_p) || N(mu_q, sigma_q))`.
pub fn gaussian_kl(mu_p: f64, sigma_p: f64, mu_q: f64, sigma_q: f64) -> Result<f64, MetricError> {
    for s in [sigma_p, sigma_q] {
        if !(s > 0.0) {
            return Err(MetricError::NonPositiveSigma(s));
        }
    }
    Ok((sigma_q / sigma_p).ln() + (sigma_p * sigma_p + (mu_p - mu_q).powi(2)) / (2.0 * sigma_q * sigma_q) - 0.5)
}

/// Mean over frames of `KL(N(m, s) || N(m_hat, max(s_hat, S_MIN)))`.
pub fn kl_metric(m: &[f64], s: &[f64], m_hat: &[f64], s_hat: &[f64]) -> Result<f64, MetricError> {
    let n = m.len();
    for len in [s.len(), m_hat.len(), s_hat.len()] {
        if len != n {
            return Err(MetricError::LengthMismatch(n, len));
        }
    }
    if n == 0 {
        return Err(MetricError::TooShort { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for t in 0..n {
        total += gaussian_kl(m[t], s[t].max(S_MIN), m_hat[t], s_hat[t].max(S_MIN))?;
    }
    Ok(total / n as f64)
}

/// Differentiable per-element Gaussian KL, averaged. `m`, `s` are the label
/// moments (any shape matching the prediction moments).
pub fn gaussian_kl_graph(g: &mut Graph, m: Var, s: Var, m_hat: Var, s_hat: Var) -> Result<Var, AutodiffError> {
    let log_ratio = {
        let lq = g.log(s_hat)?;
        let lp = g.log(s)?;
        g.sub(lq, lp)?
    };
    let diff = g.sub(m, m_hat)?;
    let diff_sq = g.square(diff)?;
    let s_sq = g.square(s)?;
    let num = g.add(s_sq, diff_sq)?;
    let sh_sq = g.square(s_hat)?;
    let den = g.mul_scalar(sh_sq, 2.0)?;
    let frac = g.div(num, den)?;
    let kl = g.add(log_ratio, frac)?;
    let kl = g.add_scalar(kl, -0.5)?;
    g.mean(kl, None)
}

/// Differentiable sample moments of `samples: [n, frames]`: mean and
/// unbiased standard deviation per frame, the latter smoothly floored as
/// `sqrt(var + S_MIN^2)`.
pub fn sample_moments_graph(g: &mut Graph, samples: Var) -> Result<(Var, Var), MetricError> {
    let n = g.shape(samples)[0];
    if n < 2 {
        return Err(MetricError::TooShort { needed: 2, got: n });
    }
    let m_hat = g.mean(samples, Some(0))?;
    let var = g.variance(samples, Some(0), 1)?;
    let var = g.add_scalar(var, S_MIN * S_MIN)?;
    let s_hat = g.sqrt(var)?;
    Ok((m_hat, s_hat))
}

/// KL label loss: mean over frames of `KL((m_t, s_t) || (m_hat_t, s_hat_t))`
/// where the prediction moments come from `samples: [n, frames]`.
pub fn kl_label_loss(g: &mut Graph, m: &[f64], s: &[f64], samples: Var) -> Result<Var, MetricError> {
    let frames = g.shape(samples).get(1).copied().unwrap_or(0);
    if m.len() != frames || s.len() != frames {
        return Err(MetricError::LengthMismatch(m.len(), frames));
    }
    let (m_hat, s_hat) = sample_moments_graph(g, samples)?;
    let m = g.constant(Tensor::vector(m.to_vec())?);
    let s = g.constant(Tensor::vector(s.iter().map(|v| v.max(S_MIN)).collect())?);
    Ok(gaussian_kl_graph(g, m, s, m_hat, s_hat)?)
}

/// Mean Gaussian negative log-likelihood of `target` under `N(pred, sigma_obs)`.
pub fn gaussian_nll_graph(g: &mut Graph, target: Var, pred: Var, sigma_obs: f64) -> Result<Var, AutodiffError> {
    let diff = g.sub(target, pred)?;
    let sq = g.square(diff)?;
    let m = g.mean(sq, None)?;
    let scaled = g.mul_scalar(m, 0.5 / (sigma_obs * sigma_obs))?;
    g.add_scalar(scaled, sigma_obs.ln() + 0.5 * (2.0 * PI).ln())
}

/// Stochastic ELBO: `complexity_weight / n * sum(log q - log P)` over every
/// draw of every layer and pass, plus `data_fit`.
///
/// `schedules` holds one entry per (pass, layer); `passes` is `n`.
pub fn bbb_loss(
    g: &mut Graph,
    schedules: &[WeightSchedule],
    passes: usize,
    complexity_weight: f64,
    data_fit: Var,
) -> Result<Var, MetricError> {
    if schedules.is_empty() || passes == 0 {
        return Err(MetricError::EmptySchedules);
    }
    let mut parts = Vec::with_capacity(schedules.len());
    for s in schedules {
        parts.push(s.complexity(g)?);
    }
    let all = g.concat(&parts, 0)?;
    let total = g.sum(all, None)?;
    let scaled = g.mul_scalar(total, complexity_weight / passes as f64)?;
    Ok(g.add(scaled, data_fit)?)
}

/// Closed-form `KL(N(mu, sigma) || N(0, 1))` summed over coordinates.
pub fn complexity_closed_form(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| (s * s + m * m) / 2.0 - s.ln() - 0.5)
        .sum()
}

/// Components of the combined loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub ccc_term: f64,
    pub bbb_term: f64,
    pub kl_term: f64,
    pub alpha: f64,
    pub total: f64,
}

/// `ccc + bbb + alpha * kl`; with `alpha = 0` the KL term is left out
/// entirely rather than multiplied by zero.
pub fn total_loss(ccc_term: f64, bbb_term: f64, kl_term: f64, alpha: f64) -> Result<LossBreakdown, MetricError> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(MetricError::InvalidAlpha(alpha));
    }
    let mut total = ccc_term + bbb_term;
    if alpha > 0.0 {
        total += alpha * kl_term;
    }
    Ok(LossBreakdown {
        ccc_term,
        bbb_term,
        kl_term,
        alpha,
        total,
    })
}

/// Graph counterpart of [`total_loss`].
pub fn total_loss_graph(g: &mut Graph, ccc_term: Var, bbb_term: Var, kl_term: Option<Var>, alpha: f64) -> Result<Var, MetricError> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(MetricError::InvalidAlpha(alpha));
    }
    let base = g.add(ccc_term, bbb_term)?;
    match kl_term {
        Some(kl) if alpha > 0.0 => {
            let weighted = g.mul_scalar(kl, alpha)?;
            Ok(g.add(base, weighted)?)
        }
        _ => Ok(base),
    }
}

/// Centered sliding median. The window spans `(w - 1) / 2` frames before
/// and `w / 2` after each frame, truncated at the edges; even counts average
/// the two central values.
pub fn median_filter(seq: &[f64], window: usize) -> Result<Vec<f64>, MetricError> {
    if seq.is_empty() {
        return Err(MetricError::TooShort { needed: 1, got: 0 });
    }
    if window == 0 {
        return Err(MetricError::InvalidWindow);
    }
    let before = (window - 1) / 2;
    let after = window / 2;
    let n = seq.len();
    let mut sorted: Vec<f64> = Vec::with_capacity(window);
    let (mut lo, mut hi) = (0usize, 0usize); // current window [lo, hi)
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let want_lo = t.saturating_sub(before);
        let want_hi = (t + after + 1).min(n);
        while hi < want_hi {
            let v = seq[hi];
            let pos = sorted.partition_point(|&x| x < v);
            sorted.insert(pos, v);
            hi += 1;
        }
        while lo < want_lo {
            let v = seq[lo];
            let pos = sorted.partition_point(|&x| x < v);
            sorted.remove(pos);
            lo += 1;
        }
        let k = sorted.len();
        out.push(if k % 2 == 1 {
            sorted[k / 2]
        } else {
            0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ccc_identities() {
        let v = [0.3, -0.1, 0.8, 0.2, -0.5];
        assert!((ccc(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let zm: Vec<f64> = {
            let m = mean(&v);
            v.iter().map(|x| x - m).collect()
        };
        let neg: Vec<f64> = zm.iter().map(|x| -x).collect();
        assert!((ccc(&zm, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ccc(&[0.4; 5], &v).unwrap(), 0.0);
        assert_eq!(ccc(&[0.4; 3], &[0.4; 3]).unwrap(), 1.0);
    }

    #[test]
    fn ccc_errors() {
        assert_eq!(ccc(&[1.0, 2.0], &[1.0]), Err(MetricError::LengthMismatch(2, 1)));
        assert!(matches!(ccc(&[1.0], &[1.0]), Err(MetricError::TooShort { .. })));
    }

    #[test]
    fn ccc_penalizes_bias() {
        let v = [0.3, -0.1, 0.8, 0.2, -0.5];
        let shifted: Vec<f64> = v.iter().map(|x| x + 0.2).collect();
        assert!(ccc(&v, &shifted).unwrap() < 1.0);
    }

    #[test]
    fn training_term_values() {
        let mut g = Graph::new(0);
        let v: Vec<f64> = vec![0.5, -0.2, 0.1, -0.4];
        let p = g.constant(Tensor::vector(v.clone()).unwrap());
        let l = g.constant(Tensor::vector(v.clone()).unwrap());
        let neg = g.constant(Tensor::vector(v.iter().map(|x| -x).collect()).unwrap());
        let perfect = ccc_training_term(&mut g, &[p], &[l]).unwrap();
        assert!(g.value(perfect).item().unwrap().abs() < 1e-15);
        // v has zero mean
        let anti = ccc_training_term(&mut g, &[neg], &[l]).unwrap();
        assert!((g.value(anti).item().unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(gaussian_kl(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((gaussian_kl(0.0, 1.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((gaussian_kl(0.0, 2.0, 0.0, 1.0).unwrap() - 0.806_853).abs() < 1e-6);
        assert!(matches!(gaussian_kl(0.0, 0.0, 0.0, 1.0), Err(MetricError::NonPositiveSigma(_))));
        assert!(gaussian_kl(0.0, 1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn kl_label_loss_single_frame() {
        let mut g = Graph::new(0);
        // samples with mean 1 and unbiased std 1
        let samples = g.constant(Tensor::new(vec![2, 1], vec![1.0 - 0.5f64.sqrt(), 1.0 + 0.5f64.sqrt()]).unwrap());
        let loss = kl_label_loss(&mut g, &[0.0], &[1.0], samples).unwrap();
        assert!((g.value(loss).item().unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kl_label_loss_needs_two_samples() {
        let mut g = Graph::new(0);
        let samples = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            kl_label_loss(&mut g, &[0.0; 3], &[1.0; 3], samples),
            Err(MetricError::TooShort { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn total_loss_alpha_handling() {
        let mu = total_loss(0.3, 0.2, 123.0, 0.0).unwrap();
        assert_eq!(mu.total, 0.5);
        let lu = total_loss(0.3, 0.2, 0.1, 1.0).unwrap();
        assert_eq!(lu.total, 0.3 + 0.2 + 0.1);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 1.0).unwrap().total, 0.0);
        assert!(total_loss(0.0, 0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_filter(&[1.0, 9.0, 1.0, 1.0], 3).unwrap(), vec![5.0, 1.0, 1.0, 1.0]);
        assert_eq!(median_filter(&[0.2; 7], 4).unwrap(), vec![0.2; 7]);
        assert!(median_filter(&[], 3).is_err());
        assert!(median_filter(&[1.0], 0).is_err());
    }

    #[test]
    fn closed_form_complexity_single_weight() {
        assert!((complexity_closed_form(&[1.0], &[1.0]) - 0.5).abs() < 1e-15);
    }
}

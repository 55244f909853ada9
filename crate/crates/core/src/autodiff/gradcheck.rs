use super::{AutodiffError, Graph, OpAttrs, OpTag, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckReport {
    /// Maximum over checked coordinates of
    /// `|analytic - numeric| / max(1, |analytic|)`.
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// Failing coordinates whose finite differences never settled because a
    /// kink (relu at 0, a max-pool tie) sits within the smallest step.
    pub kinks_skipped: usize,
}

/// Ratio between successive steps when a coordinate is re-examined.
const STEP_SHRINK: f64 = 0.1;

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(1.0)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` maps leaf variables (one per entry of `point`) to any tensor; that
/// tensor is contracted with fixed pseudo-random weights to get a scalar.
/// The graph seed is fixed, so stochastic builders are replayed identically
/// for every perturbation.
///
/// A coordinate whose step-`eps` estimate misses the analytic value by more
/// than `tolerance` is re-examined with `eps / 10`. If the two estimates
/// agree the function is smooth there and the miss stands. If they differ, a
/// kink lies inside the wider stencil: the `eps / 10` estimate replaces it
/// when `eps / 100` confirms it, otherwise the coordinate is counted as
/// skipped. Smaller steps are only taken in that case because roundoff
/// grows as `|f| / h`. Points exactly on a kink are the caller's to avoid.
pub fn gradcheck_report<F>(
    point: &[Tensor],
    eps: f64,
    tolerance: f64,
    seed: u64,
    f: F,
) -> Result<GradcheckReport, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(AutodiffError::InvalidEpsilon(eps));
    }
    let evaluate = |inputs: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>), AutodiffError> {
        let mut g = Graph::new(seed);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = f(&mut g, &vars)?;
        let n = g.value(out).len();
        let weights = Tensor::from_parts(g.value(out).shape().to_vec(), contraction_weights(n));
        let w = g.constant(weights);
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod, None)?;
        let value = g.value(loss).data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).cloned().expect("leaf gradient"))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = evaluate(point, true)?;
    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        coordinates: 0,
        kinks_skipped: 0,
    };
    let mut probe = point.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for coord in 0..point[which].len() {
            let orig = point[which].data()[coord];
            let mut central = |h: f64| -> Result<f64, AutodiffError> {
                probe[which].data_mut()[coord] = orig + h;
                let (plus, _) = evaluate(&probe, false)?;
                probe[which].data_mut()[coord] = orig - h;
                let (minus, _) = evaluate(&probe, false)?;
                probe[which].data_mut()[coord] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let a = grads.data()[coord];
            report.coordinates += 1;
            let wide = central(eps)?;
            let mut err = relative(a, wide);
            if err > tolerance {
                let narrow = central(eps * STEP_SHRINK)?;
                if relative(narrow, wide) > tolerance {
                    let narrower = central(eps * STEP_SHRINK * STEP_SHRINK)?;
                    if relative(narrower, narrow) > tolerance {
                        report.kinks_skipped += 1;
                        continue;
                    }
                    err = relative(a, narrow);
                }
            }
            report.max_relative_error = report.max_relative_error.max(err);
        }
    }
    Ok(report)
}

/// Plain maximum relative error against step-`eps` central differences.
pub fn gradcheck_fn<F>(point: &[Tensor], eps: f64, seed: u64, f: F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    Ok(gradcheck_report(point, eps, f64::INFINITY, seed, f)?.max_relative_error)
}

/// Gradient check of one primitive at `point`.
pub fn gradcheck(op: OpTag, point: &[Tensor], attrs: &OpAttrs, eps: f64) -> Result<f64, AutodiffError> {
    if op == OpTag::Leaf {
        return Err(AutodiffError::UnsupportedOp(op));
    }
    gradcheck_fn(point, eps, 0, |g, vars| g.apply(op, vars, attrs))
}

/// Deterministic weights in roughly [-1, 1], never zero.
fn contraction_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.3 + 0.7 * ((i as f64) * 1.618_033_988_75 + 0.5).sin()).collect()
}

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Input index and flat coordinate where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    /// Coordinates compared.
    pub coordinates: usize,
    /// Coordinates left out because every probe step crossed a kink.
    pub skipped: usize,
    /// Compared coordinates whose gradient is too small for a central
    /// difference to resolve to [`RESOLUTION`]; they are held to the rounding
    /// bound instead of the relative error.
    pub unresolved: usize,
    /// Unresolved coordinates that disagree by more than the rounding bound.
    pub noise_violations: usize,
}

impl GradCheckReport {
    /// Relative error below `tol`, no rounding-bound violations, and at most a
    /// tenth of the coordinates lost to kinks.
    pub fn passes(&self, tol: f64) -> bool {
        self.coordinates > self.unresolved
            && self.max_rel_error < tol
            && self.noise_violations == 0
            && self.skipped * 10 <= self.coordinates
    }
}

/// Each coordinate is probed with `eps`, then with smaller steps if the
/// perturbation moved any ReLU/abs/clamp input across its kink.
const STEP_SHRINK: [f64; 3] = [1.0, 0.1, 0.01];

/// A coordinate counts as resolved when rounding alone contributes at most
/// this relative error to its central difference.
pub const RESOLUTION: f64 = 1e-4;

/// Headroom on the measured rounding level.
const NOISE_SAFETY: f64 = 4.0;

/// Relative nudge of the probe point used to measure rounding noise.
const NUDGE: f64 = 1.0 / (1u64 << 20) as f64;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if !v.shape().is_scalar() {
        return Err(Error::shape("grad_check", format!("function must return a scalar, got {}", v.shape())));
    }
    Ok((v.item(), g.regime_signature()))
}

/// Compare reverse-mode gradients of scalar-valued `f` against central
/// differences `(f(x+eps) − f(x−eps)) / 2eps`, over every input coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_coords(&f, inputs, eps, &coords)
}

/// Like [`grad_check`] but probes at most `per_input` seeded coordinates of
/// each input, for networks too large to difference exhaustively.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor<f64>], eps: f64, per_input: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = SplitMix64::new(seed);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.len() <= per_input {
                (0..t.len()).collect()
            } else {
                (0..per_input).map(|_| rng.below(t.len() as u64) as usize).collect()
            }
        })
        .collect();
    check_coords(&f, inputs, eps, &coords)
}

fn check_coords<F>(f: &F, inputs: &[Tensor<f64>], eps: f64, coords: &[Vec<usize>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("grad_check eps {eps} must be positive")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let base = g.regime_signature();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);
    // Probe every coordinate first. Re-evaluating at a point nudged by a
    // millionth of the step changes `f` by far less than rounding does, so the
    // residual after removing the slope measures this function's rounding level.
    struct Probe {
        at: (usize, usize),
        numeric: f64,
        h: f64,
        scale: f64,
    }
    let mut probes = Vec::new();
    let mut skipped = 0;
    let mut rounding = f64::EPSILON;
    let mut probe = inputs.to_vec();
    for (i, idxs) in coords.iter().enumerate() {
        for &j in idxs {
            let orig = probe[i].data()[j];
            let mut found = None;
            for shrink in STEP_SHRINK {
                let h = eps * shrink;
                probe[i].data_mut()[j] = orig + h;
                let (plus, sp) = evaluate(f, &probe)?;
                probe[i].data_mut()[j] = orig - h;
                let (minus, sm) = evaluate(f, &probe)?;
                if sp == base && sm == base {
                    found = Some((h, plus, minus));
                    break;
                }
            }
            let Some((h, plus, minus)) = found else {
                probe[i].data_mut()[j] = orig;
                skipped += 1;
                continue;
            };
            let numeric = (plus - minus) / (2.0 * h);
            let step = h * NUDGE;
            probe[i].data_mut()[j] = orig + h + step;
            let (nudged, sn) = evaluate(f, &probe)?;
            probe[i].data_mut()[j] = orig;
            if sn == base && plus != 0.0 {
                rounding = rounding.max((nudged - plus - numeric * step).abs() / plus.abs());
            }
            probes.push(Probe { at: (i, j), numeric, h, scale: plus.abs() + minus.abs() });
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: probes.len(),
        skipped,
        unresolved: 0,
        noise_violations: 0,
    };
    for p in probes {
        let (i, j) = p.at;
        let a = analytic[i].data()[j];
        let noise = NOISE_SAFETY * rounding * p.scale / (2.0 * p.h);
        // Two exact zeros agree exactly, typically a dead ReLU channel.
        let exact_zero = a == 0.0 && p.numeric == 0.0;
        if !exact_zero && a.abs().max(p.numeric.abs()) * RESOLUTION < noise {
            report.unresolved += 1;
            if (a - p.numeric).abs() > noise {
                report.noise_violations += 1;
            }
            continue;
        }
        let err = rel_error(a, p.numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((i, j));
            report.worst_values = (a, p.numeric);
        }
    }
    Ok(report)
}

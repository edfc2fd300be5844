//! Limited-memory BFGS with Armijo backtracking over a feasible region.
//!
//! The objective callback returns `None` for infeasible points (for meshes:
//! a tetrahedron that would collapse or invert); the line search treats those
//! like a failed sufficient-decrease test and keeps halving the step.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    /// Number of correction pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when `max|g| <= gradient_tolerance * max(1, |f|)`.
    pub gradient_tolerance: f64,
    /// Stop when an iteration decreases `f` by less than this fraction of `max(1, |f|)`.
    pub relative_decrease_tolerance: f64,
    /// Largest coordinate change of the first trial step.
    pub max_step: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Failed line searches that may be retried along a gradient averaged
    /// across the suspected kink.
    pub kink_retries: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 100,
            gradient_tolerance: 1e-6,
            relative_decrease_tolerance: 1e-10,
            max_step: 1.0,
            armijo: 1e-4,
            max_backtracks: 40,
            kink_retries: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// No step was accepted and the start is not stationary; `x` is the
    /// starting point.
    pub line_search_failed: bool,
}

const STATIONARY_DECREASE: f64 = 1e-9;
/// Largest coordinate change of the probe step across a kink.
const KINK_PROBE: f64 = 1e-6;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `eval` starting from `x0`. The starting point must be feasible.
pub fn minimize<F>(x0: Vec<f64>, cfg: &LbfgsConfig, mut eval: F) -> Option<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let (mut f, mut g) = eval(&x0)?;
    let mut evaluations = 1;
    let mut x = x0;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;
    let mut converged = false;
    let mut kink_retries = 0;
    let mut forced: Option<Vec<f64>> = None;

    while iterations < cfg.max_iters {
        if forced.is_none() && max_abs(&g) <= cfg.gradient_tolerance * f.abs().max(1.0) {
            converged = true;
            break;
        }
        let mut direction = forced.take().unwrap_or_else(|| two_loop(&g, &history));
        let mut slope = dot(&g, &direction);
        if !(slope < 0.0) {
            history.clear();
            direction = g.iter().map(|v| -v).collect();
            slope = dot(&g, &direction);
        }
        let mut alpha = 1.0;
        let step_size = max_abs(&direction);
        if history.is_empty() && step_size > cfg.max_step {
            alpha = cfg.max_step / step_size;
        }

        let predicted = alpha * slope.abs();
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let trial: Vec<f64> = x
                .iter()
                .zip(&direction)
                .map(|(a, d)| a + alpha * d)
                .collect();
            evaluations += 1;
            if let Some((ft, gt)) = eval(&trial) {
                if ft <= f + cfg.armijo * alpha * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // A full step promising less than rounding noise is a stationary point.
            if predicted <= STATIONARY_DECREASE * f.abs().max(1.0) {
                converged = true;
                break;
            }
            // Otherwise `x` most likely sits on a kink of a piecewise-smooth
            // objective: average the gradients on both sides of it and retry
            // along the result, which cancels the kink's contribution.
            if kink_retries < cfg.kink_retries {
                kink_retries += 1;
                let h = KINK_PROBE / step_size.max(f64::MIN_POSITIVE);
                let probe: Vec<f64> = x.iter().zip(&direction).map(|(a, d)| a + h * d).collect();
                evaluations += 1;
                if let Some((_, g_probe)) = eval(&probe) {
                    let avg: Vec<f64> = g
                        .iter()
                        .zip(&g_probe)
                        .map(|(a, b)| -(a + b) / 2.0)
                        .collect();
                    if dot(&g, &avg) < 0.0 {
                        history.clear();
                        forced = Some(avg);
                        continue;
                    }
                }
            }
            break;
        };
        iterations += 1;

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let decrease = f - f_new;
        x = x_new;
        f = f_new;
        g = g_new;
        if decrease <= cfg.relative_decrease_tolerance * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    let line_search_failed = iterations == 0 && !converged;
    Some(LbfgsOutcome {
        x,
        f,
        iterations,
        evaluations,
        converged,
        line_search_failed,
    })
}

/// Two-loop recursion: returns `-H g` with the scaled-identity initial Hessian.
fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in &mut q {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

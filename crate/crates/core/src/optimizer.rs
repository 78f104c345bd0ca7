//! Unconstrained gradient-based minimization over log-hyperparameters.
//!
//! The default method is Polak–Ribière nonlinear conjugate gradients with a
//! strong-Wolfe line search, restarted every `n + 2` iterations. L-BFGS is
//! available as an alternative. Both count every objective evaluation
//! against a shared budget.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Hyperparams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimMethod {
    #[default]
    ConjugateGradient,
    Lbfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Budget of objective evaluations, including the one at the start point.
    pub max_evals: usize,
    /// Stop once the gradient infinity-norm falls below this.
    pub grad_tolerance: f64,
    /// Start point; `None` means [`Hyperparams::default_for_dim`].
    pub initial_hp: Option<Hyperparams>,
    pub seed: u64,
    pub method: OptimMethod,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_evals: 500,
            grad_tolerance: 1e-6,
            initial_hp: None,
            seed: 0,
            method: OptimMethod::ConjugateGradient,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_evals < 1 {
            return Err(Error::InvalidConfig {
                field: "max_evals",
                message: "must be at least 1".into(),
            });
        }
        if !(self.grad_tolerance > 0.0) {
            return Err(Error::InvalidConfig {
                field: "grad_tolerance",
                message: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn start_point(&self, dim: usize) -> Result<Hyperparams> {
        match &self.initial_hp {
            Some(hp) => {
                hp.check_dim("initial hyperparameters", dim)?;
                Ok(hp.clone())
            }
            None => Ok(Hyperparams::default_for_dim(dim)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub best_hp: Hyperparams,
    pub best_value: f64,
    pub evals_used: usize,
    /// Objective value at the start point and after each accepted step.
    pub trace: Vec<f64>,
    /// True when the gradient tolerance was met.
    pub converged: bool,
}

/// Minimizes `objective` over hyperparameters starting from `config.initial_hp`
/// (or the default start for `dim` input dimensions).
pub fn minimize<F>(mut objective: F, dim: usize, config: &OptimizerConfig) -> Result<OptimResult>
where
    F: FnMut(&Hyperparams) -> Result<(f64, DVector<f64>)>,
{
    config.validate()?;
    let start = config.start_point(dim)?;
    let x0 = start.to_vector();
    let mut wrapped = |v: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        objective(&Hyperparams::from_slice(v.as_slice())?)
    };
    let out = minimize_vector(&mut wrapped, x0, config)?;
    Ok(OptimResult {
        best_hp: Hyperparams::from_slice(out.x.as_slice())?,
        best_value: out.value,
        evals_used: out.evals,
        trace: out.trace,
        converged: out.converged,
    })
}

/// Result of [`minimize_vector`].
#[derive(Debug, Clone)]
pub struct VectorOptimResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub evals: usize,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Counts evaluations and maps errors or non-finite results to `None` after the start point.
struct Counted<'a, F> {
    f: &'a mut F,
    evals: usize,
    budget: usize,
}

impl<F> Counted<'_, F>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    fn remaining(&self) -> usize {
        self.budget.saturating_sub(self.evals)
    }

    fn eval(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        self.evals += 1;
        match (self.f)(x) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|c| c.is_finite()) => Some((v, g)),
            Ok(_) => None,
            Err(e) => {
                log::debug!("objective failed during line search: {e}");
                None
            }
        }
    }
}

/// Minimizes over a plain vector; the building block behind [`minimize`].
pub fn minimize_vector<F>(
    objective: &mut F,
    x0: DVector<f64>,
    config: &OptimizerConfig,
) -> Result<VectorOptimResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    config.validate()?;
    let (f0, g0) = objective(&x0)?;
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidStart { value: f0 });
    }
    let mut counted = Counted {
        f: objective,
        evals: 1,
        budget: config.max_evals,
    };
    let n = x0.len();
    let mut state = State {
        x: x0,
        f: f0,
        g: g0,
    };
    let mut trace = vec![f0];
    let mut converged = state.g.amax() < config.grad_tolerance;

    let mut direction = -&state.g;
    let mut prev_slope: Option<f64> = None;
    let mut prev_step = 0.0;
    let mut since_restart = 0usize;
    // L-BFGS memory of (s, y, 1/yᵀs)
    let mut memory: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::new();
    const LBFGS_MEMORY: usize = 10;

    while !converged && counted.remaining() > 0 {
        let mut slope = state.g.dot(&direction);
        if !(slope < 0.0) {
            direction = -&state.g;
            slope = -state.g.norm_squared();
            since_restart = 0;
            memory.clear();
        }

        let initial_step = match (config.method, prev_slope) {
            (OptimMethod::Lbfgs, Some(_)) => 1.0,
            (_, Some(ps)) => (prev_step * ps / slope).clamp(1e-10, 1e10),
            (_, None) => (1.0 / direction.amax()).min(1.0),
        };
        let c2 = match config.method {
            OptimMethod::ConjugateGradient => 0.1,
            OptimMethod::Lbfgs => 0.9,
        };

        let accepted = line_search(&mut counted, &state, &direction, slope, initial_step, c2);
        let Some((step, f_new, g_new)) = accepted else {
            if since_restart == 0 && memory.is_empty() {
                // steepest descent already failed to decrease the objective
                break;
            }
            direction = -&state.g;
            since_restart = 0;
            memory.clear();
            prev_slope = None;
            continue;
        };

        let s = &direction * step;
        let y = &g_new - &state.g;
        let x_new = &state.x + &s;
        let g_old = std::mem::replace(&mut state.g, g_new);
        state.x = x_new;
        state.f = f_new;
        trace.push(f_new);
        prev_slope = Some(slope);
        prev_step = step;
        since_restart += 1;

        if state.g.amax() < config.grad_tolerance {
            converged = true;
            break;
        }

        direction = match config.method {
            OptimMethod::ConjugateGradient => {
                let beta = if since_restart >= n + 2 {
                    since_restart = 0;
                    0.0
                } else {
                    (state.g.dot(&y) / g_old.norm_squared()).max(0.0)
                };
                -&state.g + &direction * beta
            }
            OptimMethod::Lbfgs => {
                let ys = y.dot(&s);
                if ys > 1e-12 * y.norm() * s.norm() {
                    if memory.len() == LBFGS_MEMORY {
                        memory.remove(0);
                    }
                    memory.push((s, y, 1.0 / ys));
                }
                lbfgs_direction(&state.g, &memory)
            }
        };
    }

    Ok(VectorOptimResult {
        x: state.x,
        value: state.f,
        evals: counted.evals,
        trace,
        converged,
    })
}

struct State {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

fn lbfgs_direction(g: &DVector<f64>, memory: &[(DVector<f64>, DVector<f64>, f64)]) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.last() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BRACKET_STEPS: usize = 20;
const MAX_ZOOM_STEPS: usize = 30;

struct Probe {
    step: f64,
    value: f64,
    slope: f64,
    grad: Option<DVector<f64>>,
}

/// Strong-Wolfe line search. Returns an accepted step that satisfies the
/// sufficient-decrease condition, or `None` if no decrease was found within budget.
fn line_search<F>(
    counted: &mut Counted<'_, F>,
    state: &State,
    direction: &DVector<f64>,
    slope0: f64,
    initial_step: f64,
    c2: f64,
) -> Option<(f64, f64, DVector<f64>)>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let f0 = state.f;
    let armijo = |step: f64, value: f64| value <= f0 + ARMIJO_C1 * step * slope0;
    let curvature_ok = |slope: f64| slope.abs() <= -c2 * slope0;

    let probe = |counted: &mut Counted<'_, F>, step: f64| -> Probe {
        let x = &state.x + direction * step;
        match counted.eval(&x) {
            Some((value, grad)) => Probe {
                step,
                value,
                slope: grad.dot(direction),
                grad: Some(grad),
            },
            None => Probe {
                step,
                value: f64::INFINITY,
                slope: f64::NAN,
                grad: None,
            },
        }
    };

    let mut lo = Probe {
        step: 0.0,
        value: f0,
        slope: slope0,
        grad: None,
    };
    let mut step = initial_step;
    let mut hi: Option<Probe> = None;

    for _ in 0..MAX_BRACKET_STEPS {
        if counted.remaining() == 0 {
            break;
        }
        let p = probe(counted, step);
        if !armijo(p.step, p.value) || p.value >= lo.value && lo.step > 0.0 {
            hi = Some(p);
            break;
        }
        if curvature_ok(p.slope) {
            return accept(p);
        }
        if p.slope >= 0.0 {
            let old_lo = std::mem::replace(&mut lo, p);
            hi = Some(old_lo);
            break;
        }
        lo = p;
        step *= 2.0;
    }

    let Some(mut hi) = hi else {
        return accept_lo(lo);
    };

    for _ in 0..MAX_ZOOM_STEPS {
        if counted.remaining() == 0 {
            break;
        }
        let (a, b) = (lo.step.min(hi.step), lo.step.max(hi.step));
        let width = b - a;
        if width <= 1e-14 * b.max(1e-300) {
            break;
        }
        let trial = interpolate(&lo, &hi).clamp(a + 0.1 * width, b - 0.1 * width);
        let p = probe(counted, trial);
        if !armijo(p.step, p.value) || p.value >= lo.value {
            hi = p;
            continue;
        }
        if curvature_ok(p.slope) {
            return accept(p);
        }
        if p.slope * (hi.step - lo.step) >= 0.0 {
            hi = std::mem::replace(&mut lo, p);
        } else {
            lo = p;
        }
    }
    accept_lo(lo)
}

fn accept(p: Probe) -> Option<(f64, f64, DVector<f64>)> {
    p.grad.map(|g| (p.step, p.value, g))
}

fn accept_lo(lo: Probe) -> Option<(f64, f64, DVector<f64>)> {
    if lo.step > 0.0 {
        accept(lo)
    } else {
        None
    }
}

/// Cubic interpolation minimizer between two probes, falling back to bisection.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let mid = 0.5 * (lo.step + hi.step);
    if !hi.value.is_finite() || !hi.slope.is_finite() {
        return mid;
    }
    let (a, fa, da) = (lo.step, lo.value, lo.slope);
    let (b, fb, db) = (hi.step, hi.value, hi.slope);
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return mid;
    }
    let d2 = disc.sqrt() * (b - a).signum();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let t = b - (b - a) * (db + d2 - d1) / denom;
    if t.is_finite() {
        t
    } else {
        mid
    }
}

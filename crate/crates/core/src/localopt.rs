//! Box-constrained smooth minimisation: projected L-BFGS with an Armijo
//! backtracking search along the projected path.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// A smooth objective on `lower <= x <= upper`.
pub trait BoxProblem {
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    /// Value at `x`, with the gradient written into `grad`.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn dim(&self) -> usize {
        self.lower().len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinimizeOptions {
    pub max_iter: usize,
    /// Tolerance on the infinity norm of the projected gradient.
    pub gtol: f64,
    pub memory: usize,
    /// Stop when a step lowers the value by less than `ftol * max(|f|, 1)`.
    pub ftol: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            gtol: 1e-8,
            memory: 10,
            ftol: 1e-15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// True when the projected-gradient test was met.
    pub converged: bool,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 50;

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| (x[i] - (x[i] - g[i]).clamp(lo[i], hi[i])).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Local minimiser of `p` starting from the projection of `x0` onto the box.
pub fn minimize(p: &dyn BoxProblem, x0: &[f64], opts: &MinimizeOptions) -> Result<Minimum> {
    let (lo, hi) = (p.lower(), p.upper());
    let n = p.dim();
    if x0.len() != n || hi.len() != n || (0..n).any(|i| lo[i] > hi[i]) {
        return Err(Error::InvalidConfig(
            "box bounds and starting point disagree".into(),
        ));
    }
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let mut g = vec![0.0; n];
    let mut f = p.value_grad(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut free = vec![true; n];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        if projected_gradient_norm(&x, &g, lo, hi) <= opts.gtol {
            converged = true;
            break;
        }
        // Variables pinned at a bound by the gradient stay fixed this step.
        for i in 0..n {
            free[i] = !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0));
        }
        let mut steepest = history.is_empty();
        let mut accepted = false;
        for _attempt in 0..2 {
            if steepest {
                for i in 0..n {
                    dir[i] = if free[i] { -g[i] } else { 0.0 };
                }
            } else {
                two_loop(&history, &g, &free, &mut dir);
                if dot(&dir, &g) >= 0.0 {
                    steepest = true;
                    history.clear();
                    continue;
                }
            }
            let mut t = if steepest && history.is_empty() {
                let norm = dir.iter().map(|v| v.abs()).fold(0.0, f64::max);
                if norm > 0.0 {
                    (1.0 / norm).min(1.0)
                } else {
                    1.0
                }
            } else {
                1.0
            };
            for _ in 0..MAX_BACKTRACK {
                for i in 0..n {
                    x_new[i] = (x[i] + t * dir[i]).clamp(lo[i], hi[i]);
                }
                let f_new = p.value_grad(&x_new, &mut g_new);
                let decrease: f64 = (0..n).map(|i| g[i] * (x_new[i] - x[i])).sum();
                if f_new.is_finite()
                    && g_new.iter().all(|v| v.is_finite())
                    && f_new <= f + ARMIJO * decrease
                {
                    accepted = f_new <= f;
                    if accepted {
                        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
                        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
                        let sy = dot(&s, &y);
                        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                            if history.len() == opts.memory.max(1) {
                                history.pop_front();
                            }
                            history.push_back((s, y, 1.0 / sy));
                        }
                        let small = f - f_new <= opts.ftol * f.abs().max(1.0);
                        std::mem::swap(&mut x, &mut x_new);
                        std::mem::swap(&mut g, &mut g_new);
                        f = f_new;
                        if small {
                            iterations += 1;
                            return Ok(finish(p, x, f, g, iterations, opts));
                        }
                    }
                    break;
                }
                t *= 0.5;
            }
            if accepted || steepest {
                break;
            }
            steepest = true;
            history.clear();
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    Ok(Minimum {
        converged: converged || projected_gradient_norm(&x, &g, lo, hi) <= opts.gtol,
        x,
        value: f,
        iterations,
    })
}

fn finish(
    p: &dyn BoxProblem,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    iterations: usize,
    opts: &MinimizeOptions,
) -> Minimum {
    Minimum {
        converged: projected_gradient_norm(&x, &g, p.lower(), p.upper()) <= opts.gtol,
        x,
        value: f,
        iterations,
    }
}

/// `dir = -H g` on the free variables, with the curvature pairs restricted
/// to them as well.
fn two_loop(
    history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    g: &[f64],
    free: &[bool],
    dir: &mut [f64],
) {
    let n = g.len();
    let masked =
        |v: &[f64], w: &[f64]| -> f64 { (0..n).filter(|&i| free[i]).map(|i| v[i] * w[i]).sum() };
    let mut q: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, _) in history.iter().rev() {
        let sy = masked(s, y);
        if sy <= 0.0 {
            alphas.push(None);
            continue;
        }
        let a = masked(s, &q) / sy;
        for i in 0..n {
            if free[i] {
                q[i] -= a * y[i];
            }
        }
        alphas.push(Some((a, sy)));
    }
    let gamma = history
        .back()
        .map(|(s, y, _)| {
            let (sy, yy) = (masked(s, y), masked(y, y));
            if sy > 0.0 && yy > 0.0 {
                sy / yy
            } else {
                1.0
            }
        })
        .unwrap_or(1.0);
    q.iter_mut().for_each(|v| *v *= gamma);
    for ((s, y, _), a) in history.iter().zip(alphas.iter().rev()) {
        if let Some((a, sy)) = a {
            let b = masked(y, &q) / sy;
            for i in 0..n {
                if free[i] {
                    q[i] += (a - b) * s[i];
                }
            }
        }
    }
    for i in 0..n {
        dir[i] = if free[i] { -q[i] } else { 0.0 };
    }
}

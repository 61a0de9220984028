//! The sliding Frank-Wolfe loop.
//!
//! Each outer iteration linearises the data term at the current measure,
//! asks the mesh oracle for the `k` best candidate paths, slides each one
//! on the linearised objective, inserts it with an exact line search, and
//! finally slides all atoms and re-fits their weights on the true energy.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, GradientFields};
use crate::localopt::{minimize, BoxProblem, MinimizeOptions};
use crate::measures::{
    consolidate, energy, Atom, AtomicMeasure, EnergyReport, FeasibleConfig, DEDUP_TOL,
};
use crate::oracle::{dp_shortest_paths, random_mesh_with, uniform_mesh, Mesh};
use crate::paths::{KnotPath, TimeGrid};
use crate::transport::StepCost;

/// How the oracle mesh is built each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MeshStrategy {
    /// Fresh random nodes every iteration: `max(m, 1) n^d` per layer.
    Random {
        k: usize,
        n: usize,
        m: usize,
        seed: u64,
    },
    /// A lattice refined from `min(16, n)` up to `n` whenever progress stalls.
    Uniform { k: usize, n: usize, m: usize },
}

impl MeshStrategy {
    pub fn k(&self) -> usize {
        match *self {
            Self::Random { k, .. } | Self::Uniform { k, .. } => k,
        }
    }

    pub fn n(&self) -> usize {
        match *self {
            Self::Random { n, .. } | Self::Uniform { n, .. } => n,
        }
    }

    pub fn m(&self) -> usize {
        match *self {
            Self::Random { m, .. } | Self::Uniform { m, .. } => m,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub mesh: MeshStrategy,
    pub cost: StepCost,
    pub phi0: f64,
    pub max_iters: usize,
    /// Options for both sliding steps.
    pub slide: MinimizeOptions,
    /// Atoms closer than this in path distance are merged.
    pub dedup_tol: f64,
    /// Relative energy decrease counted as a stall.
    pub stall_tol: f64,
    /// Stop once the dual gap drops to this value.
    pub gap_tol: Option<f64>,
    pub vmax: Option<f64>,
}

impl SolverConfig {
    pub fn new(mesh: MeshStrategy, cost: StepCost) -> Self {
        Self {
            mesh,
            cost,
            phi0: 0.1,
            max_iters: 1000,
            slide: MinimizeOptions::default(),
            dedup_tol: DEDUP_TOL,
            stall_tol: 1e-10,
            gap_tol: None,
            vmax: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cost.validate()?;
        FeasibleConfig::new(self.phi0)?;
        if self.mesh.k() == 0 || self.mesh.n() == 0 {
            return Err(Error::InvalidConfig("mesh needs k >= 1 and n >= 1".into()));
        }
        if !(self.dedup_tol >= 0.0) || !(self.stall_tol >= 0.0) {
            return Err(Error::InvalidConfig(
                "tolerances must be nonnegative".into(),
            ));
        }
        if let Some(v) = self.vmax {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "vmax = {v} must be nonnegative"
                )));
            }
        }
        if self.slide.memory == 0 {
            return Err(Error::InvalidConfig("slide memory must be positive".into()));
        }
        Ok(())
    }

    fn mass_levels(&self) -> usize {
        if self.cost.uses_mass() {
            self.mesh.m()
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub energy: f64,
    pub fidelity: f64,
    pub regulariser: f64,
    /// Gap of the iterate this iteration started from; NaN for the start.
    pub gap: f64,
    pub atoms: usize,
    pub mesh_n: usize,
    pub time_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    UniformConverged,
    MaxIters,
    GapBelow(f64),
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub measure: AtomicMeasure,
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
}

pub const CSV_HEADER: &str = "iter,energy,fidelity,regulariser,gap,atoms,mesh_N,time_ms";

pub fn convergence_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{},{},{:.3}\n",
            r.iter, r.energy, r.fidelity, r.regulariser, r.gap, r.atoms, r.mesh_n, r.time_ms
        ));
    }
    out
}

/// The fields `eta_j = A_j^*(A_j sigma_j - b_j)` at the measure `m`.
pub fn linearize(m: &AtomicMeasure, fm: &ForwardModel) -> GradientFields {
    fm.eta(&m.measurements(fm))
}

/// `sum_j h_j eta_j(x_j) + w(gamma)`.
pub fn linearized_energy(path: &KnotPath, eta: &GradientFields, cost: &StepCost) -> f64 {
    (0..path.len())
        .map(|j| path.mass(j) * eta.fields[j].eval(path.pos(j)))
        .sum::<f64>()
        + cost.path_cost(path)
}

/// Knot variables: per knot `sqrt(h)` (unbalanced only) followed by `x`.
pub fn pack_path(path: &KnotPath, uses_mass: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(path.len() * (path.dim() + 1));
    for j in 0..path.len() {
        if uses_mass {
            out.push(path.mass(j).max(0.0).sqrt());
        }
        out.extend_from_slice(path.pos(j));
    }
    out
}

pub fn unpack_path(
    vars: &[f64],
    grid: &Arc<TimeGrid>,
    dim: usize,
    uses_mass: bool,
) -> Result<KnotPath> {
    let stride = dim + usize::from(uses_mass);
    let n = grid.len();
    let mut masses = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n * dim);
    for knot in vars.chunks_exact(stride) {
        let (mass, pos) = if uses_mass {
            (knot[0] * knot[0], &knot[1..])
        } else {
            (1.0, knot)
        };
        masses.push(mass);
        positions.extend_from_slice(pos);
    }
    KnotPath::from_parts(grid.clone(), dim, masses, positions)
}

/// Adds one path's step costs and their gradient, scaled by `weight`.
fn add_path_cost(
    vars: &[f64],
    grad: &mut [f64],
    grid: &TimeGrid,
    dim: usize,
    uses_mass: bool,
    cost: &StepCost,
    weight: f64,
) -> f64 {
    let stride = dim + usize::from(uses_mass);
    let off = usize::from(uses_mass);
    let mut total = 0.0;
    let mut g_x0 = vec![0.0; dim];
    let mut g_x1 = vec![0.0; dim];
    for j in 1..grid.len() {
        let (a, b) = (
            &vars[(j - 1) * stride..j * stride],
            &vars[j * stride..(j + 1) * stride],
        );
        let (r0, r1) = if uses_mass { (a[0], b[0]) } else { (1.0, 1.0) };
        let (mut g_r0, mut g_r1) = (0.0, 0.0);
        g_x0.iter_mut().for_each(|v| *v = 0.0);
        g_x1.iter_mut().for_each(|v| *v = 0.0);
        total += cost.step_sqrt_grad(
            r0,
            &a[off..],
            r1,
            &b[off..],
            grid.dt(j),
            &mut g_r0,
            &mut g_r1,
            &mut g_x0,
            &mut g_x1,
        );
        let (lo, hi) = grad.split_at_mut(j * stride);
        let (ga, gb) = (&mut lo[(j - 1) * stride..], &mut hi[..stride]);
        if uses_mass {
            ga[0] += weight * g_r0;
            gb[0] += weight * g_r1;
        }
        for i in 0..dim {
            ga[off + i] += weight * g_x0[i];
            gb[off + i] += weight * g_x1[i];
        }
    }
    weight * total
}

fn unit_box(n: usize) -> (Vec<f64>, Vec<f64>) {
    (vec![0.0; n], vec![1.0; n])
}

/// The linearised objective over the knots of one path.
pub struct LinearizedProblem<'a> {
    eta: &'a GradientFields,
    cost: &'a StepCost,
    grid: Arc<TimeGrid>,
    dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> LinearizedProblem<'a> {
    pub fn new(
        eta: &'a GradientFields,
        cost: &'a StepCost,
        grid: Arc<TimeGrid>,
        dim: usize,
    ) -> Self {
        let n = grid.len() * (dim + usize::from(cost.uses_mass()));
        let (lower, upper) = unit_box(n);
        Self {
            eta,
            cost,
            grid,
            dim,
            lower,
            upper,
        }
    }
}

impl BoxProblem for LinearizedProblem<'_> {
    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let uses_mass = self.cost.uses_mass();
        let stride = self.dim + usize::from(uses_mass);
        let off = usize::from(uses_mass);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = 0.0;
        for j in 0..self.grid.len() {
            let (v, g) = (
                &x[j * stride..(j + 1) * stride],
                &mut grad[j * stride..(j + 1) * stride],
            );
            let r = if uses_mass { v[0] } else { 1.0 };
            let e = self.eta.fields[j].eval_grad_scaled(&v[off..], r * r, &mut g[off..]);
            value += r * r * e;
            if uses_mass {
                g[0] += 2.0 * r * e;
            }
        }
        value + add_path_cost(x, grad, &self.grid, self.dim, uses_mass, self.cost, 1.0)
    }
}

/// The full energy over all knots of all atoms, weights held fixed.
pub struct ExactProblem<'a> {
    weights: Vec<f64>,
    fm: &'a ForwardModel,
    cost: &'a StepCost,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> ExactProblem<'a> {
    pub fn new(m: &AtomicMeasure, fm: &'a ForwardModel, cost: &'a StepCost) -> Self {
        let per = m.grid().len() * (fm.dim() + usize::from(cost.uses_mass()));
        let (lower, upper) = unit_box(per * m.len());
        Self {
            weights: m.atoms().iter().map(|a| a.weight).collect(),
            fm,
            cost,
            lower,
            upper,
        }
    }

    /// Lets each knot mass grow until `weight * mass` reaches `total`, so
    /// the slide can trade weight against the mass profile.
    pub fn with_mass_ceiling(mut self, total: f64) -> Self {
        if self.cost.uses_mass() {
            let per = self.per_atom();
            let stride = self.fm.dim() + 1;
            for (i, &w) in self.weights.iter().enumerate() {
                let top = if w > 0.0 {
                    (total / w).sqrt().max(1.0)
                } else {
                    1.0
                };
                for j in 0..per / stride {
                    self.upper[i * per + j * stride] = top;
                }
            }
        }
        self
    }

    pub fn pack(&self, m: &AtomicMeasure) -> Vec<f64> {
        m.atoms()
            .iter()
            .flat_map(|a| pack_path(&a.path, self.cost.uses_mass()))
            .collect()
    }

    pub fn unpack(&self, vars: &[f64]) -> Result<AtomicMeasure> {
        let grid = self.fm.grid();
        let per = self.per_atom();
        let atoms = vars
            .chunks_exact(per.max(1))
            .zip(&self.weights)
            .map(|(v, &w)| {
                Ok(Atom {
                    weight: w,
                    path: unpack_path(v, grid, self.fm.dim(), self.cost.uses_mass())?,
                })
            })
            .collect::<Result<_>>()?;
        AtomicMeasure::new(grid.clone(), atoms)
    }

    fn per_atom(&self) -> usize {
        self.fm.grid().len() * (self.fm.dim() + usize::from(self.cost.uses_mass()))
    }
}

impl BoxProblem for ExactProblem<'_> {
    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let fm = self.fm;
        let grid = fm.grid();
        let dim = fm.dim();
        let uses_mass = self.cost.uses_mass();
        let off = usize::from(uses_mass);
        let stride = dim + off;
        let per = self.per_atom();
        let knot = |i: usize, j: usize| &x[i * per + j * stride..i * per + (j + 1) * stride];
        let mass = |v: &[f64]| if uses_mass { v[0] * v[0] } else { 1.0 };

        let u: Vec<Vec<f64>> = (0..grid.len())
            .into_par_iter()
            .map(|j| {
                let mut u = vec![0.0; fm.measurement_len()];
                for (i, &w) in self.weights.iter().enumerate() {
                    let v = knot(i, j);
                    fm.accumulate(j, w * mass(v), &v[off..], &mut u);
                }
                u
            })
            .collect();
        let eta = fm.eta(&u);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = eta.fidelity;
        for (i, &w) in self.weights.iter().enumerate() {
            let (xi, gi) = (
                &x[i * per..(i + 1) * per],
                &mut grad[i * per..(i + 1) * per],
            );
            for j in 0..grid.len() {
                let v = &xi[j * stride..(j + 1) * stride];
                let g = &mut gi[j * stride..(j + 1) * stride];
                let h = mass(v);
                let e = eta.fields[j].eval_grad_scaled(&v[off..], w * h, &mut g[off..]);
                if uses_mass {
                    g[0] += 2.0 * w * v[0] * e;
                }
            }
            value += add_path_cost(xi, gi, grid, dim, uses_mass, self.cost, w);
        }
        value
    }
}

/// Locally minimises the linearised objective over the knots of `candidate`.
pub fn slide_linearized(
    candidate: &KnotPath,
    eta: &GradientFields,
    cost: &StepCost,
    opts: &MinimizeOptions,
) -> Result<KnotPath> {
    let problem = LinearizedProblem::new(eta, cost, candidate.grid().clone(), candidate.dim());
    let start = pack_path(candidate, cost.uses_mass());
    let best = minimize(&problem, &start, opts)?;
    unpack_path(&best.x, candidate.grid(), candidate.dim(), cost.uses_mass())
}

fn sq_dist(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn inner_diff(data: &[Vec<f64>], u: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
    data.iter()
        .flatten()
        .zip(u.iter().flatten())
        .zip(v.iter().flatten())
        .map(|((b, u), v)| (b - u) * (v - u))
        .sum()
}

/// Minimiser over `[0, 1]` of the quadratic `lambda -> E((1 - lambda) m + lambda mu)`.
fn exact_step(data: &[Vec<f64>], u: &[Vec<f64>], w_m: f64, v: &[Vec<f64>], w_mu: f64) -> f64 {
    let num = inner_diff(data, u, v) - (w_mu - w_m);
    let den = sq_dist(v, u);
    if den > 0.0 {
        (num / den).clamp(0.0, 1.0)
    } else if num > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn regulariser(m: &AtomicMeasure, cost: &StepCost) -> f64 {
    m.atoms()
        .iter()
        .map(|a| a.weight * cost.path_cost(&a.path))
        .sum()
}

/// Exact line search towards the extreme point `phi0^-1 delta_path`.
pub fn line_search(
    m: &AtomicMeasure,
    path: &KnotPath,
    fm: &ForwardModel,
    cost: &StepCost,
    phi0: f64,
) -> Result<f64> {
    let mu = AtomicMeasure::new(
        m.grid().clone(),
        vec![Atom {
            weight: 1.0 / phi0,
            path: path.clone(),
        }],
    )?;
    Ok(exact_step(
        fm.data(),
        &m.measurements(fm),
        regulariser(m, cost),
        &mu.measurements(fm),
        regulariser(&mu, cost),
    ))
}

/// `sum_i a_i Etilde(gamma_i) - min(Etilde*, 0) / phi0`.
pub fn dual_gap(
    m: &AtomicMeasure,
    eta: &GradientFields,
    best_value: f64,
    cost: &StepCost,
    phi0: f64,
) -> f64 {
    let own: f64 = m
        .atoms()
        .iter()
        .map(|a| a.weight * linearized_energy(&a.path, eta, cost))
        .sum();
    own - best_value.min(0.0) / phi0
}

/// Exact weights for fixed paths: minimises the convex quadratic
/// `1/2 a'Ga + q'a` over `a >= 0, sum a <= cap`.
pub(crate) fn optimal_weights(gram: &[Vec<f64>], q: &[f64], cap: f64, start: &[f64]) -> Vec<f64> {
    let n = q.len();
    if n == 0 {
        return Vec::new();
    }
    let objective = |a: &[f64]| -> f64 {
        (0..n)
            .map(|i| a[i] * (0.5 * (0..n).map(|k| gram[i][k] * a[k]).sum::<f64>() + q[i]))
            .sum()
    };
    let gradient = |a: &[f64], g: &mut [f64]| {
        for i in 0..n {
            g[i] = (0..n).map(|k| gram[i][k] * a[k]).sum::<f64>() + q[i];
        }
    };
    // power iteration for the step size
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lip = 0.0;
    for _ in 0..100 {
        let w: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|k| gram[i][k] * v[k]).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lip = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    let trace: f64 = (0..n).map(|i| gram[i][i]).sum();
    let lip = (lip * 1.01).max(1e-3 * trace).max(1e-300);

    let mut a = start.to_vec();
    project_capped(&mut a, cap);
    let mut y = a.clone();
    let mut g = vec![0.0; n];
    let mut tk = 1.0f64;
    for _ in 0..20_000 {
        gradient(&y, &mut g);
        let mut next: Vec<f64> = (0..n).map(|i| y[i] - g[i] / lip).collect();
        project_capped(&mut next, cap);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        let moved: f64 = (0..n).map(|i| (next[i] - a[i]).abs()).fold(0.0, f64::max);
        // restart the momentum whenever the objective goes up
        if objective(&next) > objective(&a) {
            tk = 1.0;
            y = a.clone();
            continue;
        }
        for i in 0..n {
            y[i] = next[i] + (tk - 1.0) / t_next * (next[i] - a[i]);
        }
        a = next;
        tk = t_next;
        if moved <= 1e-15 * (1.0 + a.iter().fold(0.0f64, |m, v| m.max(*v))) {
            break;
        }
    }
    polish(gram, q, cap, a, &objective)
}

/// Re-solves the stationarity system on the support of `a`, keeping the
/// result when it is feasible and no worse.
fn polish(
    gram: &[Vec<f64>],
    q: &[f64],
    cap: f64,
    a: Vec<f64>,
    objective: &dyn Fn(&[f64]) -> f64,
) -> Vec<f64> {
    let support: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    if support.is_empty() {
        return a;
    }
    let sub: Vec<Vec<f64>> = support
        .iter()
        .map(|&i| support.iter().map(|&k| gram[i][k]).collect())
        .collect();
    let rhs: Vec<f64> = support.iter().map(|&i| -q[i]).collect();
    let Some(z) = solve_spd(sub, rhs) else {
        return a;
    };
    if z.iter().any(|v| !(*v > 0.0)) || z.iter().sum::<f64>() > cap {
        return a;
    }
    let mut b = vec![0.0; a.len()];
    for (&i, v) in support.iter().zip(z) {
        b[i] = v;
    }
    // the comparison is at rounding level once FISTA has converged
    let slack =
        1e-13 * (objective(&a).abs() + q.iter().zip(&a).map(|(x, y)| (x * y).abs()).sum::<f64>());
    if objective(&b) <= objective(&a) + slack {
        b
    } else {
        a
    }
}

/// Cholesky solve; `None` unless the matrix is numerically positive definite.
fn solve_spd(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    let scale = (0..n).map(|i| m[i][i]).fold(0.0, f64::max);
    for j in 0..n {
        let d = m[j][j] - (0..j).map(|k| m[j][k] * m[j][k]).sum::<f64>();
        if !(d > 1e-13 * scale) {
            return None;
        }
        let d = d.sqrt();
        m[j][j] = d;
        for i in j + 1..n {
            m[i][j] = (m[i][j] - (0..j).map(|k| m[i][k] * m[j][k]).sum::<f64>()) / d;
        }
    }
    for i in 0..n {
        rhs[i] = (rhs[i] - (0..i).map(|k| m[i][k] * rhs[k]).sum::<f64>()) / m[i][i];
    }
    for i in (0..n).rev() {
        rhs[i] = (rhs[i] - (i + 1..n).map(|k| m[k][i] * rhs[k]).sum::<f64>()) / m[i][i];
    }
    Some(rhs)
}

/// Euclidean projection onto `{a >= 0, sum a <= cap}`.
fn project_capped(a: &mut [f64], cap: f64) {
    let clipped: f64 = a.iter().map(|v| v.max(0.0)).sum();
    if clipped <= cap {
        a.iter_mut().for_each(|v| *v = v.max(0.0));
        return;
    }
    let mut sorted: Vec<f64> = a.to_vec();
    sorted.sort_by(|x, y| y.total_cmp(x));
    let mut acc = 0.0;
    let mut shift = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        acc += s;
        let candidate = (acc - cap) / (i + 1) as f64;
        if s - candidate > 0.0 {
            shift = candidate;
        }
    }
    a.iter_mut().for_each(|v| *v = (*v - shift).max(0.0));
}

/// Fits the weights of `m` with its paths fixed.
pub fn refit_weights(
    m: &AtomicMeasure,
    fm: &ForwardModel,
    cost: &StepCost,
    phi0: f64,
) -> Result<AtomicMeasure> {
    let unit: Vec<Vec<f64>> = m
        .atoms()
        .par_iter()
        .map(|a| {
            let single = AtomicMeasure::new(
                m.grid().clone(),
                vec![Atom {
                    weight: 1.0,
                    path: a.path.clone(),
                }],
            )?;
            Ok(single.measurements(fm).into_iter().flatten().collect())
        })
        .collect::<Result<_>>()?;
    let data: Vec<f64> = fm.data().iter().flatten().copied().collect();
    let n = unit.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|k| dot(&unit[i], &unit[k])).collect())
        .collect();
    let q: Vec<f64> = m
        .atoms()
        .iter()
        .zip(&unit)
        .map(|(a, v)| cost.path_cost(&a.path) - dot(v, &data))
        .collect();
    let start: Vec<f64> = m.atoms().iter().map(|a| a.weight).collect();
    let weights = optimal_weights(&gram, &q, 1.0 / phi0, &start);
    let atoms = m
        .atoms()
        .iter()
        .zip(weights)
        .filter(|(_, w)| *w > 0.0)
        .map(|(a, w)| Atom {
            weight: w,
            path: a.path.clone(),
        })
        .collect();
    AtomicMeasure::new(m.grid().clone(), atoms)
}

/// Slides every atom on the true energy, rescales paths to peak mass 1,
/// merges duplicates and re-fits the weights. The input is returned when
/// the result is not better.
pub fn slide_exact(
    m: &AtomicMeasure,
    fm: &ForwardModel,
    cost: &StepCost,
    cfg: &SolverConfig,
) -> Result<AtomicMeasure> {
    if m.is_empty() {
        return Ok(m.clone());
    }
    let before = energy(m, fm, cost).total;
    let problem = ExactProblem::new(m, fm, cost).with_mass_ceiling(1.0 / cfg.phi0);
    let start = problem.pack(m);
    let slid = problem.unpack(&minimize(&problem, &start, &cfg.slide)?.x)?;

    let atoms = slid
        .atoms()
        .iter()
        .filter(|a| a.path.max_mass() > 0.0)
        .map(|a| {
            let (scale, path) = a.path.normalized();
            Atom {
                weight: a.weight * scale,
                path,
            }
        })
        .collect();
    let rescaled = consolidate(&AtomicMeasure::new(m.grid().clone(), atoms)?, cfg.dedup_tol);
    let fitted = refit_weights(&rescaled, fm, cost, cfg.phi0)?;
    if energy(&fitted, fm, cost).total <= before {
        return Ok(fitted);
    }
    // the slide made things worse; the weight step alone cannot
    let refit = refit_weights(m, fm, cost, cfg.phi0)?;
    if energy(&refit, fm, cost).total <= before {
        Ok(refit)
    } else {
        Ok(m.clone())
    }
}

fn record(
    iter: usize,
    report: &EnergyReport,
    gap: f64,
    atoms: usize,
    mesh_n: usize,
    start: &Instant,
) -> IterationRecord {
    IterationRecord {
        iter,
        energy: report.total,
        fidelity: report.fidelity,
        regulariser: report.regulariser,
        gap,
        atoms,
        mesh_n,
        time_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

pub fn solve(cfg: &SolverConfig, fm: &ForwardModel) -> Result<SolveOutput> {
    solve_with(cfg, fm, &mut |_| {})
}

/// [`solve`], reporting each record to `observer` as it is produced.
pub fn solve_with(
    cfg: &SolverConfig,
    fm: &ForwardModel,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<SolveOutput> {
    cfg.validate()?;
    let clock = Instant::now();
    let grid = fm.grid().clone();
    let dim = fm.dim();
    let cost = &cfg.cost;
    let levels = cfg.mass_levels();
    let (k, n_max) = (cfg.mesh.k(), cfg.mesh.n());
    let mut rng = match cfg.mesh {
        MeshStrategy::Random { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        MeshStrategy::Uniform { .. } => None,
    };
    let mut resolution = match cfg.mesh {
        MeshStrategy::Random { n, .. } => n,
        MeshStrategy::Uniform { n, .. } => n.min(16),
    };
    let mut lattice: Option<(usize, Mesh)> = None;

    let mut m = AtomicMeasure::zero(grid.clone());
    let mut report = energy(&m, fm, cost);
    let mut records = vec![record(0, &report, f64::NAN, 0, resolution, &clock)];
    observer(&records[0]);
    let mut stop = StopReason::MaxIters;

    for iter in 1..=cfg.max_iters {
        let u = m.measurements(fm);
        let eta = fm.eta(&u);
        let mesh = match rng.as_mut() {
            Some(rng) => random_mesh_with(&grid, resolution, levels, dim, rng)?,
            None => {
                if lattice.as_ref().map(|l| l.0) != Some(resolution) {
                    lattice = Some((resolution, uniform_mesh(&grid, resolution, levels, dim)?));
                }
                lattice
                    .as_ref()
                    .map(|l| l.1.clone())
                    .expect("lattice just built")
            }
        };
        let oracle = dp_shortest_paths(&mesh, &grid, &eta, cost, k, cfg.vmax)?;
        let gap = dual_gap(&m, &eta, oracle.values[0], cost, cfg.phi0);
        if cfg.gap_tol.is_some_and(|tol| gap <= tol) {
            let r = record(iter, &report, gap, m.len(), resolution, &clock);
            observer(&r);
            records.push(r);
            stop = StopReason::GapBelow(gap);
            break;
        }

        let before = report.total;
        let mut u = u;
        let mut w_m = report.regulariser;
        for path in &oracle.paths {
            let slid = slide_linearized(path, &eta, cost, &cfg.slide)?;
            let mu = AtomicMeasure::new(
                grid.clone(),
                vec![Atom {
                    weight: 1.0 / cfg.phi0,
                    path: slid,
                }],
            )?;
            let v = mu.measurements(fm);
            let w_mu = regulariser(&mu, cost);
            let lambda = exact_step(fm.data(), &u, w_m, &v, w_mu);
            if lambda > 0.0 {
                m = m.mix(lambda, &mu);
                u = m.measurements(fm);
                w_m = regulariser(&m, cost);
            }
        }
        m = slide_exact(&m, fm, cost, cfg)?;
        report = energy(&m, fm, cost);
        let r = record(iter, &report, gap, m.len(), resolution, &clock);
        observer(&r);
        records.push(r);

        if rng.is_none() && before - report.total <= cfg.stall_tol * before.abs() {
            resolution *= 2;
            if resolution > n_max {
                stop = StopReason::UniformConverged;
                break;
            }
        }
    }
    Ok(SolveOutput {
        measure: m,
        records,
        stop,
    })
}

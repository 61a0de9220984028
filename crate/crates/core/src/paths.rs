//! Discrete weighted paths and the flat metric on mass-position pairs.
//!
//! A path is only ever stored at the observation times `t_0 < ... < t_T`; the
//! values between knots are recovered by geodesic interpolation in
//! [`crate::transport`].

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed when checking that a position lies in the unit box.
pub const DOMAIN_TOL: f64 = 1e-9;

/// Observation times `0 = t_0 < t_1 < ... < t_T = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// A single observation time is accepted as the degenerate grid `[0]`.
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InvalidGrid("grid has no times".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite time".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidGrid(format!(
                "first time is {}, expected 0",
                times[0]
            )));
        }
        if times.len() > 1 && times[times.len() - 1] != 1.0 {
            return Err(Error::InvalidGrid(format!(
                "last time is {}, expected 1",
                times[times.len() - 1]
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(
                "times are not strictly increasing".into(),
            ));
        }
        Ok(Self { times })
    }

    /// `t_j = j / steps` for `j = 0..=steps`.
    pub fn uniform(steps: usize) -> Self {
        let times = if steps == 0 {
            vec![0.0]
        } else {
            (0..=steps).map(|j| j as f64 / steps as f64).collect()
        };
        Self { times }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of observation times, `T + 1`.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of intervals `T`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn time(&self, j: usize) -> f64 {
        self.times[j]
    }

    /// Length of the interval ending at `t_j`, for `j >= 1`.
    pub fn dt(&self, j: usize) -> f64 {
        self.times[j] - self.times[j - 1]
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;

    fn try_from(times: Vec<f64>) -> Result<Self> {
        TimeGrid::new(times)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.times
    }
}

/// A mass and a position, the value of a path at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct MassPos {
    pub mass: f64,
    pub pos: Vec<f64>,
}

impl MassPos {
    pub fn new(mass: f64, pos: impl Into<Vec<f64>>) -> Self {
        Self {
            mass,
            pos: pos.into(),
        }
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Flat distance between the Dirac masses `r_1 δ_{x_1}` and `r_2 δ_{x_2}`.
pub fn flat_metric(a: &MassPos, b: &MassPos) -> f64 {
    flat_metric_parts(a.mass, &a.pos, b.mass, &b.pos)
}

pub(crate) fn flat_metric_parts(r1: f64, x1: &[f64], r2: f64, x2: &[f64]) -> f64 {
    let dist = euclid(x1, x2);
    if r1 * r2 <= 0.0 || dist >= 2.0 {
        r1.abs() + r2.abs()
    } else {
        (r1 - r2).abs() + r1.abs().min(r2.abs()) * dist
    }
}

/// A path sampled at the knots of a [`TimeGrid`].
///
/// Positions are stored flat, `dim` coordinates per knot.
#[derive(Clone, PartialEq)]
pub struct KnotPath {
    grid: Arc<TimeGrid>,
    dim: usize,
    masses: Vec<f64>,
    positions: Vec<f64>,
}

impl fmt::Debug for KnotPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut list = f.debug_list();
        for j in 0..self.len() {
            list.entry(&(self.mass(j), self.pos(j)));
        }
        list.finish()
    }
}

impl KnotPath {
    pub fn new(grid: Arc<TimeGrid>, knots: &[MassPos]) -> Result<Self> {
        let dim = knots
            .first()
            .map(|k| k.pos.len())
            .ok_or_else(|| Error::InvalidKnot("path has no knots".into()))?;
        if knots.iter().any(|k| k.pos.len() != dim) {
            return Err(Error::InvalidKnot(
                "knots have inconsistent dimension".into(),
            ));
        }
        let masses = knots.iter().map(|k| k.mass).collect();
        let positions = knots.iter().flat_map(|k| k.pos.iter().copied()).collect();
        Self::from_parts(grid, dim, masses, positions)
    }

    pub fn from_parts(
        grid: Arc<TimeGrid>,
        dim: usize,
        masses: Vec<f64>,
        positions: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidKnot(
                "spatial dimension must be positive".into(),
            ));
        }
        if masses.len() != grid.len() || positions.len() != grid.len() * dim {
            return Err(Error::InvalidKnot(format!(
                "path has {} knots, grid has {} times",
                masses.len(),
                grid.len()
            )));
        }
        if masses.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidKnot("non-finite mass".into()));
        }
        for (j, x) in positions.chunks(dim).enumerate() {
            if x.iter()
                .any(|c| !c.is_finite() || *c < -DOMAIN_TOL || *c > 1.0 + DOMAIN_TOL)
            {
                return Err(Error::OutsideDomain {
                    time: grid.time(j),
                    pos: x.to_vec(),
                });
            }
        }
        Ok(Self {
            grid,
            dim,
            masses,
            positions,
        })
    }

    /// Path resting at `pos` with constant mass.
    pub fn stationary(grid: Arc<TimeGrid>, mass: f64, pos: &[f64]) -> Result<Self> {
        let n = grid.len();
        let positions = pos.iter().copied().cycle().take(n * pos.len()).collect();
        Self::from_parts(grid, pos.len(), vec![mass; n], positions)
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn mass(&self, j: usize) -> f64 {
        self.masses[j]
    }

    pub fn pos(&self, j: usize) -> &[f64] {
        &self.positions[j * self.dim..(j + 1) * self.dim]
    }

    pub fn knot(&self, j: usize) -> MassPos {
        MassPos::new(self.mass(j), self.pos(j))
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn max_mass(&self) -> f64 {
        self.masses.iter().fold(0.0, |m, h| m.max(h.abs()))
    }

    /// Splits the path into a scale and a path whose largest mass is 1.
    ///
    /// A zero path is returned unchanged with scale 1.
    pub fn normalized(&self) -> (f64, KnotPath) {
        let scale = self.max_mass();
        if scale == 0.0 {
            return (1.0, self.clone());
        }
        let mut out = self.clone();
        out.masses.iter_mut().for_each(|h| *h /= scale);
        (scale, out)
    }

    /// Rows `[h, x_1, ..., x_d]`, one per knot.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|j| {
                let mut row = Vec::with_capacity(self.dim + 1);
                row.push(self.mass(j));
                row.extend_from_slice(self.pos(j));
                row
            })
            .collect()
    }

    pub fn from_rows(grid: Arc<TimeGrid>, rows: &[Vec<f64>]) -> Result<Self> {
        let knots: Vec<MassPos> = rows
            .iter()
            .map(|r| {
                if r.len() < 2 {
                    Err(Error::InvalidKnot(format!("knot row {r:?} is too short")))
                } else {
                    Ok(MassPos::new(r[0], &r[1..]))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(grid, &knots)
    }
}

fn same_grid(a: &Arc<TimeGrid>, b: &Arc<TimeGrid>) -> bool {
    Arc::ptr_eq(a, b) || a == b
}

/// Largest flat distance between corresponding knots of two paths.
pub fn path_distance(p: &KnotPath, q: &KnotPath) -> Result<f64> {
    if !same_grid(&p.grid, &q.grid) || p.dim != q.dim {
        return Err(Error::GridMismatch);
    }
    Ok((0..p.len())
        .map(|j| flat_metric_parts(p.mass(j), p.pos(j), q.mass(j), q.pos(j)))
        .fold(0.0, f64::max))
}

type MassFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type PosFn = Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

/// A ground-truth curve given by closed-form mass and position profiles.
#[derive(Clone)]
pub struct ContinuousPath {
    mass_fn: MassFn,
    pos_fn: PosFn,
}

impl fmt::Debug for ContinuousPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContinuousPath")
            .field("start", &(self.mass(0.0), self.pos(0.0)))
            .field("end", &(self.mass(1.0), self.pos(1.0)))
            .finish()
    }
}

impl ContinuousPath {
    pub fn new(
        mass_fn: impl Fn(f64) -> f64 + Send + Sync + 'static,
        pos_fn: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            mass_fn: Arc::new(mass_fn),
            pos_fn: Arc::new(pos_fn),
        }
    }

    pub fn mass(&self, t: f64) -> f64 {
        (self.mass_fn)(t)
    }

    pub fn pos(&self, t: f64) -> Vec<f64> {
        (self.pos_fn)(t)
    }
}

/// Samples a continuous curve at the grid times.
///
/// Masses within 1e-12 of 0 or 1 are snapped onto the bound; larger masses
/// (phantoms reach 2) are kept as they are.
pub fn sample_phantom_path(p: &ContinuousPath, grid: &Arc<TimeGrid>) -> Result<KnotPath> {
    let mut masses = Vec::with_capacity(grid.len());
    let mut positions = Vec::new();
    let mut dim = None;
    for &t in grid.times() {
        let mut h = p.mass(t);
        if (h - 1.0).abs() <= 1e-12 {
            h = 1.0;
        } else if h.abs() <= 1e-12 {
            h = 0.0;
        }
        let mut x = p.pos(t);
        if *dim.get_or_insert(x.len()) != x.len() {
            return Err(Error::InvalidKnot(
                "position dimension changes in time".into(),
            ));
        }
        if x.iter()
            .any(|c| !c.is_finite() || *c < -DOMAIN_TOL || *c > 1.0 + DOMAIN_TOL)
        {
            return Err(Error::OutsideDomain { time: t, pos: x });
        }
        x.iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
        masses.push(h);
        positions.extend(x);
    }
    KnotPath::from_parts(grid.clone(), dim.unwrap_or(0), masses, positions)
}

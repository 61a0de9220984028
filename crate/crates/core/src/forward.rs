//! Time-indexed Fourier measurement operators, the quadratic data term, and
//! the dual certificate fields `eta_j`.
//!
//! Each operator samples the spatial measure at a set of frequencies `k`,
//! damped by a Gaussian window; the measurement vector interleaves real and
//! imaginary parts.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::TimeGrid;

/// Which frequencies each observation time sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Every frequency at every time.
    #[default]
    All,
    /// Half of the nonzero frequencies, those whose direction is closest to
    /// an angle that turns by `pi / (T + 1)` per time step, plus `k = 0`.
    Rotate,
}

/// Frequencies `{-K..K}^d` with one representative of each `{k, -k}` pair.
pub fn integer_frequencies(max_k: i64, dim: usize) -> Vec<Vec<f64>> {
    let side = (2 * max_k + 1) as usize;
    let total = side.pow(dim as u32);
    let mut out: Vec<Vec<f64>> = Vec::new();
    for idx in 0..total {
        let mut rem = idx;
        let mut k = vec![0i64; dim];
        for c in k.iter_mut() {
            *c = (rem % side) as i64 - max_k;
            rem /= side;
        }
        // keep k if its first nonzero coordinate is positive, or k = 0
        match k.iter().find(|&&c| c != 0) {
            Some(&c) if c < 0 => continue,
            _ => out.push(k.into_iter().map(|c| c as f64).collect()),
        }
    }
    out.sort_by(|a, b| {
        let na: f64 = a.iter().map(|c| c * c).sum();
        let nb: f64 = b.iter().map(|c| c * c).sum();
        na.total_cmp(&nb).then_with(|| a.partial_cmp(b).unwrap())
    });
    out
}

/// Global frequency list and the subset active at each time.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencySet {
    dim: usize,
    freqs: Vec<Vec<f64>>,
    active: Vec<Vec<usize>>,
}

impl FrequencySet {
    pub fn new(freqs: Vec<Vec<f64>>, schedule: Schedule, n_times: usize) -> Result<Self> {
        let dim = freqs
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidModel("empty frequency set".into()))?;
        if dim == 0
            || freqs
                .iter()
                .any(|k| k.len() != dim || k.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::InvalidModel("malformed frequency vectors".into()));
        }
        let active = match schedule {
            Schedule::All => vec![(0..freqs.len()).collect(); n_times],
            Schedule::Rotate => rotating_subsets(&freqs, n_times)?,
        };
        Ok(Self { dim, freqs, active })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn all(&self) -> &[Vec<f64>] {
        &self.freqs
    }

    /// Indices of the frequencies observed at time `j`.
    pub fn active(&self, j: usize) -> &[usize] {
        &self.active[j]
    }

    /// Frequencies per time, `m`; identical for all times.
    pub fn per_time(&self) -> usize {
        self.active[0].len()
    }
}

fn rotating_subsets(freqs: &[Vec<f64>], n_times: usize) -> Result<Vec<Vec<usize>>> {
    if freqs[0].len() != 2 {
        return Err(Error::InvalidModel(
            "the rotating schedule needs d = 2".into(),
        ));
    }
    let zero: Vec<usize> = (0..freqs.len())
        .filter(|&i| freqs[i].iter().all(|&c| c == 0.0))
        .collect();
    let nonzero: Vec<usize> = (0..freqs.len()).filter(|i| !zero.contains(i)).collect();
    let keep = nonzero.len().div_ceil(2);
    let angular_gap = |i: usize, centre: f64| {
        let a = freqs[i][1].atan2(freqs[i][0]).rem_euclid(PI);
        let d = (a - centre).abs();
        d.min(PI - d)
    };
    Ok((0..n_times)
        .map(|j| {
            let centre = PI * j as f64 / n_times as f64;
            let mut order = nonzero.clone();
            order.sort_by(|&a, &b| angular_gap(a, centre).total_cmp(&angular_gap(b, centre)));
            let mut chosen: Vec<usize> = zero
                .iter()
                .copied()
                .chain(order.into_iter().take(keep))
                .collect();
            chosen.sort_unstable();
            chosen
        })
        .collect())
}

/// A convex data term `F_j` given by its value and gradient.
pub trait Fidelity: Sync {
    /// Returns `F_j(u)` and writes `grad F_j(u)` into `grad`.
    fn value_grad(&self, u: &[f64], b: &[f64], grad: &mut [f64]) -> f64;
}

/// `F_j(u) = 1/2 |u - b_j|^2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Quadratic;

impl Fidelity for Quadratic {
    fn value_grad(&self, u: &[f64], b: &[f64], grad: &mut [f64]) -> f64 {
        let mut v = 0.0;
        for i in 0..u.len() {
            let r = u[i] - b[i];
            grad[i] = r;
            v += r * r;
        }
        0.5 * v
    }
}

/// Everything needed to build a [`ForwardModel`] except the data.
#[derive(Clone, Debug)]
pub struct ModelTemplate {
    pub grid: Arc<TimeGrid>,
    pub frequencies: Vec<Vec<f64>>,
    pub window_sigma: f64,
    pub schedule: Schedule,
}

impl ModelTemplate {
    /// Uniform grid with `steps` intervals and integer frequencies up to `max_k`.
    pub fn desk(steps: usize, max_k: i64, window_sigma: f64, schedule: Schedule) -> Self {
        Self {
            grid: Arc::new(TimeGrid::uniform(steps)),
            frequencies: integer_frequencies(max_k, 2),
            window_sigma,
            schedule,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardModel {
    grid: Arc<TimeGrid>,
    freqs: FrequencySet,
    schedule: Schedule,
    window_sigma: f64,
    damping: Vec<f64>,
    data: Vec<Vec<f64>>,
    noise_level: f64,
    seed: u64,
}

impl ForwardModel {
    pub fn new(template: &ModelTemplate, data: Vec<Vec<f64>>) -> Result<Self> {
        if !(template.window_sigma >= 0.0 && template.window_sigma.is_finite()) {
            return Err(Error::InvalidModel(
                "window_sigma must be nonnegative".into(),
            ));
        }
        let freqs = FrequencySet::new(
            template.frequencies.clone(),
            template.schedule,
            template.grid.len(),
        )?;
        let s2 = template.window_sigma * template.window_sigma;
        let damping = freqs
            .all()
            .iter()
            .map(|k| (-0.5 * s2 * k.iter().map(|c| c * c).sum::<f64>()).exp())
            .collect();
        let model = Self {
            grid: template.grid.clone(),
            freqs,
            schedule: template.schedule,
            window_sigma: template.window_sigma,
            damping,
            data,
            noise_level: 0.0,
            seed: 0,
        };
        model.check_data(&model.data)?;
        Ok(model)
    }

    /// A model with all-zero data, used to evaluate the operators alone.
    pub fn without_data(template: &ModelTemplate) -> Result<Self> {
        let n = template.grid.len();
        let fs = FrequencySet::new(template.frequencies.clone(), template.schedule, n)?;
        Self::new(template, vec![vec![0.0; 2 * fs.per_time()]; n])
    }

    fn check_data(&self, data: &[Vec<f64>]) -> Result<()> {
        if data.len() != self.grid.len() {
            return Err(Error::InvalidModel(format!(
                "data has {} time slices, grid has {}",
                data.len(),
                self.grid.len()
            )));
        }
        let m = self.measurement_len();
        if data
            .iter()
            .any(|b| b.len() != m || b.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidModel(format!(
                "every data vector must hold {m} finite values"
            )));
        }
        Ok(())
    }

    pub fn with_data(mut self, data: Vec<Vec<f64>>) -> Result<Self> {
        self.check_data(&data)?;
        self.data = data;
        Ok(self)
    }

    pub(crate) fn with_provenance(mut self, noise_level: f64, seed: u64) -> Self {
        self.noise_level = noise_level;
        self.seed = seed;
        self
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn frequencies(&self) -> &FrequencySet {
        &self.freqs
    }

    pub fn dim(&self) -> usize {
        self.freqs.dim()
    }

    pub fn window_sigma(&self) -> f64 {
        self.window_sigma
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn noise_level(&self) -> f64 {
        self.noise_level
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Length `2m` of each measurement vector.
    pub fn measurement_len(&self) -> usize {
        2 * self.freqs.per_time()
    }

    pub fn template(&self) -> ModelTemplate {
        ModelTemplate {
            grid: self.grid.clone(),
            frequencies: self.freqs.all().to_vec(),
            window_sigma: self.window_sigma,
            schedule: self.schedule,
        }
    }

    /// Adds `weight * A_j delta_x` to `out`.
    pub fn accumulate(&self, j: usize, weight: f64, x: &[f64], out: &mut [f64]) {
        for (slot, &f) in self.freqs.active(j).iter().enumerate() {
            let k = &self.freqs.all()[f];
            let phase = 2.0 * PI * dot(k, x);
            let (s, c) = phase.sin_cos();
            let w = weight * self.damping[f];
            out[2 * slot] += w * c;
            out[2 * slot + 1] -= w * s;
        }
    }

    /// `A_j` applied to a weighted point list.
    pub fn apply(&self, j: usize, slice: &[(f64, Vec<f64>)]) -> Vec<f64> {
        let mut out = vec![0.0; self.measurement_len()];
        for (w, x) in slice {
            self.accumulate(j, *w, x, &mut out);
        }
        out
    }

    /// Certificate fields for the quadratic data term, given the current
    /// measurements `u_j`.
    pub fn eta(&self, u: &[Vec<f64>]) -> GradientFields {
        self.eta_with(&Quadratic, u)
    }

    pub fn eta_with(&self, fidelity: &dyn Fidelity, u: &[Vec<f64>]) -> GradientFields {
        assert_eq!(u.len(), self.grid.len(), "one measurement vector per time");
        let mut value = 0.0;
        let fields = u
            .iter()
            .enumerate()
            .map(|(j, uj)| {
                let mut grad = vec![0.0; uj.len()];
                value += fidelity.value_grad(uj, &self.data[j], &mut grad);
                self.field(j, &grad)
            })
            .collect();
        GradientFields {
            fields,
            fidelity: value,
        }
    }

    /// The function `x -> <coef, A_j delta_x>`.
    pub fn field(&self, j: usize, coef: &[f64]) -> GradientField {
        let dim = self.dim();
        let active = self.freqs.active(j);
        let mut ks = Vec::with_capacity(active.len() * dim);
        let mut re = Vec::with_capacity(active.len());
        let mut im = Vec::with_capacity(active.len());
        for (slot, &f) in active.iter().enumerate() {
            ks.extend(self.freqs.all()[f].iter().map(|c| 2.0 * PI * c));
            re.push(self.damping[f] * coef[2 * slot]);
            im.push(self.damping[f] * coef[2 * slot + 1]);
        }
        GradientField { dim, ks, re, im }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `eta_j(x) = sum_k re_k cos(k.x) - im_k sin(k.x)`, evaluated exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    dim: usize,
    /// angular frequencies `2 pi k`, flattened
    ks: Vec<f64>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl GradientField {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut v = 0.0;
        for (i, k) in self.ks.chunks_exact(self.dim).enumerate() {
            let (s, c) = dot(k, x).sin_cos();
            v += self.re[i] * c - self.im[i] * s;
        }
        v
    }

    /// Spatial gradient of the field at `x`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.eval_grad(x, &mut g);
        g
    }

    /// Value at `x`; the gradient is added to `g`, scaled by `scale`.
    pub fn eval_grad_scaled(&self, x: &[f64], scale: f64, g: &mut [f64]) -> f64 {
        let mut v = 0.0;
        for (i, k) in self.ks.chunks_exact(self.dim).enumerate() {
            let (s, c) = dot(k, x).sin_cos();
            v += self.re[i] * c - self.im[i] * s;
            let d = -(self.re[i] * s + self.im[i] * c) * scale;
            for (gi, ki) in g.iter_mut().zip(k) {
                *gi += d * ki;
            }
        }
        v
    }

    pub fn eval_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        g.iter_mut().for_each(|v| *v = 0.0);
        self.eval_grad_scaled(x, 1.0, g)
    }
}

/// Spatial gradient of `eta_j` at `x`.
pub fn eta_gradient(field: &GradientField, x: &[f64]) -> Vec<f64> {
    field.gradient(x)
}

/// The fields `eta_0..eta_T` and the data term at which they were computed.
#[derive(Clone, Debug)]
pub struct GradientFields {
    pub fields: Vec<GradientField>,
    pub fidelity: f64,
}

impl GradientFields {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

/// Serialised form of a [`ForwardModel`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataFile {
    pub times: Vec<f64>,
    pub frequencies: Vec<Vec<f64>>,
    pub window_sigma: f64,
    #[serde(default)]
    pub schedule: Schedule,
    pub data: Vec<Vec<f64>>,
    #[serde(default)]
    pub noise_level: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ForwardModel {
    pub fn to_data_file(&self) -> DataFile {
        DataFile {
            times: self.grid.times().to_vec(),
            frequencies: self.freqs.all().to_vec(),
            window_sigma: self.window_sigma,
            schedule: self.schedule,
            data: self.data.clone(),
            noise_level: self.noise_level,
            seed: self.seed,
        }
    }

    pub fn from_data_file(file: DataFile) -> Result<Self> {
        let template = ModelTemplate {
            grid: Arc::new(TimeGrid::new(file.times)?),
            frequencies: file.frequencies,
            window_sigma: file.window_sigma,
            schedule: file.schedule,
        };
        Ok(Self::new(&template, file.data)?.with_provenance(file.noise_level, file.seed))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_data_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_data_file(serde_json::from_str(text)?)
    }
}

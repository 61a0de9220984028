//! Synthetic ground truths and the data they generate.
//!
//! Phantom 1 is two particles crossing on the diagonals of the square. The
//! three-particle phantom 2 used here is our own construction:
//!
//! | atom | position `gamma(t)`                   | unbalanced mass `h(t)`      |
//! |------|---------------------------------------|-----------------------------|
//! | 1    | `(0.1 + 0.8 t, 0.5 + 0.3 sin(pi t))`  | `(1 + 3 t^2) / 2`           |
//! | 2    | `(0.9 - 0.8 t, 0.2 + 0.5 t)`          | `1.5 sqrt(1 - t)`           |
//! | 3    | `(0.3 + 0.4 t^2, 0.9 - 0.7 t)`        | `1 + 0.5 cos(2 pi t)`       |
//!
//! Every unbalanced mass profile integrates to 1 over `[0, 1]`; balanced
//! variants use `h = 1`.

use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, ModelTemplate};
use crate::measures::{Atom, AtomicMeasure};
use crate::paths::{sample_phantom_path, ContinuousPath, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomName {
    Balanced1,
    Balanced2,
    Unbalanced1,
    Unbalanced2,
}

impl FromStr for PhantomName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced1" => Ok(Self::Balanced1),
            "balanced2" => Ok(Self::Balanced2),
            "unbalanced1" => Ok(Self::Unbalanced1),
            "unbalanced2" => Ok(Self::Unbalanced2),
            other => Err(Error::UnknownPhantom(other.to_string())),
        }
    }
}

impl PhantomName {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Balanced1 => "balanced1",
            Self::Balanced2 => "balanced2",
            Self::Unbalanced1 => "unbalanced1",
            Self::Unbalanced2 => "unbalanced2",
        }
    }

    pub fn is_balanced(&self) -> bool {
        matches!(self, Self::Balanced1 | Self::Balanced2)
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub name: PhantomName,
    pub atoms: Vec<(f64, ContinuousPath)>,
}

fn growing(t: f64) -> f64 {
    0.5 * (1.0 + 3.0 * t * t)
}

fn shrinking(t: f64) -> f64 {
    1.5 * (1.0 - t).max(0.0).sqrt()
}

fn pulsing(t: f64) -> f64 {
    1.0 + 0.5 * (2.0 * PI * t).cos()
}

pub fn make_phantom(name: &str) -> Result<Phantom> {
    let name: PhantomName = name.parse()?;
    let balanced = name.is_balanced();
    let mass = move |f: fn(f64) -> f64| -> Box<dyn Fn(f64) -> f64 + Send + Sync> {
        if balanced {
            Box::new(|_| 1.0)
        } else {
            Box::new(f)
        }
    };
    let curve = |h: Box<dyn Fn(f64) -> f64 + Send + Sync>, g: fn(f64) -> Vec<f64>| {
        (1.0, ContinuousPath::new(h, g))
    };
    let atoms = match name {
        PhantomName::Balanced1 | PhantomName::Unbalanced1 => vec![
            curve(mass(growing), |t| vec![0.2 + 0.6 * t, 0.2 + 0.6 * t]),
            curve(mass(shrinking), |t| vec![0.8 - 0.6 * t, 0.2 + 0.6 * t]),
        ],
        PhantomName::Balanced2 | PhantomName::Unbalanced2 => vec![
            curve(mass(growing), |t| {
                vec![0.1 + 0.8 * t, 0.5 + 0.3 * (PI * t).sin()]
            }),
            curve(mass(shrinking), |t| vec![0.9 - 0.8 * t, 0.2 + 0.5 * t]),
            curve(mass(pulsing), |t| vec![0.3 + 0.4 * t * t, 0.9 - 0.7 * t]),
        ],
    };
    Ok(Phantom { name, atoms })
}

impl Phantom {
    /// Samples the phantom on `grid`. Each atom is rescaled so its largest
    /// knot mass is 1, the scale moving into the atom weight.
    pub fn sample(&self, grid: &Arc<TimeGrid>) -> Result<AtomicMeasure> {
        let atoms = self
            .atoms
            .iter()
            .map(|(w, curve)| {
                let (scale, path) = sample_phantom_path(curve, grid)?.normalized();
                Ok(Atom {
                    weight: w * scale,
                    path,
                })
            })
            .collect::<Result<_>>()?;
        AtomicMeasure::new(grid.clone(), atoms)
    }
}

/// Measures the sampled phantom and adds Gaussian noise with
/// `|noise| = noise_level |clean data|` over all times together.
pub fn synthesize_data(
    ph: &Phantom,
    template: &ModelTemplate,
    noise_level: f64,
    seed: u64,
) -> Result<ForwardModel> {
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(Error::InvalidModel(format!(
            "noise level {noise_level} must be nonnegative"
        )));
    }
    let blank = ForwardModel::without_data(template)?;
    let truth = ph.sample(&template.grid)?;
    let mut data = truth.measurements(&blank);
    if noise_level > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<Vec<f64>> = data
            .iter()
            .map(|b| b.iter().map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let norm = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        let (clean, raw) = (norm(&data), norm(&noise));
        if raw > 0.0 {
            let scale = noise_level * clean / raw;
            for (b, e) in data.iter_mut().zip(&noise) {
                b.iter_mut().zip(e).for_each(|(x, n)| *x += scale * n);
            }
        }
    }
    Ok(blank.with_data(data)?.with_provenance(noise_level, seed))
}

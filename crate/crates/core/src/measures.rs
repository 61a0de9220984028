//! Sparse measures on paths and the energy they are scored by.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::paths::{path_distance, KnotPath, TimeGrid};
use crate::transport::StepCost;

/// Default tolerance, in the flat path metric, below which atoms are merged.
pub const DEDUP_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub weight: f64,
    pub path: KnotPath,
}

/// `sum_i a_i delta_{gamma_i}` with `a_i >= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomicMeasure {
    grid: Arc<TimeGrid>,
    atoms: Vec<Atom>,
}

impl AtomicMeasure {
    pub fn zero(grid: Arc<TimeGrid>) -> Self {
        Self {
            grid,
            atoms: Vec::new(),
        }
    }

    pub fn new(grid: Arc<TimeGrid>, atoms: Vec<Atom>) -> Result<Self> {
        for a in &atoms {
            if !(a.weight >= 0.0 && a.weight.is_finite()) {
                return Err(Error::InvalidKnot(format!(
                    "atom weight {} is not a finite nonnegative number",
                    a.weight
                )));
            }
            if a.path.grid().as_ref() != grid.as_ref() {
                return Err(Error::GridMismatch);
            }
        }
        Ok(Self { grid, atoms })
    }

    pub fn grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.atoms.iter_mut().for_each(|a| a.weight *= factor);
        out
    }

    /// `(1 - lambda) self + lambda other`, realised by concatenating atoms.
    pub fn mix(&self, lambda: f64, other: &AtomicMeasure) -> Self {
        let mut out = self.scaled(1.0 - lambda);
        out.atoms.extend(other.scaled(lambda).atoms);
        out
    }

    /// The spatial measure observed at `t_j`.
    pub fn time_slice(&self, j: usize) -> Vec<(f64, Vec<f64>)> {
        time_slice(self, j)
    }

    /// `u_j = A_j (sigma at t_j)` for every `j`.
    pub fn measurements(&self, fm: &ForwardModel) -> Vec<Vec<f64>> {
        (0..self.grid.len())
            .into_par_iter()
            .map(|j| {
                let mut u = vec![0.0; fm.measurement_len()];
                for a in &self.atoms {
                    fm.accumulate(j, a.weight * a.path.mass(j), a.path.pos(j), &mut u);
                }
                u
            })
            .collect()
    }
}

/// Points `(a_i h_i(t_j), gamma_i(t_j))`; zero-mass entries are kept.
pub fn time_slice(m: &AtomicMeasure, j: usize) -> Vec<(f64, Vec<f64>)> {
    m.atoms
        .iter()
        .map(|a| (a.weight * a.path.mass(j), a.path.pos(j).to_vec()))
        .collect()
}

/// Constant `phi` of the feasible set `D = { sigma >= 0 : phi0 sum a_i <= 1 }`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibleConfig {
    pub phi0: f64,
}

impl Default for FeasibleConfig {
    fn default() -> Self {
        Self { phi0: 0.1 }
    }
}

impl FeasibleConfig {
    pub fn new(phi0: f64) -> Result<Self> {
        if !(phi0 > 0.0 && phi0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "phi0 = {phi0} must be positive"
            )));
        }
        Ok(Self { phi0 })
    }
}

/// `1 - phi0 sum a_i`; nonnegative exactly on the feasible set.
pub fn feasibility_margin(m: &AtomicMeasure, cfg: &FeasibleConfig) -> f64 {
    1.0 - cfg.phi0 * m.total_weight()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub total: f64,
    pub fidelity: f64,
    pub regulariser: f64,
    pub per_atom_cost: Vec<f64>,
}

/// `E = 1/2 sum_j |A_j sigma_j - b_j|^2 + sum_i a_i w(gamma_i)`.
pub fn energy(m: &AtomicMeasure, fm: &ForwardModel, cost: &StepCost) -> EnergyReport {
    let u = m.measurements(fm);
    let fidelity: f64 = u
        .iter()
        .zip(fm.data())
        .map(|(uj, bj)| {
            uj.iter()
                .zip(bj)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        * 0.5;
    let per_atom_cost: Vec<f64> = m.atoms.iter().map(|a| cost.path_cost(&a.path)).collect();
    let regulariser = m
        .atoms
        .iter()
        .zip(&per_atom_cost)
        .map(|(a, w)| a.weight * w)
        .sum();
    EnergyReport {
        total: fidelity + regulariser,
        fidelity,
        regulariser,
        per_atom_cost,
    }
}

/// Drops zero-weight atoms and merges atoms closer than `tol`.
///
/// A merged atom keeps the path of the first atom of its group and the summed
/// weight of the group.
pub fn consolidate(m: &AtomicMeasure, tol: f64) -> AtomicMeasure {
    let mut kept: Vec<Atom> = Vec::with_capacity(m.len());
    for a in m.atoms.iter().filter(|a| a.weight > 0.0) {
        let twin = kept.iter_mut().find(|k| {
            path_distance(&k.path, &a.path)
                .map(|d| d <= tol)
                .unwrap_or(false)
        });
        match twin {
            Some(k) => k.weight += a.weight,
            None => kept.push(a.clone()),
        }
    }
    AtomicMeasure {
        grid: m.grid.clone(),
        atoms: kept,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtomRecord {
    pub weight: f64,
    pub knots: Vec<Vec<f64>>,
}

/// Serialised form of a measure, optionally with its energy breakdown.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolutionFile {
    pub phi0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    pub atoms: Vec<AtomRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyReport>,
}

impl SolutionFile {
    pub fn from_measure(
        m: &AtomicMeasure,
        cfg: &FeasibleConfig,
        energy: Option<EnergyReport>,
    ) -> Self {
        Self {
            phi0: cfg.phi0,
            times: Some(m.grid.times().to_vec()),
            atoms: m
                .atoms
                .iter()
                .map(|a| AtomRecord {
                    weight: a.weight,
                    knots: a.path.to_rows(),
                })
                .collect(),
            energy,
        }
    }

    /// Rebuilds the measure; without stored times a uniform grid matching
    /// the knot count is assumed.
    pub fn to_measure(&self) -> Result<AtomicMeasure> {
        let grid = match (&self.times, self.atoms.first()) {
            (Some(t), _) => Arc::new(TimeGrid::new(t.clone())?),
            (None, Some(a)) if !a.knots.is_empty() => {
                Arc::new(TimeGrid::uniform(a.knots.len() - 1))
            }
            (None, _) => {
                return Err(Error::InvalidGrid(
                    "solution has neither times nor atoms".into(),
                ))
            }
        };
        let atoms = self
            .atoms
            .iter()
            .map(|r| {
                Ok(Atom {
                    weight: r.weight,
                    path: KnotPath::from_rows(grid.clone(), &r.knots)?,
                })
            })
            .collect::<Result<_>>()?;
        AtomicMeasure::new(grid, atoms)
    }

    pub fn feasible(&self) -> Result<FeasibleConfig> {
        FeasibleConfig::new(self.phi0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{ModelTemplate, Schedule};
    use crate::phantoms::{make_phantom, synthesize_data};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_measure(rng: &mut impl Rng, grid: &Arc<TimeGrid>, n: usize) -> AtomicMeasure {
        let atoms = (0..n)
            .map(|_| {
                let masses = (0..grid.len()).map(|_| rng.random()).collect();
                let positions = (0..2 * grid.len()).map(|_| rng.random()).collect();
                Atom {
                    weight: rng.random_range(0.0..2.0),
                    path: KnotPath::from_parts(grid.clone(), 2, masses, positions).unwrap(),
                }
            })
            .collect();
        AtomicMeasure::new(grid.clone(), atoms).unwrap()
    }

    fn balanced1_setup() -> (AtomicMeasure, ForwardModel) {
        let ph = make_phantom("balanced1").unwrap();
        let template = ModelTemplate::desk(21, 3, 0.2, Schedule::All);
        let fm = synthesize_data(&ph, &template, 0.0, 0).unwrap();
        (ph.sample(&template.grid).unwrap(), fm)
    }

    #[test]
    fn slice_examples() {
        let (truth, _) = balanced1_setup();
        let s = truth.time_slice(0);
        assert_eq!(s, vec![(1.0, vec![0.2, 0.2]), (1.0, vec![0.8, 0.2])]);
        assert!(AtomicMeasure::zero(truth.grid().clone())
            .time_slice(3)
            .is_empty());

        let grid = Arc::new(TimeGrid::uniform(1));
        let p = KnotPath::from_parts(grid.clone(), 2, vec![0.5, 0.0], vec![0.1, 0.2, 0.3, 0.4])
            .unwrap();
        let m = AtomicMeasure::new(
            grid,
            vec![Atom {
                weight: 2.0,
                path: p,
            }],
        )
        .unwrap();
        assert_eq!(m.time_slice(0), vec![(1.0, vec![0.1, 0.2])]);
        assert_eq!(m.time_slice(1), vec![(0.0, vec![0.3, 0.4])]);
    }

    #[test]
    fn energy_examples() {
        let (truth, fm) = balanced1_setup();
        let cost = StepCost::balanced(0.5, 0.5).unwrap();

        let zero = energy(&AtomicMeasure::zero(truth.grid().clone()), &fm, &cost);
        let half: f64 = fm.data().iter().flatten().map(|v| v * v).sum::<f64>() / 2.0;
        assert!((zero.fidelity - half).abs() < 1e-12 * half);
        assert_eq!(zero.regulariser, 0.0);

        let e = energy(&truth, &fm, &cost);
        assert!(e.fidelity <= 1e-18);
        assert!((e.regulariser - 1.36).abs() < 1e-12);
        assert!((e.total - e.fidelity - e.regulariser).abs() < 1e-12);

        let scaled = energy(&truth.scaled(3.0), &fm, &cost);
        assert!((scaled.regulariser - 3.0 * e.regulariser).abs() < 1e-12);
    }

    #[test]
    fn feasibility_examples() {
        let grid = Arc::new(TimeGrid::uniform(2));
        let cfg = FeasibleConfig::new(0.1).unwrap();
        assert_eq!(
            feasibility_margin(&AtomicMeasure::zero(grid.clone()), &cfg),
            1.0
        );
        let p = KnotPath::stationary(grid.clone(), 1.0, &[0.5, 0.5]).unwrap();
        let one = AtomicMeasure::new(
            grid.clone(),
            vec![Atom {
                weight: 10.0,
                path: p.clone(),
            }],
        )
        .unwrap();
        assert!(feasibility_margin(&one, &cfg).abs() < 1e-15);
        let five = AtomicMeasure::new(
            grid,
            vec![
                Atom {
                    weight: 2.0,
                    path: p.clone(),
                },
                Atom {
                    weight: 3.0,
                    path: p,
                },
            ],
        )
        .unwrap();
        assert!((feasibility_margin(&five, &cfg) - 0.5).abs() < 1e-15);
        assert!(FeasibleConfig::new(0.0).is_err());
    }

    #[test]
    fn consolidate_examples() {
        let grid = Arc::new(TimeGrid::uniform(3));
        let p = KnotPath::stationary(grid.clone(), 1.0, &[0.5, 0.5]).unwrap();
        let q = KnotPath::stationary(grid.clone(), 1.0, &[0.2, 0.5]).unwrap();
        let dup = AtomicMeasure::new(
            grid.clone(),
            vec![
                Atom {
                    weight: 1.0,
                    path: p.clone(),
                },
                Atom {
                    weight: 2.0,
                    path: p.clone(),
                },
            ],
        )
        .unwrap();
        let merged = consolidate(&dup, DEDUP_TOL);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged.atoms()[0].weight, 3.0);

        let with_zero = AtomicMeasure::new(
            grid.clone(),
            vec![
                Atom {
                    weight: 0.0,
                    path: p.clone(),
                },
                Atom {
                    weight: 2.0,
                    path: q.clone(),
                },
            ],
        )
        .unwrap();
        assert_eq!(consolidate(&with_zero, DEDUP_TOL).len(), 1);

        let distinct = AtomicMeasure::new(
            grid,
            vec![
                Atom {
                    weight: 1.0,
                    path: p,
                },
                Atom {
                    weight: 2.0,
                    path: q,
                },
            ],
        )
        .unwrap();
        assert_eq!(consolidate(&distinct, DEDUP_TOL), distinct);
    }

    #[test]
    fn consolidating_duplicates_keeps_energy() {
        let (truth, fm) = balanced1_setup();
        let cost = StepCost::balanced(0.5, 0.5).unwrap();
        let doubled = truth.scaled(0.5).mix(0.5, &truth);
        let merged = consolidate(&doubled, DEDUP_TOL);
        assert_eq!(merged.len(), 2);
        let (a, b) = (
            energy(&doubled, &fm, &cost).total,
            energy(&merged, &fm, &cost).total,
        );
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn energy_is_convex_along_mixtures() {
        let (truth, fm) = balanced1_setup();
        let grid = truth.grid().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for cost in [
            StepCost::balanced(0.5, 0.5).unwrap(),
            StepCost::unbalanced(0.5, 0.5, 0.1).unwrap(),
        ] {
            for _ in 0..10 {
                let m0 = random_measure(&mut rng, &grid, 3);
                let m1 = random_measure(&mut rng, &grid, 2);
                let (e0, e1) = (energy(&m0, &fm, &cost).total, energy(&m1, &fm, &cost).total);
                for i in 0..=10 {
                    let lam = i as f64 / 10.0;
                    let e = energy(&m0.mix(lam, &m1), &fm, &cost).total;
                    assert!(e <= (1.0 - lam) * e0 + lam * e1 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn slices_are_linear_and_mixtures_feasible() {
        let grid = Arc::new(TimeGrid::uniform(4));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = FeasibleConfig::new(0.1).unwrap();
        for _ in 0..20 {
            let m0 = random_measure(&mut rng, &grid, 3);
            let m1 = random_measure(&mut rng, &grid, 2);
            let lam: f64 = rng.random();
            let mixed = m0.mix(lam, &m1);
            let s = mixed.time_slice(2);
            let (s0, s1) = (m0.time_slice(2), m1.time_slice(2));
            for (i, (w, _)) in s0.iter().enumerate() {
                assert!((s[i].0 - (1.0 - lam) * w).abs() < 1e-15);
            }
            for (i, (w, _)) in s1.iter().enumerate() {
                assert!((s[s0.len() + i].0 - lam * w).abs() < 1e-15);
            }
            if feasibility_margin(&m0, &cfg) >= 0.0 && feasibility_margin(&m1, &cfg) >= 0.0 {
                assert!(feasibility_margin(&mixed, &cfg) >= -1e-12);
            }
        }
    }

    #[test]
    fn solution_round_trip_keeps_energy() {
        let (truth, fm) = balanced1_setup();
        let cost = StepCost::unbalanced(0.5, 0.5, 0.1).unwrap();
        let cfg = FeasibleConfig::default();
        let e = energy(&truth, &fm, &cost);
        let file = SolutionFile::from_measure(&truth, &cfg, Some(e.clone()));
        let text = serde_json::to_string(&file).unwrap();
        let back: SolutionFile = serde_json::from_str(&text).unwrap();
        let m = back.to_measure().unwrap();
        assert!((energy(&m, &fm, &cost).total - e.total).abs() < 1e-12);
    }
}

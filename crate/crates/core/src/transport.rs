//! Per-interval transport costs and the geodesics that realise them.
//!
//! Two costs are provided: the Benamou-Brenier kinetic energy of a constant
//! velocity segment, and the Wasserstein-Fisher-Rao approximation that adds a
//! mass-averaged `alpha` term to the closed-form `alpha = 0` cone distance.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paths::{euclid, KnotPath, MassPos, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    /// Balanced transport; masses are ignored.
    Bb,
    /// Unbalanced transport allowing mass creation and destruction.
    Wfr,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub kind: CostKind,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    0.1
}

impl StepCost {
    pub fn balanced(alpha: f64, beta: f64) -> Result<Self> {
        let cost = Self {
            kind: CostKind::Bb,
            alpha,
            beta,
            delta: default_delta(),
        };
        cost.validate()?;
        Ok(cost)
    }

    pub fn unbalanced(alpha: f64, beta: f64, delta: f64) -> Result<Self> {
        let cost = Self {
            kind: CostKind::Wfr,
            alpha,
            beta,
            delta,
        };
        cost.validate()?;
        Ok(cost)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidCost(format!(
                "alpha = {} must be positive",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidCost(format!(
                "beta = {} must be positive",
                self.beta
            )));
        }
        if self.kind == CostKind::Wfr && !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidCost(format!(
                "delta = {} must be positive",
                self.delta
            )));
        }
        Ok(())
    }

    /// Whether the cost depends on the knot masses.
    pub fn uses_mass(&self) -> bool {
        self.kind == CostKind::Wfr
    }

    /// Cost of moving from `a` at time `t0` to `b` at time `t1`.
    pub fn step(&self, a: &MassPos, b: &MassPos, t0: f64, t1: f64) -> Result<f64> {
        if !(t1 > t0) {
            return Err(Error::NonPositiveInterval { t0, t1 });
        }
        Ok(self.step_parts(a.mass, &a.pos, b.mass, &b.pos, t1 - t0))
    }

    pub(crate) fn step_parts(&self, h0: f64, x0: &[f64], h1: f64, x1: &[f64], dt: f64) -> f64 {
        match self.kind {
            CostKind::Bb => {
                let d2: f64 = x0.iter().zip(x1).map(|(a, b)| (b - a) * (b - a)).sum();
                self.alpha * dt + 0.5 * self.beta * d2 / dt
            }
            CostKind::Wfr => {
                let mean = 0.5 * (h0 + h1);
                let cos = self.wfr_cos(euclid(x0, x1));
                self.alpha * mean * dt
                    + self.wfr_scale(dt) * (mean - (h0 * h1).max(0.0).sqrt() * cos)
            }
        }
    }

    /// `4 beta delta^2 / dt`, the prefactor of the cone distance.
    pub(crate) fn wfr_scale(&self, dt: f64) -> f64 {
        4.0 * self.beta * self.delta * self.delta / dt
    }

    pub(crate) fn wfr_cos(&self, dist: f64) -> f64 {
        self.wfr_angle(dist).cos()
    }

    fn wfr_angle(&self, dist: f64) -> f64 {
        (dist / (2.0 * self.delta)).min(std::f64::consts::PI)
    }

    /// Step cost written in square-root mass coordinates `r = sqrt(h)`, with
    /// its gradient accumulated into the output slices.
    ///
    /// For the balanced cost the `r` arguments are ignored and their
    /// gradients are left untouched.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn step_sqrt_grad(
        &self,
        r0: f64,
        x0: &[f64],
        r1: f64,
        x1: &[f64],
        dt: f64,
        g_r0: &mut f64,
        g_r1: &mut f64,
        g_x0: &mut [f64],
        g_x1: &mut [f64],
    ) -> f64 {
        match self.kind {
            CostKind::Bb => {
                let mut d2 = 0.0;
                let k = self.beta / dt;
                for i in 0..x0.len() {
                    let d = x1[i] - x0[i];
                    d2 += d * d;
                    g_x0[i] -= k * d;
                    g_x1[i] += k * d;
                }
                self.alpha * dt + 0.5 * self.beta * d2 / dt
            }
            CostKind::Wfr => {
                let c = self.wfr_scale(dt);
                let dist = euclid(x0, x1);
                let theta = self.wfr_angle(dist);
                let (sin, cos) = theta.sin_cos();
                let mean = 0.5 * (r0 * r0 + r1 * r1);
                *g_r0 += self.alpha * dt * r0 + c * (r0 - r1 * cos);
                *g_r1 += self.alpha * dt * r1 + c * (r1 - r0 * cos);
                if dist / (2.0 * self.delta) < std::f64::consts::PI {
                    // d/dx1 of -r0 r1 cos(|x1 - x0| / 2 delta)
                    let sinc = if theta > 1e-8 {
                        sin / theta
                    } else {
                        1.0 - theta * theta / 6.0
                    };
                    let k = c * r0 * r1 * sinc / (4.0 * self.delta * self.delta);
                    for i in 0..x0.len() {
                        let d = x1[i] - x0[i];
                        g_x0[i] -= k * d;
                        g_x1[i] += k * d;
                    }
                }
                self.alpha * mean * dt + c * (mean - r0 * r1 * cos)
            }
        }
    }

    /// The path regulariser `w`, the sum of step costs over all intervals.
    pub fn path_cost(&self, p: &KnotPath) -> f64 {
        let grid = p.grid();
        (1..p.len())
            .map(|j| self.step_parts(p.mass(j - 1), p.pos(j - 1), p.mass(j), p.pos(j), grid.dt(j)))
            .sum()
    }

    /// Tabulates the cost-minimising curve through the knots of `p`.
    ///
    /// Each interval is split into `samples_per_interval` equal pieces. Knot
    /// values are reproduced exactly.
    pub fn geodesic_interpolate(&self, p: &KnotPath, samples_per_interval: usize) -> TabulatedPath {
        let per = samples_per_interval.max(1);
        let grid = p.grid();
        let dim = p.dim();
        let mut out = TabulatedPath {
            dim,
            times: vec![grid.time(0)],
            masses: vec![p.mass(0)],
            positions: p.pos(0).to_vec(),
        };
        for j in 1..p.len() {
            let (t0, t1) = (grid.time(j - 1), grid.time(j));
            for s_idx in 1..=per {
                let s = s_idx as f64 / per as f64;
                let (h, frac) = if s_idx == per {
                    (p.mass(j), 1.0)
                } else {
                    self.interval_profile(p.mass(j - 1), p.pos(j - 1), p.mass(j), p.pos(j), s)
                };
                out.times
                    .push(if s_idx == per { t1 } else { t0 + s * (t1 - t0) });
                out.masses.push(h);
                let (x0, x1) = (p.pos(j - 1), p.pos(j));
                out.positions
                    .extend((0..dim).map(|i| x0[i] + frac * (x1[i] - x0[i])));
            }
        }
        out
    }

    /// Mass and fraction of the segment travelled at relative time `s`.
    fn interval_profile(&self, h0: f64, x0: &[f64], h1: f64, x1: &[f64], s: f64) -> (f64, f64) {
        match self.kind {
            CostKind::Bb => ((1.0 - s) * h0 + s * h1, s),
            CostKind::Wfr => {
                let (r0, r1) = (h0.max(0.0).sqrt(), h1.max(0.0).sqrt());
                if r0 == 0.0 && r1 == 0.0 {
                    return (0.0, 0.0);
                }
                let theta = self.wfr_angle(euclid(x0, x1));
                let (sin, cos) = theta.sin_cos();
                let h = (1.0 - s).powi(2) * h0 + s * s * h1 + 2.0 * s * (1.0 - s) * r0 * r1 * cos;
                let frac = if theta > 0.0 {
                    (s * r1 * sin).atan2((1.0 - s) * r0 + s * r1 * cos) / theta
                } else {
                    0.0
                };
                (h.max(0.0), frac.clamp(0.0, 1.0))
            }
        }
    }
}

/// A curve tabulated at arbitrary increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct TabulatedPath {
    pub dim: usize,
    pub times: Vec<f64>,
    pub masses: Vec<f64>,
    pub positions: Vec<f64>,
}

impl TabulatedPath {
    pub fn pos(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    /// Reinterprets the samples as knots of a finer grid.
    pub fn to_knot_path(&self) -> Result<KnotPath> {
        let grid = Arc::new(TimeGrid::new(self.times.clone())?);
        KnotPath::from_parts(grid, self.dim, self.masses.clone(), self.positions.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{sample_phantom_path, ContinuousPath};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mp(h: f64, x: f64, y: f64) -> MassPos {
        MassPos::new(h, vec![x, y])
    }

    fn wfr(alpha: f64) -> StepCost {
        // alpha > 0 is required by validation; alpha = 0 parts are checked
        // by evaluating the cone term directly.
        StepCost::unbalanced(alpha, 0.1, 0.1).unwrap()
    }

    fn cone_term(cost: &StepCost, a: &MassPos, b: &MassPos, dt: f64) -> f64 {
        cost.step_parts(a.mass, &a.pos, b.mass, &b.pos, dt)
            - cost.alpha * 0.5 * (a.mass + b.mass) * dt
    }

    #[test]
    fn balanced_examples() {
        let bb = StepCost::balanced(0.5, 0.5).unwrap();
        let x = mp(1.0, 0.3, 0.4);
        let v = bb.step(&x, &x, 0.0, 1.0 / 21.0).unwrap();
        assert!((v - 0.5 / 21.0).abs() < 1e-16);
        assert!(bb.step(&x, &x, 0.2, 0.2).is_err());
    }

    #[test]
    fn unbalanced_examples() {
        let cost = wfr(0.1);
        let dt = 1.0 / 51.0;
        let a = mp(0.7, 0.3, 0.3);
        assert!(cone_term(&cost, &a, &a, dt).abs() < 1e-16);

        let v = cone_term(&cost, &mp(1.0, 0.1, 0.9), &mp(0.0, 0.6, 0.2), dt);
        assert!((v - 0.102).abs() < 1e-14, "{v}");

        let one = mp(1.0, 0.5, 0.5);
        let full = cost.step(&one, &one, 0.0, dt).unwrap();
        assert!((full - 0.1 / 51.0).abs() < 1e-16);
    }

    #[test]
    fn unbalanced_matches_explicit_form() {
        // alpha/T (h0+h1)/2 + (beta T / 25)[(h0+h1)/2 - sqrt(h0 h1) cos(min(5|dx|, pi))]
        let cost = StepCost::unbalanced(0.1, 0.1, 0.1).unwrap();
        let t = 51.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = mp(rng.random(), rng.random(), rng.random());
            let b = mp(rng.random(), rng.random(), rng.random());
            let d = euclid(&a.pos, &b.pos);
            let mean = 0.5 * (a.mass + b.mass);
            let explicit = 0.1 / t * mean
                + 0.1 * t / 25.0
                    * (mean - (a.mass * b.mass).sqrt() * (5.0 * d).min(std::f64::consts::PI).cos());
            let v = cost.step(&a, &b, 0.0, 1.0 / t).unwrap();
            assert!((v - explicit).abs() < 1e-14);
        }
    }

    fn phantom_line() -> ContinuousPath {
        ContinuousPath::new(|_| 1.0, |t| vec![0.2 + 0.6 * t, 0.2 + 0.6 * t])
    }

    #[test]
    fn path_cost_examples() {
        let bb = StepCost::balanced(0.5, 0.5).unwrap();
        let grid = Arc::new(TimeGrid::uniform(21));
        let p = sample_phantom_path(&phantom_line(), &grid).unwrap();
        assert!((bb.path_cost(&p) - 0.68).abs() < 1e-12);

        let still = KnotPath::stationary(grid.clone(), 1.0, &[0.4, 0.6]).unwrap();
        assert!((bb.path_cost(&still) - 0.5).abs() < 1e-12);
        let cost = StepCost::unbalanced(0.3, 0.1, 0.1).unwrap();
        assert!((cost.path_cost(&still) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn balanced_cost_independent_of_resolution() {
        let bb = StepCost::balanced(0.5, 0.5).unwrap();
        let reference = 0.5 + 0.25 * 0.72;
        for steps in [1, 2, 7, 21, 64] {
            let grid = Arc::new(TimeGrid::uniform(steps));
            let p = sample_phantom_path(&phantom_line(), &grid).unwrap();
            assert!((bb.path_cost(&p) - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_examples() {
        let bb = StepCost::balanced(0.5, 0.5).unwrap();
        let grid = Arc::new(TimeGrid::uniform(1));
        let p = KnotPath::new(grid.clone(), &[mp(1.0, 0.0, 0.0), mp(1.0, 1.0, 1.0)]).unwrap();
        let tab = bb.geodesic_interpolate(&p, 2);
        assert_eq!(tab.times, vec![0.0, 0.5, 1.0]);
        assert_eq!(tab.masses[1], 1.0);
        assert_eq!(tab.pos(1), &[0.5, 0.5]);

        let cost = wfr(0.1);
        let still = KnotPath::stationary(grid.clone(), 0.6, &[0.3, 0.3]).unwrap();
        let tab = cost.geodesic_interpolate(&still, 10);
        assert!(tab.masses.iter().all(|h| (h - 0.6).abs() < 1e-15));
        assert!(tab.positions.chunks(2).all(|x| x == [0.3, 0.3]));

        let grow = KnotPath::new(grid.clone(), &[mp(0.0, 0.3, 0.3), mp(1.0, 0.4, 0.3)]).unwrap();
        let tab = cost.geodesic_interpolate(&grow, 50);
        assert!(tab.masses.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*tab.masses.last().unwrap(), 1.0);

        let empty = KnotPath::new(grid, &[mp(0.0, 0.3, 0.3), mp(0.0, 0.9, 0.9)]).unwrap();
        let tab = cost.geodesic_interpolate(&empty, 4);
        assert!(tab.positions[..8].chunks(2).all(|x| x == [0.3, 0.3]));
    }

    #[test]
    fn interpolation_does_not_increase_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let costs = [
            StepCost::balanced(0.5, 0.5).unwrap(),
            StepCost::unbalanced(0.5, 0.5, 0.1).unwrap(),
        ];
        for cost in costs {
            for _ in 0..50 {
                let grid = Arc::new(TimeGrid::uniform(5));
                let knots: Vec<_> = (0..6)
                    .map(|_| {
                        let h = if cost.uses_mass() { rng.random() } else { 1.0 };
                        mp(h, rng.random(), rng.random())
                    })
                    .collect();
                let p = KnotPath::new(grid, &knots).unwrap();
                let fine = cost.geodesic_interpolate(&p, 7).to_knot_path().unwrap();
                let (coarse, refined) = (cost.path_cost(&p), cost.path_cost(&fine));
                match cost.kind {
                    CostKind::Bb => assert!((coarse - refined).abs() < 1e-12),
                    CostKind::Wfr => {
                        assert!(refined <= coarse + 5.0 * 1e-6, "{refined} > {coarse}")
                    }
                }
            }
        }
    }

    #[test]
    fn sqrt_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cost in [
            StepCost::balanced(0.4, 0.7).unwrap(),
            StepCost::unbalanced(0.4, 0.7, 0.1).unwrap(),
        ] {
            for _ in 0..20 {
                let mut v: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..0.95)).collect();
                // keep the pair inside the cosine clamp half the time
                if rng.random::<bool>() {
                    v[4] = v[1] + rng.random_range(-0.2..0.2);
                    v[5] = v[2] + rng.random_range(-0.2..0.2);
                }
                let dt = 0.05;
                let f = |v: &[f64]| {
                    let (mut a, mut b) = (0.0, 0.0);
                    let (mut c, mut d) = ([0.0; 2], [0.0; 2]);
                    cost.step_sqrt_grad(
                        v[0],
                        &v[1..3],
                        v[3],
                        &v[4..6],
                        dt,
                        &mut a,
                        &mut b,
                        &mut c,
                        &mut d,
                    )
                };
                let (mut gr0, mut gr1) = (0.0, 0.0);
                let (mut gx0, mut gx1) = ([0.0; 2], [0.0; 2]);
                let val = cost.step_sqrt_grad(
                    v[0],
                    &v[1..3],
                    v[3],
                    &v[4..6],
                    dt,
                    &mut gr0,
                    &mut gr1,
                    &mut gx0,
                    &mut gx1,
                );
                let h = [v[0] * v[0], v[3] * v[3]];
                let direct = cost.step_parts(h[0], &v[1..3], h[1], &v[4..6], dt);
                assert!((val - direct).abs() < 1e-12);
                let an = [gr0, gx0[0], gx0[1], gr1, gx1[0], gx1[1]];
                for i in 0..6 {
                    if !cost.uses_mass() && (i == 0 || i == 3) {
                        continue;
                    }
                    let eps = 1e-6;
                    let (mut p, mut m) = (v.clone(), v.clone());
                    p[i] += eps;
                    m[i] -= eps;
                    let fd = (f(&p) - f(&m)) / (2.0 * eps);
                    let scale = an[i].abs().max(1e-3);
                    assert!(
                        (fd - an[i]).abs() / scale < 1e-5,
                        "coord {i}: {fd} vs {}",
                        an[i]
                    );
                }
            }
        }
    }

    fn arb_knot() -> impl Strategy<Value = MassPos> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(h, x, y)| mp(h, x, y))
    }

    proptest! {
        #[test]
        fn step_symmetric_nonnegative(a in arb_knot(), b in arb_knot(), dt in 0.01..0.5f64) {
            for cost in [StepCost::balanced(0.5, 0.5).unwrap(), StepCost::unbalanced(0.5, 0.5, 0.1).unwrap()] {
                let ab = cost.step(&a, &b, 0.0, dt).unwrap();
                let ba = cost.step(&b, &a, 0.0, dt).unwrap();
                prop_assert!(ab >= 0.0);
                prop_assert!((ab - ba).abs() <= 1e-12);
            }
        }

        #[test]
        fn step_flat_beyond_clamp(h0 in 0.0..1.0f64, h1 in 0.0..1.0f64, d in 0.0..0.6f64) {
            let cost = StepCost::unbalanced(0.5, 0.5, 0.1).unwrap();
            let limit = 2.0 * 0.1 * std::f64::consts::PI;
            let a = mp(h0, 0.0, 0.2);
            let far = mp(h1, 0.0, 0.2 + limit + d.min(0.7 - limit).max(0.0));
            let edge = mp(h1, 0.0, 0.2 + limit);
            let v_far = cost.step(&a, &far, 0.0, 0.1).unwrap();
            let v_edge = cost.step(&a, &edge, 0.0, 0.1).unwrap();
            prop_assert!((v_far - v_edge).abs() <= 1e-14);
        }
    }
}

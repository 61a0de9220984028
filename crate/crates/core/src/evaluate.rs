//! Comparing a reconstruction with a known ground truth.
//!
//! Atoms are paired by a minimum-cost assignment. Two pairings are offered:
//! whole paths matched once by path distance, and points matched afresh at
//! every time. The second one is insensitive to which atom carries which
//! piece of a trajectory, e.g. when two particles meet and the
//! reconstruction swaps their continuations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::AtomicMeasure;
use crate::paths::{euclid, path_distance};

/// Largest side solved exactly by the subset recursion; larger problems
/// fall back to greedy pairing.
pub const EXACT_ASSIGNMENT_LIMIT: usize = 16;

/// Pairs rows with columns minimising the summed cost. Every row is paired
/// when there are at most as many rows as columns, and vice versa.
///
/// Returns, per row, its column (if any) and the total cost.
pub fn assignment(cost: &[Vec<f64>]) -> (Vec<Option<usize>>, f64) {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return (vec![None; rows], 0.0);
    }
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| cost[r][c]).collect())
            .collect();
        let (by_col, total) = assignment(&transposed);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return (out, total);
    }
    if cols > EXACT_ASSIGNMENT_LIMIT {
        return greedy(cost);
    }
    // best[mask]: cheapest way to pair the first popcount(mask) rows with the
    // columns in mask
    let full = 1usize << cols;
    let mut best = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        let r = mask.count_ones() as usize;
        if r >= rows || !best[mask].is_finite() {
            continue;
        }
        for c in 0..cols {
            if mask & (1 << c) == 0 {
                let next = mask | (1 << c);
                let v = best[mask] + cost[r][c];
                if v < best[next] {
                    best[next] = v;
                    choice[next] = c;
                }
            }
        }
    }
    let end = (0..full)
        .filter(|m| m.count_ones() as usize == rows)
        .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
        .expect("at least one complete pairing");
    let total = best[end];
    let mut out = vec![None; rows];
    let mut mask = end;
    for r in (0..rows).rev() {
        let c = choice[mask];
        out[r] = Some(c);
        mask &= !(1 << c);
    }
    (out, total)
}

fn greedy(cost: &[Vec<f64>]) -> (Vec<Option<usize>>, f64) {
    let mut entries: Vec<(f64, usize, usize)> = cost
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &v)| (v, r, c)))
        .collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![None; cost.len()];
    let mut used = vec![false; cost[0].len()];
    let mut total = 0.0;
    for (v, r, c) in entries {
        if out[r].is_none() && !used[c] {
            out[r] = Some(c);
            used[c] = true;
            total += v;
        }
    }
    (out, total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomMatch {
    pub reconstructed: usize,
    pub truth: usize,
    pub path_distance: f64,
    /// `max_j |x_hat(t_j) - x(t_j)|` over knots where the true mass is
    /// above the floor.
    pub position_error: f64,
    /// `max_j |a_hat h_hat(t_j) - a h(t_j)|`.
    pub mass_error: f64,
    pub weight_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMatch {
    pub time: f64,
    /// Largest distance between a true point and its partner.
    pub position_error: f64,
    /// Largest mass mismatch between a true point and its partner.
    pub mass_error: f64,
    /// Mass carried by reconstructed points left without a partner.
    pub unmatched_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub reconstructed_atoms: usize,
    pub true_atoms: usize,
    pub mass_floor: f64,
    pub matches: Vec<AtomMatch>,
    pub unmatched_reconstructed: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
    pub slices: Vec<SliceMatch>,
    pub slice_position_error: f64,
    pub slice_mass_error: f64,
}

/// Matches `recon` against `truth`. Knots whose true mass `a h` is below
/// `mass_floor` carry no position information and are left out of the
/// position errors.
pub fn compare(
    recon: &AtomicMeasure,
    truth: &AtomicMeasure,
    mass_floor: f64,
) -> Result<MatchReport> {
    if recon.grid().times() != truth.grid().times() {
        return Err(Error::GridMismatch);
    }
    let scaled = |m: &AtomicMeasure| -> Vec<crate::paths::KnotPath> {
        m.atoms()
            .iter()
            .map(|a| {
                let masses = a.path.masses().iter().map(|h| a.weight * h).collect();
                crate::paths::KnotPath::from_parts(
                    a.path.grid().clone(),
                    a.path.dim(),
                    masses,
                    a.path.positions().to_vec(),
                )
            })
            .collect::<Result<_>>()
            .unwrap_or_default()
    };
    let (rp, tp) = (scaled(recon), scaled(truth));
    let cost: Vec<Vec<f64>> = rp
        .iter()
        .map(|r| {
            tp.iter()
                .map(|t| path_distance(r, t))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let (pairs, _) = assignment(&cost);

    let mut matches = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let Some(k) = *pair else { continue };
        let (r, t) = (&rp[i], &tp[k]);
        let mut position_error: f64 = 0.0;
        let mut mass_error: f64 = 0.0;
        for j in 0..t.len() {
            if t.mass(j) >= mass_floor {
                position_error = position_error.max(euclid(r.pos(j), t.pos(j)));
            }
            mass_error = mass_error.max((r.mass(j) - t.mass(j)).abs());
        }
        matches.push(AtomMatch {
            reconstructed: i,
            truth: k,
            path_distance: cost[i][k],
            position_error,
            mass_error,
            weight_error: (recon.atoms()[i].weight - truth.atoms()[k].weight).abs(),
        });
    }
    let unmatched_reconstructed = (0..rp.len()).filter(|i| pairs[*i].is_none()).collect();
    let unmatched_truth = (0..tp.len())
        .filter(|k| !pairs.contains(&Some(*k)))
        .collect();

    let slices: Vec<SliceMatch> = (0..recon.grid().len())
        .map(|j| slice_match(recon, truth, j, mass_floor))
        .collect();
    Ok(MatchReport {
        reconstructed_atoms: recon.len(),
        true_atoms: truth.len(),
        mass_floor,
        matches,
        unmatched_reconstructed,
        unmatched_truth,
        slice_position_error: slices.iter().map(|s| s.position_error).fold(0.0, f64::max),
        slice_mass_error: slices.iter().map(|s| s.mass_error).fold(0.0, f64::max),
        slices,
    })
}

/// Pairs the points of both measures at `t_j` by position.
pub fn slice_match(
    recon: &AtomicMeasure,
    truth: &AtomicMeasure,
    j: usize,
    mass_floor: f64,
) -> SliceMatch {
    let rs = recon.time_slice(j);
    let ts = truth.time_slice(j);
    let cost: Vec<Vec<f64>> = ts
        .iter()
        .map(|t| rs.iter().map(|r| euclid(&t.1, &r.1)).collect())
        .collect();
    let (pairs, _) = assignment(&cost);
    let mut out = SliceMatch {
        time: recon.grid().time(j),
        position_error: 0.0,
        mass_error: 0.0,
        unmatched_mass: 0.0,
    };
    let mut used = vec![false; rs.len()];
    for (k, pair) in pairs.iter().enumerate() {
        let (partner_mass, dist) = match pair {
            Some(i) => {
                used[*i] = true;
                (rs[*i].0, cost[k][*i])
            }
            None => (0.0, f64::INFINITY),
        };
        if ts[k].0 >= mass_floor {
            out.position_error = out.position_error.max(dist);
        }
        out.mass_error = out.mass_error.max((partner_mass - ts[k].0).abs());
    }
    out.unmatched_mass = rs
        .iter()
        .zip(&used)
        .filter(|(_, u)| !**u)
        .map(|(r, _)| r.0)
        .sum();
    out
}

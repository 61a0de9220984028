//! The discrete linear oracle: a shortest path through a layered mesh of
//! mass-position nodes.
//!
//! Node `y` of layer `j` costs `h * eta_j(x)`; moving from layer `j - 1` to
//! layer `j` costs `step_j`. Since edges only join consecutive layers, the
//! best path ending at every node follows from one sweep over the layers,
//! in time proportional to the number of nodes plus the number of edges.
//!
//! Ties go to the predecessor with the smallest node index, except between
//! masses at one position under the unbalanced cost: there the best mass
//! comes from a lower-envelope walk, and equal values may resolve to any of
//! the tied masses.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::GradientFields;
use crate::paths::{KnotPath, TimeGrid};
use crate::transport::{CostKind, StepCost};

/// Destination positions handled per parallel task.
const PAR_CHUNK: usize = 64;
/// Below this many edges per layer the sweep stays on the calling thread.
const PAR_MIN_EDGES: usize = 1 << 16;
/// Largest enumeration the brute-force oracle accepts.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Nodes of one time: `positions.len() / dim` points, each carrying
/// `per_pos` masses. Node `i` sits at position `i / per_pos` with mass
/// `masses[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    dim: usize,
    per_pos: usize,
    positions: Vec<f64>,
    masses: Vec<f64>,
}

impl Layer {
    /// Every mass level at every position.
    pub fn product(levels: &[f64], positions: Vec<f64>, dim: usize) -> Result<Self> {
        if levels.is_empty() || dim == 0 || positions.is_empty() || positions.len() % dim != 0 {
            return Err(Error::InvalidMesh("empty or malformed layer".into()));
        }
        let n_pos = positions.len() / dim;
        let masses = (0..n_pos).flat_map(|_| levels.iter().copied()).collect();
        Self::checked(Self {
            dim,
            per_pos: levels.len(),
            positions,
            masses,
        })
    }

    /// An arbitrary list of `(mass, position)` nodes.
    pub fn from_nodes(nodes: &[(f64, Vec<f64>)]) -> Result<Self> {
        let dim = nodes
            .first()
            .map(|n| n.1.len())
            .ok_or_else(|| Error::InvalidMesh("empty layer".into()))?;
        if dim == 0 || nodes.iter().any(|n| n.1.len() != dim) {
            return Err(Error::InvalidMesh("inconsistent node dimension".into()));
        }
        Self::checked(Self {
            dim,
            per_pos: 1,
            positions: nodes.iter().flat_map(|n| n.1.iter().copied()).collect(),
            masses: nodes.iter().map(|n| n.0).collect(),
        })
    }

    fn checked(self) -> Result<Self> {
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.masses.iter().all(in_unit) || !self.positions.iter().all(in_unit) {
            return Err(Error::InvalidMesh(
                "nodes must lie in [0,1] x [0,1]^d".into(),
            ));
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_positions(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn mass(&self, node: usize) -> f64 {
        self.masses[node]
    }

    pub fn pos(&self, node: usize) -> &[f64] {
        self.position(node / self.per_pos)
    }

    fn position(&self, p: usize) -> &[f64] {
        &self.positions[p * self.dim..(p + 1) * self.dim]
    }
}

/// Per-time node sets `Xi_0, ..., Xi_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    layers: Vec<Arc<Layer>>,
}

impl Mesh {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        Self::from_shared(layers.into_iter().map(Arc::new).collect())
    }

    /// Layers may be shared between times.
    pub fn from_shared(layers: Vec<Arc<Layer>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidMesh("mesh has no layers".into()));
        }
        let dim = layers[0].dim;
        if layers.iter().any(|l| l.dim != dim) {
            return Err(Error::InvalidMesh("layers differ in dimension".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Arc<Layer>] {
        &self.layers
    }

    pub fn layer(&self, j: usize) -> &Layer {
        &self.layers[j]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim
    }

    pub fn node_count(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// `sum_j |Xi_{j-1}| |Xi_j|`, the edge count without velocity pruning.
    pub fn edge_count(&self) -> usize {
        self.layers
            .windows(2)
            .map(|w| w[0].len() * w[1].len())
            .sum()
    }

    /// Number of complete paths through the mesh.
    pub fn path_count(&self) -> u128 {
        self.layers
            .iter()
            .fold(1u128, |acc, l| acc.saturating_mul(l.len() as u128))
    }
}

fn mass_levels_uniform(m: usize) -> Vec<f64> {
    if m == 0 {
        vec![1.0]
    } else {
        (0..=m).map(|i| i as f64 / m as f64).collect()
    }
}

/// Fresh independent draws per layer: `m` masses in `U[0,1]` (the single
/// mass 1 when `m = 0`) crossed with `n^dim` positions in `U[0,1]^dim`.
pub fn random_mesh(grid: &TimeGrid, n: usize, m: usize, dim: usize, seed: u64) -> Result<Mesh> {
    random_mesh_with(grid, n, m, dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_mesh_with(
    grid: &TimeGrid,
    n: usize,
    m: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> Result<Mesh> {
    if n == 0 || dim == 0 {
        return Err(Error::InvalidMesh(
            "random mesh needs n >= 1 and dim >= 1".into(),
        ));
    }
    let n_pos = n.pow(dim as u32);
    let layers = (0..grid.len())
        .map(|_| {
            let levels: Vec<f64> = if m == 0 {
                vec![1.0]
            } else {
                (0..m).map(|_| rng.random::<f64>()).collect()
            };
            let positions = (0..n_pos * dim).map(|_| rng.random::<f64>()).collect();
            Layer::product(&levels, positions, dim)
        })
        .collect::<Result<_>>()?;
    Mesh::new(layers)
}

/// The same lattice at every time: masses `{0, 1/m, ..., 1}` (or `{1}` when
/// `m = 0`) crossed with positions `{0, 1/n, ..., 1}^dim`.
pub fn uniform_mesh(grid: &TimeGrid, n: usize, m: usize, dim: usize) -> Result<Mesh> {
    if n == 0 || dim == 0 {
        return Err(Error::InvalidMesh(
            "uniform mesh needs n >= 1 and dim >= 1".into(),
        ));
    }
    let side = n + 1;
    let n_pos = side.pow(dim as u32);
    let mut positions = Vec::with_capacity(n_pos * dim);
    for idx in 0..n_pos {
        let mut rem = idx;
        for _ in 0..dim {
            positions.push((rem % side) as f64 / n as f64);
            rem /= side;
        }
    }
    let layer = Arc::new(Layer::product(&mass_levels_uniform(m), positions, dim)?);
    Mesh::from_shared(vec![layer; grid.len()])
}

/// Cached node costs `h * eta_j(x)` for every node of every layer.
#[derive(Clone, Debug)]
pub struct NodeCosts {
    pub layers: Vec<Vec<f64>>,
}

impl NodeCosts {
    pub fn evaluate(mesh: &Mesh, eta: &GradientFields) -> Self {
        assert_eq!(mesh.len(), eta.len(), "one field per mesh layer");
        let layers = mesh
            .layers
            .par_iter()
            .zip(&eta.fields)
            .map(|(layer, field)| {
                let mut out = Vec::with_capacity(layer.len());
                for p in 0..layer.n_positions() {
                    let e = field.eval(layer.position(p));
                    let base = p * layer.per_pos;
                    out.extend(
                        layer.masses[base..base + layer.per_pos]
                            .iter()
                            .map(|h| h * e),
                    );
                }
                out
            })
            .collect();
        Self { layers }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OracleStats {
    pub nodes: usize,
    /// Edges relaxed, after velocity pruning.
    pub edges: usize,
}

/// Up to `k` optimal mesh paths, one per endpoint, in order of value.
#[derive(Clone, Debug)]
pub struct OracleResult {
    pub paths: Vec<KnotPath>,
    pub values: Vec<f64>,
    /// Node index per layer for each returned path.
    pub nodes: Vec<Vec<usize>>,
    pub stats: OracleStats,
}

impl OracleResult {
    pub fn best(&self) -> Option<(f64, &KnotPath)> {
        self.values.first().map(|&v| (v, &self.paths[0]))
    }
}

fn check_inputs(mesh: &Mesh, grid: &TimeGrid, k: usize, vmax: Option<f64>) -> Result<()> {
    if mesh.len() != grid.len() {
        return Err(Error::InvalidMesh(format!(
            "mesh has {} layers, grid has {} times",
            mesh.len(),
            grid.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidMesh("k must be at least 1".into()));
    }
    if let Some(v) = vmax {
        if v.is_nan() || v < 0.0 {
            return Err(Error::InvalidMesh(format!(
                "vmax = {v} must be nonnegative"
            )));
        }
    }
    Ok(())
}

#[inline]
fn within(a: &[f64], b: &[f64], radius: f64) -> bool {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    d2 <= radius * radius
}

/// Source positions near each destination position, for velocity pruning.
struct Buckets {
    dim: usize,
    cells: usize,
    width: f64,
    offsets: Vec<u32>,
    members: Vec<u32>,
}

impl Buckets {
    fn new(layer: &Layer, radius: f64) -> Self {
        let dim = layer.dim;
        let max_cells = (65536f64.powf(1.0 / dim as f64)).floor().max(1.0) as usize;
        let cells = ((1.0 / radius.max(1e-12)).floor() as usize).clamp(1, max_cells);
        let width = 1.0 / cells as f64;
        let total = cells.pow(dim as u32);
        let keys: Vec<usize> = (0..layer.n_positions())
            .map(|p| Self::key_of(layer.position(p), cells, width))
            .collect();
        let mut offsets = vec![0u32; total + 1];
        for &k in &keys {
            offsets[k + 1] += 1;
        }
        for i in 0..total {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut members = vec![0u32; keys.len()];
        for (p, &k) in keys.iter().enumerate() {
            members[fill[k] as usize] = p as u32;
            fill[k] += 1;
        }
        Self {
            dim,
            cells,
            width,
            offsets,
            members,
        }
    }

    fn coord(v: f64, cells: usize, width: f64) -> usize {
        ((v / width).floor().max(0.0) as usize).min(cells - 1)
    }

    fn key_of(x: &[f64], cells: usize, width: f64) -> usize {
        x.iter()
            .rev()
            .fold(0, |acc, &v| acc * cells + Self::coord(v, cells, width))
    }

    /// Ascending indices of source positions in the cells adjacent to `x`.
    fn candidates(&self, x: &[f64], out: &mut Vec<u32>) {
        out.clear();
        let base: Vec<usize> = x
            .iter()
            .map(|&v| Self::coord(v, self.cells, self.width))
            .collect();
        let n_off = 3usize.pow(self.dim as u32);
        'offsets: for o in 0..n_off {
            let mut rem = o;
            let mut key = 0usize;
            let mut stride = 1usize;
            for &b in &base {
                let c = b as isize + (rem % 3) as isize - 1;
                rem /= 3;
                if c < 0 || c >= self.cells as isize {
                    continue 'offsets;
                }
                key += c as usize * stride;
                stride *= self.cells;
            }
            let (lo, hi) = (self.offsets[key] as usize, self.offsets[key + 1] as usize);
            out.extend_from_slice(&self.members[lo..hi]);
        }
        out.sort_unstable();
    }
}

/// For every source position, the lower envelope over `s` of the lines
/// `s -> v_i + lin h_i - s sqrt(h_i)`, one line per reachable mass.
///
/// An unbalanced step from `(h', x')` to `(h, x)` equals the line of `h'`
/// at `s = c cos(theta) sqrt(h)`, plus terms that do not depend on the
/// source node. The best source mass for every destination mass then comes
/// from one walk along the envelope.
#[derive(Clone, Copy)]
struct Line {
    offset: f64,
    root: f64,
    node: u32,
}

#[derive(Default)]
struct Envelopes {
    start: Vec<usize>,
    lines: Vec<Line>,
    /// Best line at `s = 0`, lowest node index among ties.
    flat: Vec<(f64, u32)>,
}

impl Envelopes {
    fn new(src: &Layer, values: &[f64], lin: f64) -> Self {
        let per = src.per_pos;
        let mut out = Self {
            start: Vec::with_capacity(src.n_positions() + 1),
            ..Self::default()
        };
        let mut lines: Vec<Line> = Vec::with_capacity(per);
        for p in 0..src.n_positions() {
            out.start.push(out.lines.len());
            lines.clear();
            let mut flat = (f64::INFINITY, u32::MAX);
            for i in p * per..(p + 1) * per {
                let v = values[i];
                if v.is_finite() {
                    let offset = v + lin * src.masses[i];
                    lines.push(Line {
                        offset,
                        root: src.masses[i].sqrt(),
                        node: i as u32,
                    });
                    if offset < flat.0 {
                        flat = (offset, i as u32);
                    }
                }
            }
            out.flat.push(flat);
            // increasing root, then lowest offset and index first
            lines.sort_by(|a, b| {
                a.root
                    .total_cmp(&b.root)
                    .then(a.offset.total_cmp(&b.offset))
                    .then(a.node.cmp(&b.node))
            });
            lines.dedup_by(|later, kept| later.root == kept.root);
            let base = out.lines.len();
            for &l in &lines {
                while out.lines.len() >= base + 2 {
                    let n = out.lines.len();
                    let (l1, l2) = (out.lines[n - 2], out.lines[n - 1]);
                    // the middle line is never strictly lowest
                    if (l.offset - l1.offset) * (l2.root - l1.root)
                        <= (l2.offset - l1.offset) * (l.root - l1.root)
                    {
                        out.lines.pop();
                    } else {
                        break;
                    }
                }
                out.lines.push(l);
            }
        }
        out.start.push(out.lines.len());
        out
    }

    /// Relaxes every destination mass against source position `p`, using
    /// `s = k sqrt(h)`. `roots` holds the destination sqrt masses in
    /// increasing order and `order` their mass indices.
    fn query(
        &self,
        p: usize,
        k: f64,
        roots: &[f64],
        order: &[usize],
        values: &mut [f64],
        preds: &mut [u32],
    ) {
        let lines = &self.lines[self.start[p]..self.start[p + 1]];
        if lines.is_empty() {
            return;
        }
        let n = order.len();
        let mut at = 0;
        for t in 0..n {
            // queries must arrive with increasing s
            let idx = if k >= 0.0 { t } else { n - 1 - t };
            let s = k * roots[idx];
            let (v, node) = if s == 0.0 {
                self.flat[p]
            } else {
                let mut best = lines[at].offset - s * lines[at].root;
                while at + 1 < lines.len() {
                    let next = lines[at + 1].offset - s * lines[at + 1].root;
                    if next < best {
                        best = next;
                        at += 1;
                    } else {
                        break;
                    }
                }
                (best, lines[at].node)
            };
            let m = order[idx];
            if v < values[m] {
                values[m] = v;
                preds[m] = node;
            }
        }
    }
}

/// Relaxes every node of `dst` from the values of `src`.
///
/// Returns per destination node the best value and predecessor (`u32::MAX`
/// when unreachable), plus the number of edges examined.
fn relax_layer(
    src: &Layer,
    src_values: &[f64],
    dst: &Layer,
    dst_costs: &[f64],
    cost: &StepCost,
    dt: f64,
    radius: Option<f64>,
) -> (Vec<f64>, Vec<u32>, usize) {
    let n_dst_pos = dst.n_positions();
    let buckets = radius.map(|r| Buckets::new(src, r));

    // Balanced steps ignore masses, so each source position only needs its
    // best mass.
    let collapsed: Option<(Vec<f64>, Vec<u32>)> = (cost.kind == CostKind::Bb).then(|| {
        (0..src.n_positions())
            .map(|p| {
                let base = p * src.per_pos;
                let mut best = (f64::INFINITY, u32::MAX);
                for (i, &v) in src_values[base..base + src.per_pos].iter().enumerate() {
                    if v < best.0 {
                        best = (v, (base + i) as u32);
                    }
                }
                best
            })
            .unzip()
    });
    // For the unbalanced kernel: sqrt masses and values shifted by the part
    // of the step that is linear in the source mass.
    let c = cost.wfr_scale(dt);
    let lin = 0.5 * (cost.alpha * dt + c);
    let far2 = {
        let r = 2.0 * std::f64::consts::PI * cost.delta;
        r * r * (1.0 + 1e-9)
    };
    let envelopes = if collapsed.is_none() {
        Envelopes::new(src, src_values, lin)
    } else {
        Envelopes::default()
    };
    // When every destination position carries the same masses, the answer
    // of a saturated (far) pair depends only on the source position.
    let per = dst.per_pos;
    let shared_masses = dst
        .masses
        .chunks(per.max(1))
        .all(|c| c == &dst.masses[..per]);
    let far_table: Option<(Vec<f64>, Vec<u32>)> =
        (collapsed.is_none() && shared_masses).then(|| {
            let roots: Vec<f64> = dst.masses[..per].iter().map(|h| h.sqrt()).collect();
            let mut order: Vec<usize> = (0..per).collect();
            order.sort_by(|&a, &b| roots[a].total_cmp(&roots[b]).then(a.cmp(&b)));
            let sorted: Vec<f64> = order.iter().map(|&m| roots[m]).collect();
            let mut values = vec![f64::INFINITY; src.n_positions() * per];
            let mut preds = vec![u32::MAX; src.n_positions() * per];
            for p in 0..src.n_positions() {
                let r = p * per..(p + 1) * per;
                envelopes.query(
                    p,
                    -c,
                    &sorted,
                    &order,
                    &mut values[r.clone()],
                    &mut preds[r],
                );
            }
            (values, preds)
        });

    let work = |q: usize, values: &mut [f64], preds: &mut [u32], scratch: &mut Vec<u32>| -> usize {
        let xq = dst.position(q);
        let candidates: Option<&[u32]> = match &buckets {
            Some(b) => {
                b.candidates(xq, scratch);
                Some(scratch.as_slice())
            }
            None => None,
        };
        let mut edges = 0usize;
        match &collapsed {
            Some((best_val, best_node)) => {
                let k = 0.5 * cost.beta / dt;
                let mut best = (f64::INFINITY, u32::MAX);
                let mut visit = |p: usize| {
                    let xp = src.position(p);
                    if let Some(r) = radius {
                        if !within(xp, xq, r) {
                            return;
                        }
                    }
                    edges += 1;
                    let d2: f64 = xp.iter().zip(xq).map(|(a, b)| (a - b) * (a - b)).sum();
                    let v = best_val[p] + k * d2;
                    if v < best.0 {
                        best = (v, best_node[p]);
                    }
                };
                match candidates {
                    Some(list) => list.iter().for_each(|&p| visit(p as usize)),
                    None => (0..src.n_positions()).for_each(&mut visit),
                }
                let add = cost.alpha * dt;
                for (m, (val, pred)) in values.iter_mut().zip(preds.iter_mut()).enumerate() {
                    *val = dst_costs[q * dst.per_pos + m] + best.0 + add;
                    *pred = best.1;
                }
                edges * src.per_pos * dst.per_pos
            }
            None => {
                values.iter_mut().for_each(|v| *v = f64::INFINITY);
                preds.iter_mut().for_each(|p| *p = u32::MAX);
                let dst_masses = &dst.masses[q * dst.per_pos..(q + 1) * dst.per_pos];
                let dst_sqrt: Vec<f64> = dst_masses.iter().map(|h| h.sqrt()).collect();
                let mut order: Vec<usize> = (0..dst.per_pos).collect();
                order.sort_by(|&a, &b| dst_sqrt[a].total_cmp(&dst_sqrt[b]).then(a.cmp(&b)));
                let roots: Vec<f64> = order.iter().map(|&m| dst_sqrt[m]).collect();
                let mut visit = |p: usize| {
                    let xp = src.position(p);
                    if let Some(r) = radius {
                        if !within(xp, xq, r) {
                            return;
                        }
                    }
                    edges += 1;
                    let d2: f64 = xp.iter().zip(xq).map(|(a, b)| (a - b) * (a - b)).sum();
                    // beyond the cutoff the angle saturates and cos is exactly -1
                    if d2 > far2 {
                        if let Some((fv, fp)) = &far_table {
                            let r = p * per..(p + 1) * per;
                            for ((v, n), (best, pred)) in fv[r.clone()]
                                .iter()
                                .zip(&fp[r])
                                .zip(values.iter_mut().zip(preds.iter_mut()))
                            {
                                if *v < *best {
                                    *best = *v;
                                    *pred = *n;
                                }
                            }
                            return;
                        }
                    }
                    let k = if d2 > far2 {
                        -c
                    } else {
                        c * cost.wfr_cos(d2.sqrt())
                    };
                    envelopes.query(p, k, &roots, &order, values, preds);
                };
                match candidates {
                    Some(list) => list.iter().for_each(|&p| visit(p as usize)),
                    None => (0..src.n_positions()).for_each(&mut visit),
                }
                for m in 0..dst.per_pos {
                    if preds[m] != u32::MAX {
                        values[m] += dst_costs[q * dst.per_pos + m] + lin * dst_masses[m];
                    }
                }
                edges * src.per_pos * dst.per_pos
            }
        }
    };

    let mut values = vec![0.0; dst.len()];
    let mut preds = vec![0u32; dst.len()];
    let per = dst.per_pos;
    let edges = if src.len() * dst.len() >= PAR_MIN_EDGES && rayon::current_num_threads() > 1 {
        values
            .par_chunks_mut(PAR_CHUNK * per)
            .zip(preds.par_chunks_mut(PAR_CHUNK * per))
            .enumerate()
            .map(|(chunk, (vals, prs))| {
                let mut scratch = Vec::new();
                let start = chunk * PAR_CHUNK;
                (0..vals.len() / per)
                    .map(|i| {
                        let q = start + i;
                        work(
                            q,
                            &mut vals[i * per..(i + 1) * per],
                            &mut prs[i * per..(i + 1) * per],
                            &mut scratch,
                        )
                    })
                    .sum::<usize>()
            })
            .sum()
    } else {
        let mut scratch = Vec::new();
        (0..n_dst_pos)
            .map(|q| {
                let (v, p) = (
                    &mut values[q * per..(q + 1) * per],
                    &mut preds[q * per..(q + 1) * per],
                );
                work(q, v, p, &mut scratch)
            })
            .sum()
    };
    (values, preds, edges)
}

/// Exact minimisers of `sum_j h_j eta_j(x_j) + sum_j step_j` over mesh
/// paths, optionally restricted to `|x_j - x_{j-1}| <= vmax dt_j`.
///
/// One optimal path is kept per final node, and the `k` best of those are
/// returned. Among equal-cost predecessors the smallest node index wins.
pub fn dp_shortest_paths(
    mesh: &Mesh,
    grid: &Arc<TimeGrid>,
    eta: &GradientFields,
    cost: &StepCost,
    k: usize,
    vmax: Option<f64>,
) -> Result<OracleResult> {
    check_inputs(mesh, grid, k, vmax)?;
    let costs = NodeCosts::evaluate(mesh, eta);
    dp_with_node_costs(mesh, grid, &costs, cost, k, vmax)
}

/// [`dp_shortest_paths`] with node costs already evaluated.
pub fn dp_with_node_costs(
    mesh: &Mesh,
    grid: &Arc<TimeGrid>,
    costs: &NodeCosts,
    cost: &StepCost,
    k: usize,
    vmax: Option<f64>,
) -> Result<OracleResult> {
    check_inputs(mesh, grid, k, vmax)?;
    let vmax = vmax.filter(|v| v.is_finite());
    let mut values = costs.layers[0].clone();
    let mut preds: Vec<Vec<u32>> = Vec::with_capacity(mesh.len());
    preds.push(Vec::new());
    let mut edges = 0;
    for j in 1..mesh.len() {
        let dt = grid.dt(j);
        let (v, p, e) = relax_layer(
            mesh.layer(j - 1),
            &values,
            mesh.layer(j),
            &costs.layers[j],
            cost,
            dt,
            vmax.map(|v| v * dt),
        );
        values = v;
        preds.push(p);
        edges += e;
    }

    let mut order: Vec<usize> = (0..values.len())
        .filter(|&i| values[i].is_finite())
        .collect();
    if order.is_empty() {
        return Err(Error::EmptyReachableSet);
    }
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order.truncate(k);

    let last = mesh.len() - 1;
    let mut result = OracleResult {
        paths: Vec::with_capacity(order.len()),
        values: Vec::with_capacity(order.len()),
        nodes: Vec::with_capacity(order.len()),
        stats: OracleStats {
            nodes: mesh.node_count(),
            edges,
        },
    };
    for end in order {
        let mut nodes = vec![0usize; mesh.len()];
        nodes[last] = end;
        for j in (1..=last).rev() {
            nodes[j - 1] = preds[j][nodes[j]] as usize;
        }
        result.paths.push(mesh_path(mesh, grid, &nodes)?);
        result.values.push(values[end]);
        result.nodes.push(nodes);
    }
    Ok(result)
}

fn mesh_path(mesh: &Mesh, grid: &Arc<TimeGrid>, nodes: &[usize]) -> Result<KnotPath> {
    let dim = mesh.dim();
    let masses = nodes
        .iter()
        .enumerate()
        .map(|(j, &n)| mesh.layer(j).mass(n))
        .collect();
    let mut positions = Vec::with_capacity(nodes.len() * dim);
    for (j, &n) in nodes.iter().enumerate() {
        positions.extend_from_slice(mesh.layer(j).pos(n));
    }
    KnotPath::from_parts(grid.clone(), dim, masses, positions)
}

/// Reference oracle enumerating every mesh path.
pub fn brute_force_oracle(
    mesh: &Mesh,
    grid: &Arc<TimeGrid>,
    eta: &GradientFields,
    cost: &StepCost,
    k: usize,
    vmax: Option<f64>,
) -> Result<OracleResult> {
    check_inputs(mesh, grid, k, vmax)?;
    let total = mesh.path_count();
    if total > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge(total));
    }
    let last = mesh.len() - 1;
    let mut best: Vec<(f64, Vec<usize>)> =
        vec![(f64::INFINITY, Vec::new()); mesh.layer(last).len()];
    let mut idx = vec![0usize; mesh.len()];
    let mut edges = 0;
    'paths: for _ in 0..total {
        let mut value = 0.0;
        for j in 0..mesh.len() {
            let layer = mesh.layer(j);
            let (h, x) = (layer.mass(idx[j]), layer.pos(idx[j]));
            value += h * eta.fields[j].eval(x);
            if j > 0 {
                let prev = mesh.layer(j - 1);
                let (h0, x0) = (prev.mass(idx[j - 1]), prev.pos(idx[j - 1]));
                if let Some(v) = vmax {
                    if v.is_finite() && !within(x0, x, v * grid.dt(j)) {
                        advance(&mut idx, mesh);
                        continue 'paths;
                    }
                }
                edges += 1;
                value += cost.step_parts(h0, x0, h, x, grid.dt(j));
            }
        }
        let slot = &mut best[idx[last]];
        if value < slot.0 {
            *slot = (value, idx.clone());
        }
        advance(&mut idx, mesh);
    }
    let mut order: Vec<usize> = (0..best.len()).filter(|&i| best[i].0.is_finite()).collect();
    if order.is_empty() {
        return Err(Error::EmptyReachableSet);
    }
    order.sort_by(|&a, &b| best[a].0.total_cmp(&best[b].0).then(a.cmp(&b)));
    order.truncate(k);
    let mut result = OracleResult {
        paths: Vec::new(),
        values: Vec::new(),
        nodes: Vec::new(),
        stats: OracleStats {
            nodes: mesh.node_count(),
            edges,
        },
    };
    for end in order {
        let (v, nodes) = best[end].clone();
        result.paths.push(mesh_path(mesh, grid, &nodes)?);
        result.values.push(v);
        result.nodes.push(nodes);
    }
    Ok(result)
}

fn advance(idx: &mut [usize], mesh: &Mesh) {
    for j in (0..idx.len()).rev() {
        idx[j] += 1;
        if idx[j] < mesh.layer(j).len() {
            return;
        }
        idx[j] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{ForwardModel, ModelTemplate, Schedule};

    fn fields_for(grid: &Arc<TimeGrid>, seed: u64) -> GradientFields {
        let template = ModelTemplate {
            grid: grid.clone(),
            frequencies: crate::forward::integer_frequencies(2, 2),
            window_sigma: 0.2,
            schedule: Schedule::All,
        };
        let fm = ForwardModel::without_data(&template).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<Vec<f64>> = (0..grid.len())
            .map(|_| {
                (0..fm.measurement_len())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        fm.eta(&u)
    }

    fn zero_fields(grid: &Arc<TimeGrid>) -> GradientFields {
        let template = ModelTemplate::desk(grid.steps(), 1, 0.0, Schedule::All);
        let fm = ForwardModel::without_data(&template).unwrap();
        fm.eta(fm.data())
    }

    #[test]
    fn random_mesh_examples() {
        let grid = TimeGrid::uniform(3);
        let mesh = random_mesh(&grid, 3, 0, 2, 1).unwrap();
        assert!(mesh.layers().iter().all(|l| l.len() == 9));
        assert!(mesh
            .layers()
            .iter()
            .all(|l| l.masses.iter().all(|&h| h == 1.0)));
        let mesh = random_mesh(&grid, 1, 0, 2, 1).unwrap();
        assert!(mesh.layers().iter().all(|l| l.len() == 1));
        let mesh = random_mesh(&grid, 2, 3, 2, 1).unwrap();
        assert!(mesh.layers().iter().all(|l| l.len() == 12));
        assert_ne!(mesh.layer(0), mesh.layer(1));
        assert_eq!(mesh, random_mesh(&grid, 2, 3, 2, 1).unwrap());
    }

    #[test]
    fn uniform_mesh_examples() {
        let grid = TimeGrid::uniform(2);
        let corners = uniform_mesh(&grid, 1, 0, 2).unwrap();
        assert_eq!(corners.layer(0).len(), 4);
        assert_eq!(uniform_mesh(&grid, 16, 0, 2).unwrap().layer(1).len(), 289);
        let massive = uniform_mesh(&grid, 2, 10, 2).unwrap();
        let levels = &massive.layer(0).masses[..11];
        assert_eq!(levels.first(), Some(&0.0));
        assert_eq!(levels.last(), Some(&1.0));
        assert_eq!(massive.layer(0).len(), 11 * 9);
    }

    #[test]
    fn single_layer_picks_best_node() {
        let grid = Arc::new(TimeGrid::uniform(0));
        let eta = fields_for(&grid, 3);
        let mesh = uniform_mesh(&grid, 8, 0, 2).unwrap();
        let cost = StepCost::balanced(0.5, 0.5).unwrap();
        let res = dp_shortest_paths(&mesh, &grid, &eta, &cost, 1, None).unwrap();
        let layer = mesh.layer(0);
        let best = (0..layer.len())
            .map(|i| layer.mass(i) * eta.fields[0].eval(layer.pos(i)))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(res.values[0], best);
    }

    #[test]
    fn zero_field_prefers_stationary_paths() {
        let grid = Arc::new(TimeGrid::uniform(4));
        let eta = zero_fields(&grid);
        let mesh = uniform_mesh(&grid, 3, 0, 2).unwrap();
        let cost = StepCost::balanced(0.5, 0.5).unwrap();
        let res = dp_shortest_paths(&mesh, &grid, &eta, &cost, 1, None).unwrap();
        assert!((res.values[0] - 0.5).abs() < 1e-12);
        assert!(res.nodes[0].iter().all(|&n| n == res.nodes[0][0]));
        assert_eq!(res.nodes[0][0], 0);
    }

    #[test]
    fn dp_matches_brute_force_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let grid = Arc::new(TimeGrid::uniform(3));
            let layers = (0..4)
                .map(|_| {
                    let nodes: Vec<(f64, Vec<f64>)> = (0..5)
                        .map(|_| (rng.random(), vec![rng.random(), rng.random()]))
                        .collect();
                    Layer::from_nodes(&nodes).unwrap()
                })
                .collect();
            let mesh = Mesh::new(layers).unwrap();
            let eta = fields_for(&grid, trial);
            let cost = if trial % 2 == 0 {
                StepCost::balanced(0.3, 0.7).unwrap()
            } else {
                StepCost::unbalanced(0.3, 0.7, 0.1).unwrap()
            };
            let vmax = if trial % 3 == 0 { Some(4.0) } else { None };
            let dp = dp_shortest_paths(&mesh, &grid, &eta, &cost, 1, vmax);
            let bf = brute_force_oracle(&mesh, &grid, &eta, &cost, 1, vmax);
            match (dp, bf) {
                (Ok(dp), Ok(bf)) => assert!((dp.values[0] - bf.values[0]).abs() <= 1e-12),
                (Err(Error::EmptyReachableSet), Err(Error::EmptyReachableSet)) => {}
                (a, b) => panic!("disagreement: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn unbalanced_sweep_matches_brute_force_with_many_masses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..60 {
            let grid = Arc::new(TimeGrid::uniform(2));
            let layers = (0..3)
                .map(|_| {
                    // repeated and zero levels exercise the tie handling
                    let mut levels: Vec<f64> = (0..4).map(|_| rng.random()).collect();
                    levels[0] = 0.0;
                    if trial % 2 == 0 {
                        levels[3] = levels[2];
                    }
                    let positions = (0..6).map(|_| rng.random()).collect();
                    Layer::product(&levels, positions, 2).unwrap()
                })
                .collect();
            let mesh = Mesh::new(layers).unwrap();
            let eta = fields_for(&grid, 100 + trial);
            let cost = StepCost::unbalanced(0.2, 0.8, 0.05 + 0.1 * rng.random::<f64>()).unwrap();
            let n = mesh.layer(2).len();
            let dp = dp_shortest_paths(&mesh, &grid, &eta, &cost, n, None).unwrap();
            let bf = brute_force_oracle(&mesh, &grid, &eta, &cost, n, None).unwrap();
            for (a, b) in dp.values.iter().zip(&bf.values) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn k_best_lists_every_endpoint() {
        let grid = Arc::new(TimeGrid::uniform(2));
        let mesh = uniform_mesh(&grid, 2, 2, 2).unwrap();
        let eta = fields_for(&grid, 5);
        let cost = StepCost::unbalanced(0.2, 0.5, 0.1).unwrap();
        let n = mesh.layer(2).len();
        let dp = dp_shortest_paths(&mesh, &grid, &eta, &cost, n + 5, None).unwrap();
        let bf = brute_force_oracle(&mesh, &grid, &eta, &cost, n, None).unwrap();
        assert_eq!(dp.values.len(), n);
        assert!(dp.values.windows(2).all(|w| w[0] <= w[1]));
        for (a, b) in dp.values.iter().zip(&bf.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn infinite_vmax_is_unrestricted() {
        let grid = Arc::new(TimeGrid::uniform(3));
        let mesh = random_mesh(&grid, 2, 2, 2, 9).unwrap();
        let eta = fields_for(&grid, 9);
        let cost = StepCost::unbalanced(0.2, 0.5, 0.1).unwrap();
        let a = brute_force_oracle(&mesh, &grid, &eta, &cost, 3, Some(f64::INFINITY)).unwrap();
        let b = brute_force_oracle(&mesh, &grid, &eta, &cost, 3, None).unwrap();
        assert_eq!(a.values, b.values);
        let c = dp_shortest_paths(&mesh, &grid, &eta, &cost, 3, Some(f64::INFINITY)).unwrap();
        for (x, y) in c.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_vmax_can_empty_the_graph() {
        let grid = Arc::new(TimeGrid::uniform(2));
        let layers = vec![
            Layer::from_nodes(&[(1.0, vec![0.0, 0.0])]).unwrap(),
            Layer::from_nodes(&[(1.0, vec![1.0, 1.0])]).unwrap(),
            Layer::from_nodes(&[(1.0, vec![0.0, 0.0])]).unwrap(),
        ];
        let mesh = Mesh::new(layers).unwrap();
        let eta = fields_for(&grid, 1);
        let cost = StepCost::balanced(0.5, 0.5).unwrap();
        assert!(matches!(
            dp_shortest_paths(&mesh, &grid, &eta, &cost, 1, Some(0.5)),
            Err(Error::EmptyReachableSet)
        ));
        assert!(matches!(
            brute_force_oracle(&mesh, &grid, &eta, &cost, 1, Some(0.5)),
            Err(Error::EmptyReachableSet)
        ));
    }

    #[test]
    fn velocity_pruning_matches_full_sweep_on_large_mesh() {
        let grid = Arc::new(TimeGrid::uniform(6));
        let mesh = uniform_mesh(&grid, 12, 0, 2).unwrap();
        let eta = fields_for(&grid, 17);
        let cost = StepCost::balanced(0.1, 0.01).unwrap();
        let vmax = 1.5;
        let pruned = dp_shortest_paths(&mesh, &grid, &eta, &cost, 4, Some(vmax)).unwrap();
        assert!(pruned.stats.edges < mesh.edge_count() / 2);
        // the same restriction applied by filtering a full sweep
        for (path, value) in pruned.paths.iter().zip(&pruned.values) {
            for j in 1..path.len() {
                assert!(within(path.pos(j - 1), path.pos(j), vmax * grid.dt(j)));
            }
            let direct: f64 = (0..path.len())
                .map(|j| path.mass(j) * eta.fields[j].eval(path.pos(j)))
                .sum::<f64>()
                + cost.path_cost(path);
            assert!((direct - value).abs() < 1e-12);
        }
        let free = dp_shortest_paths(&mesh, &grid, &eta, &cost, 1, None).unwrap();
        assert!(free.values[0] <= pruned.values[0] + 1e-12);
    }

    #[test]
    fn adding_nodes_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..30 {
            let grid = Arc::new(TimeGrid::uniform(3));
            let node_lists: Vec<Vec<(f64, Vec<f64>)>> = (0..4)
                .map(|_| {
                    (0..4)
                        .map(|_| (rng.random(), vec![rng.random(), rng.random()]))
                        .collect()
                })
                .collect();
            let mesh = Mesh::new(
                node_lists
                    .iter()
                    .map(|n| Layer::from_nodes(n).unwrap())
                    .collect(),
            )
            .unwrap();
            let mut bigger = node_lists.clone();
            let j = rng.random_range(0..4);
            bigger[j].push((rng.random(), vec![rng.random(), rng.random()]));
            let big = Mesh::new(
                bigger
                    .iter()
                    .map(|n| Layer::from_nodes(n).unwrap())
                    .collect(),
            )
            .unwrap();
            let eta = fields_for(&grid, trial);
            let cost = StepCost::unbalanced(0.3, 0.4, 0.1).unwrap();
            let a = dp_shortest_paths(&mesh, &grid, &eta, &cost, 1, None).unwrap();
            let b = dp_shortest_paths(&big, &grid, &eta, &cost, 1, None).unwrap();
            assert!(b.values[0] <= a.values[0] + 1e-15);
        }
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let grid = Arc::new(TimeGrid::uniform(5));
        let mesh = uniform_mesh(&grid, 4, 0, 2).unwrap();
        let eta = zero_fields(&grid);
        let cost = StepCost::balanced(0.5, 0.5).unwrap();
        assert!(matches!(
            brute_force_oracle(&mesh, &grid, &eta, &cost, 1, None),
            Err(Error::InstanceTooLarge(_))
        ));
    }
}

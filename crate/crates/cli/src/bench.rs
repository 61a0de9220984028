//! Timing of the mesh oracle's sweep.

use std::sync::Arc;
use std::time::Instant;

use anyhow::{ensure, Result};
use dpfw::forward::{ForwardModel, ModelTemplate, Schedule};
use dpfw::oracle::{dp_with_node_costs, uniform_mesh, Layer, Mesh, NodeCosts};
use dpfw::paths::TimeGrid;
use dpfw::transport::StepCost;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which family of meshes to time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchMesh {
    /// `n` evenly spaced positions on the horizontal midline, each carrying
    /// the mass levels `0, 0.1, ..., 1`, with the unbalanced cost. Nodes
    /// per layer grow linearly in `n`.
    Nodes,
    /// The `(n + 1)^2` lattice with unit mass and the balanced cost.
    Lattice,
}

/// Mass levels per position of the `Nodes` family.
pub const NODE_LEVELS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub nodes_per_layer: usize,
    pub edges: usize,
    /// Best observed time of one sweep.
    pub seconds: f64,
    /// Time relative to the previous row.
    pub ratio: Option<f64>,
}

pub fn bench_mesh(kind: BenchMesh, grid: &TimeGrid, n: usize) -> Result<(Mesh, StepCost)> {
    Ok(match kind {
        BenchMesh::Nodes => {
            ensure!(n >= 2, "the node family needs at least two positions");
            let levels: Vec<f64> = (0..=NODE_LEVELS)
                .map(|i| i as f64 / NODE_LEVELS as f64)
                .collect();
            let positions: Vec<f64> = (0..n)
                .flat_map(|i| [i as f64 / (n - 1) as f64, 0.5])
                .collect();
            let layer = Arc::new(Layer::product(&levels, positions, 2)?);
            let mesh = Mesh::from_shared(vec![layer; grid.len()])?;
            (mesh, StepCost::unbalanced(0.5, 0.5, 0.1)?)
        }
        BenchMesh::Lattice => (uniform_mesh(grid, n, 0, 2)?, StepCost::balanced(0.5, 0.5)?),
    })
}

/// Times one oracle sweep per size. Node costs come from a fixed random
/// field and are evaluated once, outside the timed region.
pub fn run(
    kind: BenchMesh,
    steps: usize,
    sizes: &[usize],
    min_seconds: f64,
) -> Result<Vec<BenchRow>> {
    let template = ModelTemplate::desk(steps, 3, 0.2, Schedule::All);
    let grid: Arc<TimeGrid> = template.grid.clone();
    let fm = ForwardModel::without_data(&template)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let u: Vec<Vec<f64>> = (0..grid.len())
        .map(|_| {
            (0..fm.measurement_len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let eta = fm.eta(&u);

    let mut rows: Vec<BenchRow> = Vec::new();
    for &n in sizes {
        let (mesh, cost) = bench_mesh(kind, &grid, n)?;
        let costs = NodeCosts::evaluate(&mesh, &eta);
        let sweep = || dp_with_node_costs(&mesh, &grid, &costs, &cost, 1, None);
        sweep()?;
        // grow the batch until it is long enough to time reliably
        let mut reps = 1usize;
        loop {
            let t = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(sweep()?);
            }
            if t.elapsed().as_secs_f64() >= min_seconds / 5.0 || reps >= 1 << 20 {
                break;
            }
            reps *= 2;
        }
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let t = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(sweep()?);
            }
            best = best.min(t.elapsed().as_secs_f64() / reps as f64);
        }
        let ratio = rows.last().map(|r| best / r.seconds);
        rows.push(BenchRow {
            n,
            nodes_per_layer: mesh.layer(0).len(),
            edges: mesh.edge_count(),
            seconds: best,
            ratio,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n,nodes_per_layer,edges,seconds,ratio\n");
    for r in rows {
        let ratio = r.ratio.map(|v| format!("{v:.3}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{:e},{}\n",
            r.n, r.nodes_per_layer, r.edges, r.seconds, ratio
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_mesh_has_requested_size() {
        let grid = TimeGrid::uniform(20);
        for n in [8, 16, 32] {
            let (mesh, _) = bench_mesh(BenchMesh::Nodes, &grid, n).unwrap();
            assert_eq!(mesh.layer(0).len(), n * (NODE_LEVELS + 1));
            assert_eq!(mesh.len(), 21);
        }
        assert!(bench_mesh(BenchMesh::Nodes, &grid, 1).is_err());
    }

    #[test]
    fn csv_has_one_row_per_size() {
        let rows = run(BenchMesh::Lattice, 3, &[2, 4], 0.001).unwrap();
        let csv = to_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(rows[1].ratio.is_some());
    }
}

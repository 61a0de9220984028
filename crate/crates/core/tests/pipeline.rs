use dpfw::forward::{ForwardModel, ModelTemplate, Schedule};
use dpfw::measures::{energy, feasibility_margin, FeasibleConfig, SolutionFile};
use dpfw::oracle::{dp_shortest_paths, random_mesh, uniform_mesh};
use dpfw::phantoms::{make_phantom, synthesize_data};
use dpfw::solver::{linearize, linearized_energy, solve, MeshStrategy, SolverConfig, StopReason};
use dpfw::transport::StepCost;

fn data(name: &str, steps: usize) -> ForwardModel {
    let ph = make_phantom(name).unwrap();
    synthesize_data(
        &ph,
        &ModelTemplate::desk(steps, 2, 0.2, Schedule::All),
        0.0,
        0,
    )
    .unwrap()
}

#[test]
fn oracle_values_equal_the_linearised_energy_of_their_paths() {
    let fm = data("unbalanced2", 4);
    let grid = fm.grid().clone();
    let truth = make_phantom("unbalanced2").unwrap().sample(&grid).unwrap();
    // half of the truth leaves a residual with structure
    let eta = linearize(&truth.scaled(0.5), &fm);
    for (mesh, cost) in [
        (
            uniform_mesh(&grid, 6, 0, 2).unwrap(),
            StepCost::balanced(0.5, 0.5).unwrap(),
        ),
        (
            uniform_mesh(&grid, 4, 3, 2).unwrap(),
            StepCost::unbalanced(0.5, 0.5, 0.1).unwrap(),
        ),
        (
            random_mesh(&grid, 5, 4, 2, 3).unwrap(),
            StepCost::unbalanced(0.3, 0.8, 0.2).unwrap(),
        ),
    ] {
        let res = dp_shortest_paths(&mesh, &grid, &eta, &cost, 4, None).unwrap();
        for (path, value) in res.paths.iter().zip(&res.values) {
            let direct = linearized_energy(path, &eta, &cost);
            assert!(
                (direct - value).abs() <= 1e-10 * value.abs().max(1.0),
                "{direct} vs {value}"
            );
        }
    }
}

#[test]
fn small_unbalanced_solve_is_monotone_feasible_and_certified() {
    let fm = data("unbalanced1", 6);
    let cost = StepCost::unbalanced(0.5, 0.5, 0.1).unwrap();
    let mut cfg = SolverConfig::new(MeshStrategy::Uniform { k: 2, n: 6, m: 3 }, cost);
    cfg.max_iters = 200;
    let out = solve(&cfg, &fm).unwrap();
    assert_eq!(out.stop, StopReason::UniformConverged);
    for w in out.records.windows(2) {
        assert!(w[1].energy <= w[0].energy + 1e-10);
    }
    assert!(out.records.last().unwrap().gap >= -1e-8);
    assert!(feasibility_margin(&out.measure, &FeasibleConfig::new(cfg.phi0).unwrap()) >= -1e-12);
    let final_energy = energy(&out.measure, &fm, &cost).total;
    assert!((final_energy - out.records.last().unwrap().energy).abs() <= 1e-12 * final_energy);
    assert!(final_energy < out.records[0].energy);
}

#[test]
fn saved_solution_and_data_reproduce_the_energy() {
    let fm = data("balanced2", 5);
    let cost = StepCost::balanced(0.5, 0.5).unwrap();
    let mut cfg = SolverConfig::new(
        MeshStrategy::Random {
            k: 1,
            n: 6,
            m: 0,
            seed: 2,
        },
        cost,
    );
    cfg.max_iters = 5;
    let out = solve(&cfg, &fm).unwrap();
    assert_eq!(out.stop, StopReason::MaxIters);

    let report = energy(&out.measure, &fm, &cost);
    let file = SolutionFile::from_measure(
        &out.measure,
        &FeasibleConfig::new(cfg.phi0).unwrap(),
        Some(report.clone()),
    );
    let file: SolutionFile = serde_json::from_str(&serde_json::to_string(&file).unwrap()).unwrap();
    let fm2 = ForwardModel::from_json(&fm.to_json().unwrap()).unwrap();
    let again = energy(&file.to_measure().unwrap(), &fm2, &cost);
    assert!((again.total - report.total).abs() <= 1e-12 * report.total);
}

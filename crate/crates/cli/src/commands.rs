use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use dpfw::evaluate::compare;
use dpfw::forward::{ForwardModel, ModelTemplate, Schedule};
use dpfw::measures::{energy, AtomicMeasure, EnergyReport, FeasibleConfig, SolutionFile};
use dpfw::phantoms::{make_phantom, synthesize_data};
use dpfw::solver::{convergence_csv, solve_with, StopReason};
use dpfw::transport::{CostKind, StepCost};
use serde::Serialize;

use crate::bench::{self, BenchMesh};
use crate::config::{RunConfig, Strategy};

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_solution(path: &Path) -> Result<SolutionFile> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// balanced1, balanced2, unbalanced1 or unbalanced2
    #[arg(long)]
    pub name: String,
    #[arg(long, default_value_t = 21)]
    pub steps: usize,
    #[arg(long, default_value_t = 3)]
    pub max_k: i64,
    #[arg(long, default_value_t = 0.2)]
    pub window_sigma: f64,
    #[arg(long, value_enum, default_value = "all")]
    pub schedule: ScheduleArg,
    /// Noise norm relative to the clean data norm.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub phi0: f64,
    /// Where to write the measurements.
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the sampled ground truth.
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum ScheduleArg {
    All,
    Rotate,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::All => Schedule::All,
            ScheduleArg::Rotate => Schedule::Rotate,
        }
    }
}

pub fn phantom(args: &PhantomArgs) -> Result<()> {
    let ph = make_phantom(&args.name)?;
    let template = ModelTemplate::desk(
        args.steps,
        args.max_k,
        args.window_sigma,
        args.schedule.into(),
    );
    let fm = synthesize_data(&ph, &template, args.noise, args.seed)?;
    let truth = ph.sample(&template.grid)?;
    write(&args.data, &fm.to_json()?)?;
    let file = SolutionFile::from_measure(&truth, &FeasibleConfig::new(args.phi0)?, None);
    write(&args.truth, &serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

#[derive(Args, Debug, Default)]
pub struct ReconstructArgs {
    /// TOML run configuration; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub phantom: Option<String>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub cost: Option<CostArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub phi0: Option<f64>,
    #[arg(long, value_enum)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Seed of the random mesh, and of the noise when synthesising data.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub vmax: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub gap_tol: Option<f64>,
    #[arg(long)]
    pub solution: Option<PathBuf>,
    #[arg(long)]
    pub convergence: Option<PathBuf>,
    /// Print every iteration to stderr.
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum CostArg {
    Bb,
    Wfr,
}

impl ReconstructArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let p = &mut cfg.problem;
        if let Some(d) = &self.data {
            p.data = Some(d.clone());
        }
        if let Some(name) = &self.phantom {
            p.phantom = Some(name.clone());
            if self.data.is_none() {
                p.data = None;
            }
        }
        set(&mut p.noise, self.noise);
        if let Some(c) = self.cost {
            p.cost = match c {
                CostArg::Bb => CostKind::Bb,
                CostArg::Wfr => CostKind::Wfr,
            };
        }
        set(&mut p.alpha, self.alpha);
        set(&mut p.beta, self.beta);
        set(&mut p.delta, self.delta);
        set(&mut p.phi0, self.phi0);
        set(&mut p.seed, self.seed);
        let m = &mut cfg.mesh;
        set(&mut m.strategy, self.strategy);
        set(&mut m.k, self.k);
        set(&mut m.n, self.n);
        set(&mut m.m, self.m);
        set(&mut m.seed, self.seed);
        if self.vmax.is_some() {
            m.vmax = self.vmax;
        }
        set(&mut cfg.solver.max_iters, self.max_iters);
        if self.gap_tol.is_some() {
            cfg.solver.gap_tol = self.gap_tol;
        }
        if let Some(s) = &self.solution {
            cfg.output.solution = s.clone();
        }
        if let Some(c) = &self.convergence {
            cfg.output.convergence = c.clone();
        }
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Runs the solver; the returned code is 0 for a certified stop and 2 when
/// the iteration budget ran out.
pub fn reconstruct(args: &ReconstructArgs) -> Result<i32> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    args.apply(&mut cfg);
    cfg.validate()?;
    let fm = cfg.forward_model()?;
    let solver = cfg.solver_config()?;
    let verbose = args.verbose;
    let out = solve_with(&solver, &fm, &mut |r| {
        if verbose {
            eprintln!(
                "iter {:>4}  E {:.10e}  gap {:+.3e}  atoms {:>3}  N {:>3}  {:.0} ms",
                r.iter, r.energy, r.gap, r.atoms, r.mesh_n, r.time_ms
            );
        }
    })?;
    let report = energy(&out.measure, &fm, &solver.cost);
    let file = SolutionFile::from_measure(
        &out.measure,
        &FeasibleConfig::new(solver.phi0)?,
        Some(report.clone()),
    );
    write(&cfg.output.solution, &serde_json::to_string_pretty(&file)?)?;
    write(&cfg.output.convergence, &convergence_csv(&out.records))?;
    println!(
        "{:?}: energy {:.10e}, {} atoms, {} iterations",
        out.stop,
        report.total,
        out.measure.len(),
        out.records.len() - 1
    );
    Ok(match out.stop {
        StopReason::UniformConverged | StopReason::GapBelow(_) => 0,
        StopReason::MaxIters => 2,
    })
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub solution: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Knots whose true mass is below this are left out of position errors.
    #[arg(long, default_value_t = 0.0)]
    pub mass_floor: f64,
    /// Data file; when given, energies of both measures are reported.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bb")]
    pub cost: CostArg,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
}

#[derive(Serialize)]
struct Evaluation {
    matching: dpfw::evaluate::MatchReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    solution_energy: Option<EnergyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth_energy: Option<EnergyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    relative_residual: Option<f64>,
}

pub fn relative_residual(m: &AtomicMeasure, fm: &ForwardModel) -> f64 {
    let u = m.measurements(fm);
    let (mut num, mut den) = (0.0, 0.0);
    for (uj, bj) in u.iter().zip(fm.data()) {
        for (a, b) in uj.iter().zip(bj) {
            num += (a - b) * (a - b);
            den += b * b;
        }
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

pub fn evaluate(args: &EvaluateArgs) -> Result<String> {
    let solution = read_solution(&args.solution)?.to_measure()?;
    let truth = read_solution(&args.truth)?.to_measure()?;
    let matching = compare(&solution, &truth, args.mass_floor)?;
    let mut eval = Evaluation {
        matching,
        solution_energy: None,
        truth_energy: None,
        relative_residual: None,
    };
    if let Some(path) = &args.data {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let fm = ForwardModel::from_json(&text)?;
        let cost = match args.cost {
            CostArg::Bb => StepCost::balanced(args.alpha, args.beta)?,
            CostArg::Wfr => StepCost::unbalanced(args.alpha, args.beta, args.delta)?,
        };
        eval.solution_energy = Some(energy(&solution, &fm, &cost));
        eval.truth_energy = Some(energy(&truth, &fm, &cost));
        eval.relative_residual = Some(relative_residual(&solution, &fm));
    }
    Ok(serde_json::to_string_pretty(&eval)?)
}

#[derive(Args, Debug)]
pub struct OracleBenchArgs {
    #[arg(long, value_enum, default_value = "nodes")]
    pub mesh: BenchMesh,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub sizes: Vec<usize>,
    /// Minimum timed duration per size, in seconds.
    #[arg(long, default_value_t = 0.25)]
    pub min_time: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn oracle_bench(args: &OracleBenchArgs) -> Result<String> {
    let rows = bench::run(args.mesh, args.steps, &args.sizes, args.min_time)?;
    let csv = bench::to_csv(&rows);
    if let Some(path) = &args.out {
        write(path, &csv)?;
    }
    Ok(csv)
}

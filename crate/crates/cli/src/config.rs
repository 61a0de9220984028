//! Run configuration: a TOML file with `[problem]`, `[mesh]`, `[solver]`
//! and `[output]` sections. Every key has a default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dpfw::forward::{ForwardModel, ModelTemplate, Schedule};
use dpfw::localopt::MinimizeOptions;
use dpfw::phantoms::{make_phantom, synthesize_data};
use dpfw::solver::{MeshStrategy, SolverConfig};
use dpfw::transport::{CostKind, StepCost};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub mesh: MeshSection,
    pub solver: SolverSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    /// Data file written by `phantom`. Takes precedence over `phantom`.
    pub data: Option<PathBuf>,
    /// Phantom to synthesise data from when no data file is given.
    pub phantom: Option<String>,
    pub noise: f64,
    pub seed: u64,
    pub steps: usize,
    pub max_k: i64,
    pub window_sigma: f64,
    pub schedule: Schedule,
    pub cost: CostKind,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub phi0: f64,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            data: None,
            phantom: None,
            noise: 0.0,
            seed: 0,
            steps: 21,
            max_k: 3,
            window_sigma: 0.2,
            schedule: Schedule::All,
            cost: CostKind::Bb,
            alpha: 0.5,
            beta: 0.5,
            delta: 0.1,
            phi0: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Uniform,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    pub strategy: Strategy,
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub vmax: Option<f64>,
}

impl Default for MeshSection {
    fn default() -> Self {
        Self {
            strategy: Strategy::Uniform,
            k: 1,
            n: 64,
            m: 0,
            seed: 0,
            vmax: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub max_iters: usize,
    pub slide_max_iter: usize,
    pub slide_gtol: f64,
    pub slide_memory: usize,
    pub dedup_tol: f64,
    pub stall_tol: f64,
    pub gap_tol: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        let slide = MinimizeOptions::default();
        Self {
            max_iters: 1000,
            slide_max_iter: slide.max_iter,
            slide_gtol: slide.gtol,
            slide_memory: slide.memory,
            dedup_tol: dpfw::measures::DEDUP_TOL,
            stall_tol: 1e-10,
            gap_tol: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub solution: PathBuf,
    pub convergence: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            solution: PathBuf::from("solution.json"),
            convergence: PathBuf::from("convergence.csv"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.problem;
        if p.data.is_none() && p.phantom.is_none() {
            bail!("[problem] needs either `data` or `phantom`");
        }
        if let Some(d) = &p.data {
            if !d.exists() {
                bail!("data file {} does not exist", d.display());
            }
        }
        if !(p.noise >= 0.0) {
            bail!("noise must be nonnegative");
        }
        if p.steps == 0 || p.max_k < 0 {
            bail!("steps must be positive and max_k nonnegative");
        }
        let m = &self.mesh;
        if m.k == 0 || m.n == 0 {
            bail!("[mesh] needs k >= 1 and n >= 1");
        }
        self.solver_config()?.validate()?;
        Ok(())
    }

    pub fn cost(&self) -> Result<StepCost> {
        let p = &self.problem;
        Ok(match p.cost {
            CostKind::Bb => StepCost::balanced(p.alpha, p.beta)?,
            CostKind::Wfr => StepCost::unbalanced(p.alpha, p.beta, p.delta)?,
        })
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let m = &self.mesh;
        let mesh = match m.strategy {
            Strategy::Uniform => MeshStrategy::Uniform {
                k: m.k,
                n: m.n,
                m: m.m,
            },
            Strategy::Random => MeshStrategy::Random {
                k: m.k,
                n: m.n,
                m: m.m,
                seed: m.seed,
            },
        };
        let s = &self.solver;
        let mut cfg = SolverConfig::new(mesh, self.cost()?);
        cfg.phi0 = self.problem.phi0;
        cfg.max_iters = s.max_iters;
        cfg.slide = MinimizeOptions {
            max_iter: s.slide_max_iter,
            gtol: s.slide_gtol,
            memory: s.slide_memory,
            ..MinimizeOptions::default()
        };
        cfg.dedup_tol = s.dedup_tol;
        cfg.stall_tol = s.stall_tol;
        cfg.gap_tol = s.gap_tol;
        cfg.vmax = m.vmax;
        Ok(cfg)
    }

    pub fn template(&self) -> ModelTemplate {
        let p = &self.problem;
        ModelTemplate::desk(p.steps, p.max_k, p.window_sigma, p.schedule)
    }

    /// Reads the data file, or synthesises data from the phantom.
    pub fn forward_model(&self) -> Result<ForwardModel> {
        let p = &self.problem;
        if let Some(path) = &p.data {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            return ForwardModel::from_json(&text)
                .with_context(|| format!("parsing {}", path.display()));
        }
        let name = p
            .phantom
            .as_deref()
            .context("no data file and no phantom")?;
        Ok(synthesize_data(
            &make_phantom(name)?,
            &self.template(),
            p.noise,
            p.seed,
        )?)
    }
}

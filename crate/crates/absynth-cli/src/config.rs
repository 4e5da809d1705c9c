//! TOML run configuration and its resolution into a ready-to-run setup.
//!
//! A configuration either names a built-in benchmark or describes a custom
//! affine system; the two are mutually exclusive. Benchmarks bring their own
//! task, discretization, guidance windows and expert defaults, each of which
//! the file may override. Custom systems must spell all of those out.
//! Unknown keys anywhere are rejected so typos cannot silently fall back to
//! defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use absynth::bench::{make_benchmark, BenchmarkId, BenchmarkParams};
use absynth::controller::Specification;
use absynth::error::{Error, Result};
use absynth::geom::HyperRect;
use absynth::grid::GridSpec;
use absynth::model::StochasticSystem;
use absynth::policy::TrainConfig;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    run: RunSection,
    grid: Option<GridSection>,
    specification: Option<SpecSection>,
    synthesis: SynthSection,
    nn: NnSection,
    expert: ExpertSection,
    evaluate: EvalSection,
    benchmark_params: Option<BenchmarkParams>,
    custom: Option<CustomSection>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RunSection {
    benchmark: Option<BenchmarkId>,
    seed: u64,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GridSection {
    cells: Option<Vec<usize>>,
    input_points: Option<Vec<usize>>,
    include_input_limits: bool,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            cells: None,
            input_points: None,
            include_input_limits: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
enum TaskKind {
    Safety,
    ReachAvoid,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecSection {
    kind: TaskKind,
    horizon: usize,
    #[serde(default)]
    goal_lower: Option<Vec<f64>>,
    #[serde(default)]
    goal_upper: Option<Vec<f64>>,
    #[serde(default)]
    obstacle_lower: Option<Vec<f64>>,
    #[serde(default)]
    obstacle_upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthSection {
    threshold: f64,
    max_rounds: usize,
    cutoff: Option<f64>,
    precision: Option<f64>,
    local_steps: Option<usize>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            threshold: 0.9,
            max_rounds: 10,
            cutoff: None,
            precision: None,
            local_steps: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NnSection {
    hidden: Vec<usize>,
    epochs: usize,
    batch: usize,
    lr: f64,
}

impl Default for NnSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        NnSection {
            hidden: vec![10, 10],
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct ExpertSection {
    n_traj: Option<usize>,
    cells: Option<Vec<usize>>,
    input_points: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    runs_per_cell: usize,
    sample_trajectories: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            runs_per_cell: 500,
            sample_trajectories: 8,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CustomSection {
    state_lower: Vec<f64>,
    state_upper: Vec<f64>,
    input_lower: Vec<f64>,
    input_upper: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    #[serde(default)]
    c: Option<Vec<f64>>,
    noise_var: Vec<f64>,
}

/// Guided-synthesis settings with every default already applied.
#[derive(Debug, Clone)]
pub struct SynthSettings {
    pub threshold: f64,
    pub max_rounds: usize,
    pub cutoff: f64,
    pub precision: f64,
    pub local_steps: usize,
}

#[derive(Debug, Clone)]
pub struct NnSettings {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub runs_per_cell: usize,
    pub sample_trajectories: usize,
}

/// A fully resolved run: the system, its task, both discretizations and
/// every tool setting, with file values and command-line overrides merged.
pub struct Setup {
    /// Benchmark name, or "custom".
    pub system_name: String,
    pub benchmark: Option<BenchmarkId>,
    pub system: StochasticSystem,
    pub task: Specification,
    pub grid_spec: GridSpec,
    pub expert_spec: GridSpec,
    pub n_traj: usize,
    pub synthesis: SynthSettings,
    pub nn: NnSettings,
    pub evaluate: EvalSettings,
    pub seed: u64,
    pub out: PathBuf,
}

fn spec_from_counts_exclusive(
    state_box: &HyperRect,
    input_box: &HyperRect,
    cells: &[usize],
    points: &[usize],
) -> Result<GridSpec> {
    if cells.len() != state_box.dim() || points.len() != input_box.dim() {
        return Err(Error::invalid("count vectors do not match box dimensions"));
    }
    if cells.contains(&0) || points.contains(&0) {
        return Err(Error::invalid(
            "need >= 1 cell per state dimension and >= 1 lattice point per input dimension",
        ));
    }
    let state_widths = (0..cells.len())
        .map(|d| state_box.width(d) / cells[d] as f64)
        .collect();
    // Steps that fit exactly `points[d]` lattice positions when the upper
    // limit is left out.
    let input_steps = (0..points.len())
        .map(|d| input_box.width(d) / points[d] as f64)
        .collect();
    Ok(GridSpec {
        state_widths,
        input_steps,
        include_input_limits: false,
    })
}

fn region(
    name: &str,
    lower: &Option<Vec<f64>>,
    upper: &Option<Vec<f64>>,
) -> Result<Option<HyperRect>> {
    match (lower, upper) {
        (None, None) => Ok(None),
        (Some(lo), Some(hi)) => Ok(Some(HyperRect::new(lo.clone(), hi.clone())?)),
        _ => Err(Error::invalid(format!(
            "{name}_lower and {name}_upper must be given together"
        ))),
    }
}

fn resolve_benchmark(cfg: &FileConfig, id: BenchmarkId) -> Result<Setup> {
    if cfg.custom.is_some() {
        return Err(Error::invalid(
            "[custom] and run.benchmark are mutually exclusive",
        ));
    }
    if cfg.specification.is_some() {
        return Err(Error::invalid(
            "[specification] only applies to custom systems; benchmarks fix their own task",
        ));
    }
    let mut params = cfg.benchmark_params.clone().unwrap_or_default();
    if params.state_cells.is_some() || params.input_points.is_some() {
        return Err(Error::invalid(
            "set grid counts in [grid], not in [benchmark_params]",
        ));
    }
    if let Some(g) = &cfg.grid {
        if !g.include_input_limits {
            return Err(Error::invalid(
                "benchmark input lattices always include their limits",
            ));
        }
        params.state_cells = g.cells.clone();
        params.input_points = g.input_points.clone();
    }
    let bench = make_benchmark(id, &params)?;

    let expert_spec = match (&cfg.expert.cells, &cfg.expert.input_points) {
        (None, None) => bench.expert.grid.clone(),
        (cells, points) => {
            let defaults = &bench.expert.grid;
            // Partial overrides keep the benchmark's counts on the other side.
            let state_box = bench.system.state_box();
            let input_box = bench.system.input_box();
            let cell_counts: Vec<usize> = match cells {
                Some(c) => c.clone(),
                None => (0..state_box.dim())
                    .map(|d| (state_box.width(d) / defaults.state_widths[d]).round() as usize)
                    .collect(),
            };
            let point_counts: Vec<usize> = match points {
                Some(p) => p.clone(),
                None => (0..input_box.dim())
                    .map(|d| (input_box.width(d) / defaults.input_steps[d]).round() as usize + 1)
                    .collect(),
            };
            GridSpec::from_counts(state_box, input_box, &cell_counts, &point_counts)?
        }
    };

    Ok(Setup {
        system_name: id.name().to_string(),
        benchmark: Some(id),
        task: bench.task,
        grid_spec: bench.grid,
        expert_spec,
        n_traj: cfg.expert.n_traj.unwrap_or(bench.expert.n_traj),
        synthesis: SynthSettings {
            threshold: cfg.synthesis.threshold,
            max_rounds: cfg.synthesis.max_rounds,
            cutoff: cfg.synthesis.cutoff.unwrap_or(bench.guidance.cutoff),
            precision: cfg.synthesis.precision.unwrap_or(bench.guidance.precision),
            local_steps: cfg
                .synthesis
                .local_steps
                .unwrap_or(bench.guidance.local_steps),
        },
        nn: nn_settings(&cfg.nn),
        evaluate: EvalSettings {
            runs_per_cell: cfg.evaluate.runs_per_cell,
            sample_trajectories: cfg.evaluate.sample_trajectories,
        },
        seed: cfg.run.seed,
        out: PathBuf::new(),
        system: bench.system,
    })
}

fn resolve_custom(cfg: &FileConfig, custom: &CustomSection) -> Result<Setup> {
    if cfg.benchmark_params.is_some() {
        return Err(Error::invalid(
            "[benchmark_params] only applies to the built-in benchmarks",
        ));
    }
    let state_box = HyperRect::bounded(custom.state_lower.clone(), custom.state_upper.clone())?;
    let input_box = HyperRect::bounded(custom.input_lower.clone(), custom.input_upper.clone())?;
    let c = custom
        .c
        .clone()
        .unwrap_or_else(|| vec![0.0; state_box.dim()]);
    let system = StochasticSystem::affine(
        state_box,
        input_box,
        custom.a.clone(),
        custom.b.clone(),
        c,
        custom.noise_var.clone(),
    )?;

    let spec = cfg
        .specification
        .as_ref()
        .ok_or_else(|| Error::invalid("custom systems need a [specification] section"))?;
    let goal = region("goal", &spec.goal_lower, &spec.goal_upper)?;
    let obstacle = region("obstacle", &spec.obstacle_lower, &spec.obstacle_upper)?;
    let task = match spec.kind {
        TaskKind::Safety => {
            if goal.is_some() {
                return Err(Error::invalid("safety tasks have no goal box"));
            }
            Specification::safety(spec.horizon, obstacle)?
        }
        TaskKind::ReachAvoid => Specification::reach_avoid(
            spec.horizon,
            goal.ok_or_else(|| Error::invalid("reach-avoid tasks need a goal box"))?,
            obstacle,
        )?,
    };
    task.validate_against(system.state_box())?;

    let g = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::invalid("custom systems need a [grid] section"))?;
    let (cells, points) = match (&g.cells, &g.input_points) {
        (Some(c), Some(p)) => (c, p),
        _ => {
            return Err(Error::invalid(
                "custom systems need both grid.cells and grid.input_points",
            ))
        }
    };
    let grid_spec = if g.include_input_limits {
        GridSpec::from_counts(system.state_box(), system.input_box(), cells, points)?
    } else {
        spec_from_counts_exclusive(system.state_box(), system.input_box(), cells, points)?
    };

    let (ecells, epoints) = match (&cfg.expert.cells, &cfg.expert.input_points) {
        (Some(c), Some(p)) => (c, p),
        _ => {
            return Err(Error::invalid(
                "custom systems need both expert.cells and expert.input_points",
            ))
        }
    };
    let expert_spec =
        GridSpec::from_counts(system.state_box(), system.input_box(), ecells, epoints)?;
    let n_traj = cfg
        .expert
        .n_traj
        .ok_or_else(|| Error::invalid("custom systems need expert.n_traj"))?;

    let precision = cfg
        .synthesis
        .precision
        .ok_or_else(|| Error::invalid("custom systems need synthesis.precision"))?;
    let local_steps = cfg
        .synthesis
        .local_steps
        .ok_or_else(|| Error::invalid("custom systems need synthesis.local_steps"))?;

    Ok(Setup {
        system_name: "custom".to_string(),
        benchmark: None,
        system,
        task,
        grid_spec,
        expert_spec,
        n_traj,
        synthesis: SynthSettings {
            threshold: cfg.synthesis.threshold,
            max_rounds: cfg.synthesis.max_rounds,
            cutoff: cfg.synthesis.cutoff.unwrap_or(1e-4),
            precision,
            local_steps,
        },
        nn: nn_settings(&cfg.nn),
        evaluate: EvalSettings {
            runs_per_cell: cfg.evaluate.runs_per_cell,
            sample_trajectories: cfg.evaluate.sample_trajectories,
        },
        seed: cfg.run.seed,
        out: PathBuf::new(),
    })
}

fn nn_settings(nn: &NnSection) -> NnSettings {
    NnSettings {
        hidden: nn.hidden.clone(),
        train: TrainConfig {
            epochs: nn.epochs,
            batch: nn.batch,
            lr: nn.lr,
            ..TrainConfig::default()
        },
    }
}

/// Reads and resolves a configuration file, applying the command-line seed
/// and output-directory overrides last.
pub fn load(path: &Path, seed_flag: Option<u64>, out_flag: Option<PathBuf>) -> Result<Setup> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::invalid(format!("cannot read config {}: {e}", path.display()))
    })?;
    let cfg: FileConfig = toml::from_str(&text)
        .map_err(|e| Error::invalid(format!("bad config {}: {e}", path.display())))?;

    let mut setup = match (cfg.run.benchmark, &cfg.custom) {
        (Some(id), _) => resolve_benchmark(&cfg, id)?,
        (None, Some(custom)) => resolve_custom(&cfg, custom)?,
        (None, None) => {
            return Err(Error::invalid(
                "config must set run.benchmark or provide a [custom] system",
            ))
        }
    };
    if let Some(s) = seed_flag {
        setup.seed = s;
    }
    setup.out = match out_flag.or(cfg.run.out) {
        Some(dir) => dir,
        None => {
            return Err(Error::invalid(
                "an output directory is required (run.out or --out)",
            ))
        }
    };
    if !setup.synthesis.threshold.is_finite()
        || !(0.0..=1.0).contains(&setup.synthesis.threshold)
    {
        return Err(Error::invalid("synthesis.threshold must lie in [0, 1]"));
    }
    Ok(setup)
}

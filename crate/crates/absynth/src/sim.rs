//! Closed-loop simulation of a synthesized controller or a raw policy
//! network on the continuous system, plus the empirical satisfaction
//! estimate and expert demonstration generation built on top of it.
//!
//! Simulation works on continuous states: membership in the goal,
//! obstacle and domain boxes is checked on the actual state, not on its
//! cell, every step including the initial one. All randomness flows from
//! explicit seeds, one stream per run, so every estimate is reproducible.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::controller::{ControllerTable, SpecKind, Specification};
use crate::dataset::{Provenance, TimedPair, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::grid::{CellClass, GridAbstraction};
use crate::model::StochasticSystem;
use crate::policy::PolicyNetwork;
use crate::rng::{derive_seed2, make_rng};

/// How a single closed-loop run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    /// Reached the goal box within the horizon (reach-avoid success).
    SatisfiedGoal,
    /// Stayed inside the safe set for the whole horizon (safety success).
    StayedSafe,
    HitObstacle,
    LeftDomain,
    /// Ran out of steps without reaching the goal.
    HorizonExpired,
    /// The controller table had no action for the current cell and step.
    ControllerUndefined,
}

impl Outcome {
    /// Whether this outcome satisfies the given task kind.
    pub fn satisfies(&self, kind: SpecKind) -> bool {
        match kind {
            SpecKind::Safety => *self == Outcome::StayedSafe,
            SpecKind::ReachAvoid => *self == Outcome::SatisfiedGoal,
        }
    }
}

/// The input source driving a simulation.
pub enum Controller<'a> {
    /// A synthesized table looked up through its grid; states quantize to
    /// cells and actions map to lattice input points.
    Table {
        table: &'a ControllerTable,
        grid: &'a GridAbstraction,
    },
    /// A policy network evaluated directly on the continuous state.
    Network(&'a PolicyNetwork),
}

impl Controller<'_> {
    fn input_for(&self, x: &[f64], k: usize) -> Option<Vec<f64>> {
        match self {
            Controller::Table { table, grid } => {
                let cell = grid.quantize_state(x)?;
                let action = table.action(cell, k)?;
                Some(grid.input_point(action))
            }
            Controller::Network(net) => Some(net.forward(x, k)),
        }
    }

    fn check_digest(&self) -> Result<()> {
        if let Controller::Table { table, grid } = self {
            if table.grid_digest() != grid.digest() {
                return Err(Error::GridDigestMismatch {
                    artifact: crate::controller::digest_hex(table.grid_digest()),
                    configured: crate::controller::digest_hex(grid.digest()),
                });
            }
        }
        Ok(())
    }
}

/// One finished run: how it ended, the (state, input) pairs taken along
/// the way, and every state visited (initial state first, ending with
/// the state the run terminated in). A run that ends before taking any
/// input has no pairs and a single state.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub outcome: Outcome,
    pub pairs: Vec<TimedPair>,
    pub states: Vec<Vec<f64>>,
}

fn classify(task: &Specification, domain: &crate::geom::HyperRect, x: &[f64]) -> Option<Outcome> {
    if !domain.contains(x) {
        return Some(Outcome::LeftDomain);
    }
    if let Some(goal) = task.goal() {
        if goal.contains(x) {
            return Some(Outcome::SatisfiedGoal);
        }
    }
    if let Some(obstacle) = task.obstacle() {
        if obstacle.contains(x) {
            return Some(Outcome::HitObstacle);
        }
    }
    None
}

/// Runs the closed loop from `x0` for at most the task horizon. The state
/// is checked before every input and once more after the final step;
/// reaching the goal ends the run immediately, even at step zero.
pub fn simulate(
    sys: &StochasticSystem,
    task: &Specification,
    ctrl: &Controller,
    x0: &[f64],
    seed: u64,
) -> Result<SimRun> {
    if x0.len() != sys.state_box().dim() {
        return Err(Error::invalid("initial state has the wrong dimension"));
    }
    ctrl.check_digest()?;
    let mut rng = make_rng(seed);
    let mut x = x0.to_vec();
    let mut pairs = Vec::with_capacity(task.horizon());
    let mut states = vec![x.clone()];

    for k in 0..task.horizon() {
        if let Some(outcome) = classify(task, sys.state_box(), &x) {
            return Ok(SimRun {
                outcome,
                pairs,
                states,
            });
        }
        let Some(u) = ctrl.input_for(&x, k) else {
            return Ok(SimRun {
                outcome: Outcome::ControllerUndefined,
                pairs,
                states,
            });
        };
        let kernel = sys.kernel_at(&x, &u)?;
        pairs.push(TimedPair {
            step: k,
            state: x.clone(),
            input: u,
        });
        x = (0..kernel.dim())
            .map(|d| {
                let z: f64 = rng.sample(StandardNormal);
                kernel.mean()[d] + kernel.sd(d) * z
            })
            .collect();
        states.push(x.clone());
    }

    let outcome = match classify(task, sys.state_box(), &x) {
        Some(o) => o,
        None => match task.kind() {
            SpecKind::Safety => Outcome::StayedSafe,
            SpecKind::ReachAvoid => Outcome::HorizonExpired,
        },
    };
    // A safety run that never left the safe set succeeds at the horizon.
    let outcome = if task.kind() == SpecKind::Safety && outcome == Outcome::HorizonExpired {
        Outcome::StayedSafe
    } else {
        outcome
    };
    Ok(SimRun {
        outcome,
        pairs,
        states,
    })
}

/// Aggregate outcome tallies over a batch of runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OutcomeCounts {
    pub satisfied_goal: u64,
    pub stayed_safe: u64,
    pub hit_obstacle: u64,
    pub left_domain: u64,
    pub horizon_expired: u64,
    pub controller_undefined: u64,
}

impl OutcomeCounts {
    pub fn record(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::SatisfiedGoal => self.satisfied_goal += 1,
            Outcome::StayedSafe => self.stayed_safe += 1,
            Outcome::HitObstacle => self.hit_obstacle += 1,
            Outcome::LeftDomain => self.left_domain += 1,
            Outcome::HorizonExpired => self.horizon_expired += 1,
            Outcome::ControllerUndefined => self.controller_undefined += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.satisfied_goal
            + self.stayed_safe
            + self.hit_obstacle
            + self.left_domain
            + self.horizon_expired
            + self.controller_undefined
    }

    fn merge(mut self, other: OutcomeCounts) -> OutcomeCounts {
        self.satisfied_goal += other.satisfied_goal;
        self.stayed_safe += other.stayed_safe;
        self.hit_obstacle += other.hit_obstacle;
        self.left_domain += other.left_domain;
        self.horizon_expired += other.horizon_expired;
        self.controller_undefined += other.controller_undefined;
        self
    }
}

/// Monte-Carlo satisfaction estimate aligned with the dynamic-programming
/// average: free cells carry their empirical rate from `runs_per_cell`
/// closed-loop runs started at the representative point, goal cells count
/// as one and obstacle cells as zero.
#[derive(Debug, Clone)]
pub struct SatisfactionEstimate {
    pub per_cell: Vec<f64>,
    pub mean: f64,
    pub runs_per_cell: usize,
    pub counts: OutcomeCounts,
}

/// Estimates the per-cell and average satisfaction probability of a
/// controller under the grid's task. Run seeds derive from the master
/// seed, the cell index and the run index, so the estimate is independent
/// of scheduling and worker count.
pub fn estimate_satisfaction(
    sys: &StochasticSystem,
    grid: &GridAbstraction,
    ctrl: &Controller,
    runs_per_cell: usize,
    seed: u64,
) -> Result<SatisfactionEstimate> {
    if runs_per_cell == 0 {
        return Err(Error::invalid("at least one run per cell is required"));
    }
    ctrl.check_digest()?;
    let task = grid.task();
    let kind = task.kind();

    let free: Vec<(usize, f64, OutcomeCounts)> = grid
        .free_cells()
        .par_iter()
        .map(|&cell| -> Result<(usize, f64, OutcomeCounts)> {
            let x0 = grid.rep_point(cell);
            let mut counts = OutcomeCounts::default();
            let mut hits = 0usize;
            for run in 0..runs_per_cell {
                let s = derive_seed2(seed, cell as u64, run as u64);
                let sim = simulate(sys, task, ctrl, &x0, s)?;
                counts.record(sim.outcome);
                if sim.outcome.satisfies(kind) {
                    hits += 1;
                }
            }
            Ok((cell, hits as f64 / runs_per_cell as f64, counts))
        })
        .collect::<Result<_>>()?;

    let mut per_cell = (0..grid.n_cells())
        .map(|c| match grid.class(c) {
            CellClass::Goal => 1.0,
            CellClass::Obstacle => 0.0,
            CellClass::Free => 0.0,
        })
        .collect::<Vec<f64>>();
    let mut counts = OutcomeCounts::default();
    for (cell, rate, c) in free {
        per_cell[cell] = rate;
        counts = counts.merge(c);
    }
    let mean = per_cell.iter().sum::<f64>() / per_cell.len() as f64;
    Ok(SatisfactionEstimate {
        per_cell,
        mean,
        runs_per_cell,
        counts,
    })
}

/// An expert demonstration set together with how much sampling it took.
#[derive(Debug, Clone)]
pub struct ExpertHarvest {
    pub dataset: TrajectoryDataset,
    pub attempts: usize,
}

/// Collects expert demonstrations by rolling out a controller from
/// uniformly sampled initial states and keeping only runs that satisfy
/// the task and took at least one input. Stops after `n_traj` kept runs;
/// gives up (with the tally so far) once attempts reach 100 per requested
/// trajectory.
pub fn generate_expert_data(
    sys: &StochasticSystem,
    grid: &GridAbstraction,
    table: &ControllerTable,
    n_traj: usize,
    seed: u64,
) -> Result<ExpertHarvest> {
    if n_traj == 0 {
        return Err(Error::invalid("at least one trajectory is required"));
    }
    let ctrl = Controller::Table { table, grid };
    ctrl.check_digest()?;
    let task = grid.task();
    let kind = task.kind();
    let domain = sys.state_box();
    let mut ds = TrajectoryDataset::new(grid.state_dim(), grid.input_dim(), Provenance::Expert);

    let budget = 100 * n_traj;
    let mut attempts = 0usize;
    while ds.n_trajectories() < n_traj && attempts < budget {
        let mut x_rng = make_rng(derive_seed2(seed, attempts as u64, 0));
        let x0: Vec<f64> = (0..domain.dim())
            .map(|d| x_rng.random_range(domain.lower()[d]..=domain.upper()[d]))
            .collect();
        let sim_seed = derive_seed2(seed, attempts as u64, 1);
        attempts += 1;
        let run = simulate(sys, task, &ctrl, &x0, sim_seed)?;
        if run.outcome.satisfies(kind) && !run.pairs.is_empty() {
            ds.push(Trajectory { pairs: run.pairs })?;
        }
    }
    if ds.n_trajectories() < n_traj {
        return Err(Error::NoExpertFound {
            requested: n_traj,
            collected: ds.n_trajectories(),
            attempts,
        });
    }
    Ok(ExpertHarvest {
        dataset: ds,
        attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::NO_ACTION;
    use crate::geom::HyperRect;
    use crate::grid::GridSpec;
    use crate::synth::{full_value_iteration, TransitionBuffer};
    use std::sync::Arc;

    /// A system whose next-state distribution depends only on the cell the
    /// current state occupies (the nominal map quantizes to the cell
    /// midpoint before adding the input effect). For such a system the
    /// grid abstraction is exact, so dynamic-programming values and
    /// closed-loop statistics must agree.
    fn cell_faithful_system(noise: f64) -> (GridAbstraction, StochasticSystem) {
        let state = HyperRect::new(vec![-10.0, -10.0], vec![10.0, 10.0]).unwrap();
        let input = HyperRect::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let width = 4.0;
        let nominal = Arc::new(move |x: &[f64], u: &[f64]| {
            (0..2)
                .map(|d| {
                    let idx = ((x[d] + 10.0) / width).floor().clamp(0.0, 4.0);
                    let mid = -10.0 + (idx + 0.5) * width;
                    mid + width * u[d]
                })
                .collect::<Vec<f64>>()
        });
        let sys = StochasticSystem::new(
            state.clone(),
            input.clone(),
            nominal,
            vec![noise, noise],
        )
        .unwrap();
        let task = Specification::reach_avoid(
            4,
            HyperRect::new(vec![2.0, 2.0], vec![6.0, 6.0]).unwrap(),
            Some(HyperRect::new(vec![-6.0, -6.0], vec![-2.0, -2.0]).unwrap()),
        )
        .unwrap();
        let spec = GridSpec::from_counts(&state, &input, &[5, 5], &[3, 3]).unwrap();
        let grid = GridAbstraction::build(&spec, &sys, &task).unwrap();
        (grid, sys)
    }

    fn synthesize(grid: &GridAbstraction, sys: &StochasticSystem) -> ControllerTable {
        let buffer = TransitionBuffer::new();
        full_value_iteration(grid, sys, &buffer, 1e-6).unwrap()
    }

    #[test]
    fn immediate_outcomes_at_step_zero() {
        let (grid, sys) = cell_faithful_system(1.0);
        let table = synthesize(&grid, &sys);
        let ctrl = Controller::Table {
            table: &table,
            grid: &grid,
        };
        let task = grid.task().clone();
        let goal = simulate(&sys, &task, &ctrl, &[4.0, 4.0], 1).unwrap();
        assert_eq!(goal.outcome, Outcome::SatisfiedGoal);
        assert!(goal.pairs.is_empty());
        let hit = simulate(&sys, &task, &ctrl, &[-4.0, -4.0], 1).unwrap();
        assert_eq!(hit.outcome, Outcome::HitObstacle);
        let out = simulate(&sys, &task, &ctrl, &[11.0, 0.0], 1).unwrap();
        assert_eq!(out.outcome, Outcome::LeftDomain);
        assert!(matches!(
            simulate(&sys, &task, &ctrl, &[0.0], 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn undefined_actions_abort_the_run() {
        let (grid, sys) = cell_faithful_system(1.0);
        let horizon = grid.task().horizon();
        let empty = ControllerTable::new(
            grid.task().kind(),
            horizon,
            grid.n_cells(),
            grid.n_inputs(),
            *grid.digest(),
            vec![NO_ACTION; horizon * grid.n_cells()],
            vec![0.0; (horizon + 1) * grid.n_cells()],
        )
        .unwrap();
        let ctrl = Controller::Table {
            table: &empty,
            grid: &grid,
        };
        let run = simulate(&sys, grid.task(), &ctrl, &[-8.0, -8.0], 3).unwrap();
        assert_eq!(run.outcome, Outcome::ControllerUndefined);
        assert!(run.pairs.is_empty());
    }

    #[test]
    fn mismatched_grid_digest_is_rejected() {
        let (grid, sys) = cell_faithful_system(1.0);
        let table = synthesize(&grid, &sys);
        // Same boxes and task, different cell counts.
        let spec = GridSpec::from_counts(sys.state_box(), sys.input_box(), &[4, 4], &[3, 3]).unwrap();
        let other_grid = GridAbstraction::build(&spec, &sys, grid.task()).unwrap();
        let ctrl = Controller::Table {
            table: &table,
            grid: &other_grid,
        };
        assert!(matches!(
            simulate(&sys, grid.task(), &ctrl, &[0.0, 0.0], 1),
            Err(Error::GridDigestMismatch { .. })
        ));
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let (grid, sys) = cell_faithful_system(1.0);
        let table = synthesize(&grid, &sys);
        let ctrl = Controller::Table {
            table: &table,
            grid: &grid,
        };
        let task = grid.task();
        let a = simulate(&sys, task, &ctrl, &[-8.0, 0.0], 42).unwrap();
        let b = simulate(&sys, task, &ctrl, &[-8.0, 0.0], 42).unwrap();
        assert_eq!(a.outcome, b.outcome);
        assert_eq!(a.pairs.len(), b.pairs.len());
        for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(pa.state, pb.state);
            assert_eq!(pa.input, pb.input);
        }
        // Different seeds draw different noise on any run that steps.
        let c = simulate(&sys, task, &ctrl, &[-8.0, 0.0], 43).unwrap();
        if a.pairs.len() > 1 && c.pairs.len() > 1 {
            assert_ne!(a.pairs[1].state, c.pairs[1].state);
        }
    }

    #[test]
    fn deterministic_closed_loop_matches_binary_values() {
        // With zero noise the closed loop is deterministic, so each
        // cell's value is 0 or 1 and one run per cell settles it.
        let (grid, sys) = cell_faithful_system(0.0);
        let table = synthesize(&grid, &sys);
        let ctrl = Controller::Table {
            table: &table,
            grid: &grid,
        };
        for &cell in grid.free_cells() {
            let v = table.value(cell, 0);
            assert!(v == 0.0 || v == 1.0, "cell {cell}: V = {v}");
            let run = simulate(&sys, grid.task(), &ctrl, &grid.rep_point(cell), 9).unwrap();
            assert_eq!(
                run.outcome == Outcome::SatisfiedGoal,
                v == 1.0,
                "cell {cell}: outcome {:?} but V = {v}",
                run.outcome
            );
        }
    }

    #[test]
    fn monte_carlo_rates_match_dynamic_programming() {
        let (grid, sys) = cell_faithful_system(1.0);
        let table = synthesize(&grid, &sys);
        let ctrl = Controller::Table {
            table: &table,
            grid: &grid,
        };
        let runs = 4000usize;
        let est = estimate_satisfaction(&sys, &grid, &ctrl, runs, 20_240_817).unwrap();
        assert_eq!(est.counts.total(), (grid.free_cells().len() * runs) as u64);

        for &cell in grid.free_cells() {
            let v = table.value(cell, 0);
            let rate = est.per_cell[cell];
            let se = (v * (1.0 - v) / runs as f64).sqrt();
            let tol = 4.0 * se + 1.0 / runs as f64;
            assert!(
                (rate - v).abs() <= tol,
                "cell {cell}: MC {rate} vs DP {v} (tol {tol})"
            );
        }
        // Fixed cells enter the average exactly as in the table.
        let diff = (est.mean - table.v_avg()).abs();
        assert!(diff < 0.01, "average MC {} vs DP {}", est.mean, table.v_avg());
    }

    #[test]
    fn estimate_is_independent_of_worker_count() {
        let (grid, sys) = cell_faithful_system(1.0);
        let table = synthesize(&grid, &sys);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let ctrl = Controller::Table {
                    table: &table,
                    grid: &grid,
                };
                estimate_satisfaction(&sys, &grid, &ctrl, 50, 7).unwrap()
            })
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.per_cell, b.per_cell);
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    }

    #[test]
    fn safety_task_counts_survival() {
        let state = HyperRect::new(vec![0.0], vec![4.0]).unwrap();
        let input = HyperRect::new(vec![-1.0], vec![1.0]).unwrap();
        let sys = StochasticSystem::affine(
            state.clone(),
            input.clone(),
            vec![vec![1.0]],
            vec![vec![1.0]],
            vec![0.0],
            vec![0.0],
        )
        .unwrap();
        let task = Specification::safety(5, None).unwrap();
        let spec = GridSpec::from_counts(&state, &input, &[4], &[3]).unwrap();
        let grid = GridAbstraction::build(&spec, &sys, &task).unwrap();
        let table = synthesize(&grid, &sys);
        let ctrl = Controller::Table {
            table: &table,
            grid: &grid,
        };
        // Zero noise and the input u = 0 available: staying put survives,
        // so every cell is perfectly safe and every run stays inside.
        for &cell in grid.free_cells() {
            assert_eq!(table.value(cell, 0), 1.0);
            let run = simulate(&sys, &task, &ctrl, &grid.rep_point(cell), 1).unwrap();
            assert_eq!(run.outcome, Outcome::StayedSafe);
            assert_eq!(run.pairs.len(), 5);
        }
    }

    #[test]
    fn network_controller_always_emits_feasible_inputs() {
        let (grid, sys) = cell_faithful_system(4.0);
        let net = PolicyNetwork::init(grid.state_box(), grid.input_box(), 4, &[8], 3).unwrap();
        let ctrl = Controller::Network(&net);
        for seed in 0..20 {
            let run = simulate(&sys, grid.task(), &ctrl, &[-8.0, 8.0], seed).unwrap();
            assert!(run.pairs.len() <= 4);
            for pair in &run.pairs {
                assert!(grid.input_box().contains(&pair.input));
            }
        }
    }

    #[test]
    fn expert_runs_are_satisfying_and_reproducible() {
        let (grid, sys) = cell_faithful_system(1.0);
        let table = synthesize(&grid, &sys);
        let harvest = generate_expert_data(&sys, &grid, &table, 40, 11).unwrap();
        assert!(harvest.attempts >= 40);
        let ds = harvest.dataset;
        assert_eq!(ds.n_trajectories(), 40);
        assert_eq!(ds.provenance(), Provenance::Expert);
        ds.check_bounds(grid.input_box(), grid.task().horizon())
            .unwrap();
        for traj in ds.trajectories() {
            assert!(!traj.pairs.is_empty());
            // Inputs come off the lattice.
            for pair in &traj.pairs {
                let snapped = grid.input_point(grid.snap_input(&pair.input));
                assert_eq!(pair.input, snapped);
            }
        }

        let again = generate_expert_data(&sys, &grid, &table, 40, 11).unwrap().dataset;
        assert_eq!(again.n_pairs(), ds.n_pairs());
        for (ta, tb) in ds.trajectories().iter().zip(again.trajectories()) {
            for (pa, pb) in ta.pairs.iter().zip(&tb.pairs) {
                assert_eq!(pa.state, pb.state);
                assert_eq!(pa.input, pb.input);
            }
        }

        let other = generate_expert_data(&sys, &grid, &table, 40, 12).unwrap().dataset;
        let first_a = &ds.trajectories()[0].pairs[0];
        let first_b = &other.trajectories()[0].pairs[0];
        assert_ne!(first_a.state, first_b.state);
    }

    #[test]
    fn expert_generation_gives_up_on_a_hopeless_controller() {
        let (grid, sys) = cell_faithful_system(1.0);
        let horizon = grid.task().horizon();
        let empty = ControllerTable::new(
            grid.task().kind(),
            horizon,
            grid.n_cells(),
            grid.n_inputs(),
            *grid.digest(),
            vec![NO_ACTION; horizon * grid.n_cells()],
            vec![0.0; (horizon + 1) * grid.n_cells()],
        )
        .unwrap();
        let err = generate_expert_data(&sys, &grid, &empty, 3, 5).unwrap_err();
        match err {
            Error::NoExpertFound {
                requested,
                collected,
                attempts,
            } => {
                assert_eq!(requested, 3);
                // Starts inside the goal succeed without pairs and are
                // discarded, so nothing is ever collected.
                assert_eq!(collected, 0);
                assert_eq!(attempts, 300);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}

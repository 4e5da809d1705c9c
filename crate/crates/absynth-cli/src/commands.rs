//! The four subcommands. Every artifact a command writes is a pure function
//! of the configuration and the master seed, so a rerun reproduces the data
//! files byte for byte; the `*_report.toml` summaries and log CSVs
//! additionally carry wall-clock timings and are exempt from that guarantee.
//!
//! Seed streams: expert generation draws from stream 1 of the master seed,
//! the synthesis loop from stream 2, the empirical evaluation from stream 3
//! and the sampled show-case trajectories from stream 4.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use absynth::controller::{digest_hex, ControllerTable};
use absynth::dataset::{Provenance, TrajectoryDataset};
use absynth::grid::{CellClass, GridAbstraction};
use absynth::policy::{PolicyNetwork, TrainConfig};
use absynth::rng::{derive_seed, derive_seed2};
use absynth::sim::{
    estimate_satisfaction, generate_expert_data, simulate, Controller, Outcome,
};
use absynth::synth::{
    full_value_iteration, guided_value_iteration, synthesis_loop, LocalActionSet, LoopConfig,
    TransitionBuffer,
};
use absynth::{Error, Result};

use crate::config::Setup;

/// How a successfully executed command ended.
pub enum Status {
    Done,
    /// Synthesis finished below the configured threshold; the best
    /// controller found was still written out.
    ThresholdNotMet,
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("cannot serialize report: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct ExpertReport {
    system: String,
    seed: u64,
    coarse_cells: usize,
    coarse_inputs: usize,
    coarse_v_avg: f64,
    trajectories: usize,
    pairs: usize,
    attempts: usize,
    seconds: f64,
}

/// Solves the task exhaustively on the coarse expert grid, rolls the
/// resulting controller out from random starts and writes the satisfying
/// runs to `expert.csv`.
pub fn expert(setup: &Setup) -> Result<Status> {
    let t0 = Instant::now();
    std::fs::create_dir_all(&setup.out)?;
    let coarse = GridAbstraction::build(&setup.expert_spec, &setup.system, &setup.task)?;
    let buffer = TransitionBuffer::new();
    let table = full_value_iteration(&coarse, &setup.system, &buffer, setup.synthesis.cutoff)?;
    let harvest = generate_expert_data(
        &setup.system,
        &coarse,
        &table,
        setup.n_traj,
        derive_seed(setup.seed, 1),
    )?;
    harvest.dataset.write_csv(&setup.out.join("expert.csv"))?;

    let report = ExpertReport {
        system: setup.system_name.clone(),
        seed: setup.seed,
        coarse_cells: coarse.n_cells(),
        coarse_inputs: coarse.n_inputs(),
        coarse_v_avg: table.v_avg(),
        trajectories: harvest.dataset.n_trajectories(),
        pairs: harvest.dataset.n_pairs(),
        attempts: harvest.attempts,
        seconds: t0.elapsed().as_secs_f64(),
    };
    write_toml(&setup.out.join("expert_report.toml"), &report)?;
    println!(
        "expert: kept {} of {} runs ({} pairs), coarse grid V_avg {:.4}",
        report.trajectories, report.attempts, report.pairs, report.coarse_v_avg
    );
    Ok(Status::Done)
}

#[derive(Serialize)]
struct SynthReport {
    system: String,
    seed: u64,
    n_cells: usize,
    n_inputs: usize,
    free_cells: usize,
    grid_digest: String,
    threshold: f64,
    v_avg: f64,
    best_round: usize,
    rounds_run: usize,
    reached_threshold: bool,
    rows_computed: usize,
    seconds: f64,
}

fn load_expert(setup: &Setup, data: Option<PathBuf>) -> Result<TrajectoryDataset> {
    let path = data.unwrap_or_else(|| setup.out.join("expert.csv"));
    let expert = TrajectoryDataset::read_csv(&path, Provenance::Expert)?;
    if expert.state_dim() != setup.system.state_box().dim()
        || expert.input_dim() != setup.system.input_box().dim()
    {
        return Err(Error::invalid(format!(
            "expert data in {} is {}-state/{}-input but the system is {}/{}",
            path.display(),
            expert.state_dim(),
            expert.input_dim(),
            setup.system.state_box().dim(),
            setup.system.input_box().dim(),
        )));
    }
    expert.check_bounds(setup.system.input_box(), setup.task.horizon())?;
    Ok(expert)
}

/// Runs the guided refinement loop on an expert dataset and writes the best
/// controller, its network and a per-round log. With `sweep` given, trains
/// the first-round network once and synthesizes one controller per local
/// window size instead.
pub fn synthesize(
    setup: &Setup,
    data: Option<PathBuf>,
    sweep: Option<Vec<usize>>,
) -> Result<Status> {
    let t0 = Instant::now();
    std::fs::create_dir_all(&setup.out)?;
    let expert = load_expert(setup, data)?;
    let grid = GridAbstraction::build(&setup.grid_spec, &setup.system, &setup.task)?;
    let buffer = TransitionBuffer::new();
    let loop_seed = derive_seed(setup.seed, 2);
    match sweep {
        Some(steps) => sweep_run(setup, &grid, &expert, &buffer, loop_seed, &steps),
        None => loop_run(setup, &grid, &expert, &buffer, loop_seed, t0),
    }
}

fn loop_run(
    setup: &Setup,
    grid: &GridAbstraction,
    expert: &TrajectoryDataset,
    buffer: &TransitionBuffer,
    loop_seed: u64,
    t0: Instant,
) -> Result<Status> {
    let cfg = LoopConfig {
        threshold: setup.synthesis.threshold,
        max_rounds: setup.synthesis.max_rounds,
        hidden: setup.nn.hidden.clone(),
        train: setup.nn.train.clone(),
        cutoff: setup.synthesis.cutoff,
        precision: setup.synthesis.precision,
        local_steps: setup.synthesis.local_steps,
        seed: loop_seed,
    };
    let outcome = synthesis_loop(grid, &setup.system, expert, &cfg, buffer)?;
    outcome.table.save(&setup.out.join("controller.bin"))?;
    outcome.net.save(&setup.out.join("policy.bin"))?;

    let mut log = String::from("round,v_avg,train_mse,epochs,rows_computed,seconds\n");
    for r in &outcome.records {
        let mse = r.train_mse.map(|m| m.to_string()).unwrap_or_default();
        let _ = writeln!(
            log,
            "{},{},{},{},{},{}",
            r.round, r.v_avg, mse, r.epochs, r.rows_computed, r.seconds
        );
    }
    std::fs::write(setup.out.join("synthesis_log.csv"), log)?;

    let report = SynthReport {
        system: setup.system_name.clone(),
        seed: setup.seed,
        n_cells: grid.n_cells(),
        n_inputs: grid.n_inputs(),
        free_cells: grid.free_cells().len(),
        grid_digest: digest_hex(grid.digest()),
        threshold: cfg.threshold,
        v_avg: outcome.table.v_avg(),
        best_round: outcome.best_round,
        rounds_run: outcome.records.len(),
        reached_threshold: outcome.reached_threshold,
        rows_computed: buffer.rows_computed(),
        seconds: t0.elapsed().as_secs_f64(),
    };
    write_toml(&setup.out.join("synthesis_report.toml"), &report)?;
    println!(
        "synthesize: V_avg {:.4} after {} round(s), best round {}{}",
        report.v_avg,
        report.rounds_run,
        report.best_round,
        if report.reached_threshold {
            String::new()
        } else {
            format!(" (threshold {} not met)", report.threshold)
        }
    );
    if outcome.reached_threshold {
        Ok(Status::Done)
    } else {
        Ok(Status::ThresholdNotMet)
    }
}

fn sweep_run(
    setup: &Setup,
    grid: &GridAbstraction,
    expert: &TrajectoryDataset,
    buffer: &TransitionBuffer,
    loop_seed: u64,
    steps_list: &[usize],
) -> Result<Status> {
    if steps_list.is_empty() {
        return Err(Error::invalid("the sweep needs at least one window size"));
    }
    // Same network the refinement loop would use in its first round, shared
    // by every window size so the sweep isolates the window's effect.
    let mut net = PolicyNetwork::init(
        grid.state_box(),
        grid.input_box(),
        setup.task.horizon(),
        &setup.nn.hidden,
        derive_seed2(loop_seed, 0, 0),
    )?;
    net.imitation_learn(
        expert,
        &TrainConfig {
            seed: derive_seed2(loop_seed, 0, 2),
            ..setup.nn.train.clone()
        },
    )?;
    net.save(&setup.out.join("policy.bin"))?;

    let mut log = String::from("local_steps,v_avg,rows_computed,seconds\n");
    for &steps in steps_list {
        let ts = Instant::now();
        let local = LocalActionSet::new(grid, setup.synthesis.precision, steps)?;
        let table = guided_value_iteration(
            grid,
            &setup.system,
            &net,
            &local,
            buffer,
            setup.synthesis.cutoff,
        )?;
        table.save(&setup.out.join(format!("controller_local{steps}.bin")))?;
        let _ = writeln!(
            log,
            "{},{},{},{}",
            steps,
            table.v_avg(),
            buffer.rows_computed(),
            ts.elapsed().as_secs_f64()
        );
        println!("sweep: {steps} steps per dimension, V_avg {:.4}", table.v_avg());
    }
    std::fs::write(setup.out.join("sweep.csv"), log)?;
    Ok(Status::Done)
}

#[derive(Serialize)]
struct OutcomeReport {
    satisfied_goal: u64,
    stayed_safe: u64,
    hit_obstacle: u64,
    left_domain: u64,
    horizon_expired: u64,
    controller_undefined: u64,
}

#[derive(Serialize)]
struct SampleReport {
    index: usize,
    cell: usize,
    outcome: String,
    steps: usize,
}

#[derive(Serialize)]
struct EvalReport {
    system: String,
    seed: u64,
    runs_per_cell: usize,
    v_avg_table: f64,
    mean_empirical: f64,
    gap: f64,
    outcomes: OutcomeReport,
    samples: Vec<SampleReport>,
    seconds: f64,
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::SatisfiedGoal => "satisfied-goal",
        Outcome::StayedSafe => "stayed-safe",
        Outcome::HitObstacle => "hit-obstacle",
        Outcome::LeftDomain => "left-domain",
        Outcome::HorizonExpired => "horizon-expired",
        Outcome::ControllerUndefined => "controller-undefined",
    }
}

fn class_name(c: CellClass) -> &'static str {
    match c {
        CellClass::Free => "free",
        CellClass::Goal => "goal",
        CellClass::Obstacle => "obstacle",
    }
}

/// Monte-Carlo check of a synthesized controller: per-cell empirical
/// satisfaction rates against the table's values, outcome tallies and a few
/// sampled closed-loop trajectories.
pub fn evaluate(setup: &Setup, controller: Option<PathBuf>) -> Result<Status> {
    let t0 = Instant::now();
    std::fs::create_dir_all(&setup.out)?;
    let path = controller.unwrap_or_else(|| setup.out.join("controller.bin"));
    let table = ControllerTable::load(&path)?;
    let grid = GridAbstraction::build(&setup.grid_spec, &setup.system, &setup.task)?;
    if table.grid_digest() != grid.digest() {
        return Err(Error::GridDigestMismatch {
            artifact: digest_hex(table.grid_digest()),
            configured: digest_hex(grid.digest()),
        });
    }
    if table.kind() != setup.task.kind() || table.horizon() != setup.task.horizon() {
        return Err(Error::invalid(format!(
            "controller in {} solves a different task than the configured one",
            path.display()
        )));
    }
    let ctrl = Controller::Table {
        table: &table,
        grid: &grid,
    };
    let est = estimate_satisfaction(
        &setup.system,
        &grid,
        &ctrl,
        setup.evaluate.runs_per_cell,
        derive_seed(setup.seed, 3),
    )?;

    let dim = grid.state_dim();
    let mut csv = String::from("cell");
    for d in 0..dim {
        let _ = write!(csv, ",x_{d}");
    }
    csv.push_str(",class,value,empirical,std_err\n");
    for cell in 0..grid.n_cells() {
        let _ = write!(csv, "{cell}");
        for v in grid.rep_point(cell) {
            let _ = write!(csv, ",{v}");
        }
        let p = est.per_cell[cell];
        let std_err = match grid.class(cell) {
            CellClass::Free => (p * (1.0 - p) / est.runs_per_cell as f64).sqrt(),
            _ => 0.0,
        };
        let _ = writeln!(
            csv,
            ",{},{},{},{}",
            class_name(grid.class(cell)),
            table.value(cell, 0),
            p,
            std_err
        );
    }
    std::fs::write(setup.out.join("evaluation.csv"), csv)?;

    // Showcase trajectories start where the controller certifies itself;
    // when it certifies fewer cells than requested, fall back to all free
    // cells. The per-cell table above is always the uniform picture.
    let certified: Vec<usize> = grid
        .free_cells()
        .iter()
        .copied()
        .filter(|c| table.value(*c, 0) >= 0.9)
        .collect();
    let free = if certified.len() >= setup.evaluate.sample_trajectories {
        certified
    } else {
        grid.free_cells().to_vec()
    };
    let n_samples = setup.evaluate.sample_trajectories.min(free.len());
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        // Evenly spaced distinct picks across the candidate cells.
        let cell = free[i * free.len() / n_samples];
        let run = simulate(
            &setup.system,
            &setup.task,
            &ctrl,
            &grid.rep_point(cell),
            derive_seed2(setup.seed, 4, i as u64),
        )?;
        let mut traj = String::from("k");
        for d in 0..dim {
            let _ = write!(traj, ",x_{d}");
        }
        traj.push('\n');
        for (k, state) in run.states.iter().enumerate() {
            let _ = write!(traj, "{k}");
            for v in state {
                let _ = write!(traj, ",{v}");
            }
            traj.push('\n');
        }
        std::fs::write(setup.out.join(format!("trajectory_{i}.csv")), traj)?;
        samples.push(SampleReport {
            index: i,
            cell,
            outcome: outcome_name(run.outcome).to_string(),
            steps: run.pairs.len(),
        });
    }

    let report = EvalReport {
        system: setup.system_name.clone(),
        seed: setup.seed,
        runs_per_cell: est.runs_per_cell,
        v_avg_table: table.v_avg(),
        mean_empirical: est.mean,
        gap: (est.mean - table.v_avg()).abs(),
        outcomes: OutcomeReport {
            satisfied_goal: est.counts.satisfied_goal,
            stayed_safe: est.counts.stayed_safe,
            hit_obstacle: est.counts.hit_obstacle,
            left_domain: est.counts.left_domain,
            horizon_expired: est.counts.horizon_expired,
            controller_undefined: est.counts.controller_undefined,
        },
        samples,
        seconds: t0.elapsed().as_secs_f64(),
    };
    write_toml(&setup.out.join("evaluation_report.toml"), &report)?;
    println!(
        "evaluate: empirical mean {:.4} vs table V_avg {:.4} over {} runs/cell",
        report.mean_empirical, report.v_avg_table, report.runs_per_cell
    );
    Ok(Status::Done)
}

/// The full pipeline for a built-in benchmark: expert data, guided
/// synthesis, then empirical evaluation, sharing one configuration and
/// master seed.
pub fn benchmark(setup: &Setup) -> Result<Status> {
    if setup.benchmark.is_none() {
        return Err(Error::invalid(
            "the benchmark command needs run.benchmark; custom systems run the stages directly",
        ));
    }
    expert(setup)?;
    let status = synthesize(setup, None, None)?;
    evaluate(setup, None)?;
    Ok(status)
}

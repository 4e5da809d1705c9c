//! Backward value iteration over the grid abstraction and the guided
//! refinement loop around it.
//!
//! Two recursions share one engine: the exhaustive one scores every input
//! lattice point per cell and step, the guided one only scores a small
//! lattice window centered on the policy network's proposal. Both walk
//! candidate inputs in ascending flat order and replace the incumbent only
//! on a strict improvement, so ties always resolve to the lowest input
//! index and results are reproducible bit for bit regardless of how many
//! worker threads participate. Transition rows depend only on (cell,
//! input), not on the step, and are cached in a concurrent buffer shared
//! across steps, rounds and both recursion flavors.

use std::sync::Arc;

use dashmap::DashMap;
use rayon::prelude::*;

use crate::controller::{ControllerTable, SpecKind, NO_ACTION};
use crate::dataset::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::grid::{CellClass, GridAbstraction, TransitionRow};
use crate::model::StochasticSystem;
use crate::policy::{controller_to_dataset, PolicyNetwork, TrainConfig};
use crate::rng::derive_seed2;

/// Per-dimension lattice offsets defining the input window searched around
/// a proposed input. The window spans `steps` lattice positions per
/// dimension at a stride matching the guidance precision, biased one
/// position low when `steps` is even.
#[derive(Debug, Clone)]
pub struct LocalActionSet {
    offsets: Vec<Vec<i64>>,
}

impl LocalActionSet {
    /// `precision` is the spacing of searched inputs in raw input units;
    /// it must round to a whole (positive) number of lattice steps in
    /// every dimension. `steps` is the number of searched positions per
    /// dimension.
    pub fn new(grid: &GridAbstraction, precision: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("local window needs at least one step"));
        }
        if !precision.is_finite() || precision <= 0.0 {
            return Err(Error::invalid("guidance precision must be positive"));
        }
        let lo = -((steps / 2) as i64);
        let hi = steps as i64 - 1 + lo;
        let mut offsets = Vec::with_capacity(grid.input_dim());
        for (d, step) in grid.input_steps().iter().enumerate() {
            let stride = (precision / step).round() as i64;
            if stride < 1 {
                return Err(Error::invalid(format!(
                    "guidance precision {precision} is finer than the input lattice step {step} in dimension {d}"
                )));
            }
            offsets.push((lo..=hi).map(|o| o * stride).collect());
        }
        Ok(LocalActionSet { offsets })
    }

    /// Flat input indices of the window around `center`, clamped to the
    /// lattice, deduplicated, in ascending order.
    pub fn around(&self, grid: &GridAbstraction, center: usize) -> Vec<usize> {
        let multi = grid.input_multi(center);
        let counts = grid.input_points_per_dim();
        let mut axes: Vec<Vec<usize>> = Vec::with_capacity(multi.len());
        for d in 0..multi.len() {
            let mut axis: Vec<usize> = self.offsets[d]
                .iter()
                .map(|o| (multi[d] as i64 + o).clamp(0, counts[d] as i64 - 1) as usize)
                .collect();
            axis.dedup();
            axes.push(axis);
        }
        // Odometer with the last dimension fastest matches the flat index
        // order, so the output is ascending without a sort.
        let mut out = Vec::with_capacity(axes.iter().map(Vec::len).product());
        let mut pos = vec![0usize; axes.len()];
        let mut combo: Vec<usize> = axes.iter().map(|a| a[0]).collect();
        loop {
            out.push(grid.input_flat(&combo));
            let mut d = axes.len();
            loop {
                if d == 0 {
                    return out;
                }
                d -= 1;
                pos[d] += 1;
                if pos[d] < axes[d].len() {
                    combo[d] = axes[d][pos[d]];
                    break;
                }
                pos[d] = 0;
                combo[d] = axes[d][0];
            }
        }
    }

    /// True when every window covers the whole lattice no matter where it
    /// is centered, making guided synthesis equivalent to the exhaustive
    /// recursion.
    pub fn covers_lattice(&self, grid: &GridAbstraction) -> bool {
        let counts = grid.input_points_per_dim();
        (0..grid.input_dim()).all(|d| {
            let span = counts[d] as i64 - 1;
            let first = *self.offsets[d].first().unwrap();
            let last = *self.offsets[d].last().unwrap();
            // Stride 1 within the offsets and reach past both ends from
            // any center.
            self.offsets[d].windows(2).all(|w| w[1] - w[0] == 1)
                && first <= -span
                && last >= span
        })
    }
}

/// Concurrent cache of transition rows keyed by (cell, input). Rows are
/// independent of the step index, so one buffer serves every backward
/// step and every synthesis round over the same grid and system.
#[derive(Debug, Default)]
pub struct TransitionBuffer {
    rows: DashMap<u64, Arc<TransitionRow>>,
}

impl TransitionBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(cell: usize, input: usize) -> u64 {
        ((cell as u64) << 32) | input as u64
    }

    /// The cached row, computing and storing it on first use. Concurrent
    /// first uses may compute the row twice; the first insert wins and
    /// the row content is deterministic either way.
    pub fn row(
        &self,
        grid: &GridAbstraction,
        sys: &StochasticSystem,
        cell: usize,
        input: usize,
        cutoff: f64,
    ) -> Result<Arc<TransitionRow>> {
        let key = Self::key(cell, input);
        if let Some(row) = self.rows.get(&key) {
            return Ok(row.value().clone());
        }
        let row = Arc::new(grid.transition_row(sys, cell, &grid.input_point(input), cutoff)?);
        let entry = self.rows.entry(key).or_insert(row);
        Ok(entry.value().clone())
    }

    /// Number of distinct rows computed so far.
    pub fn rows_computed(&self) -> usize {
        self.rows.len()
    }
}

enum Candidates<'a> {
    Full,
    Guided {
        net: &'a PolicyNetwork,
        local: &'a LocalActionSet,
    },
}

fn terminal_values(grid: &GridAbstraction) -> Vec<f64> {
    (0..grid.n_cells())
        .map(|c| match grid.class(c) {
            CellClass::Goal => 1.0,
            CellClass::Obstacle => 0.0,
            CellClass::Free => match grid.task().kind() {
                SpecKind::Safety => 1.0,
                SpecKind::ReachAvoid => 0.0,
            },
        })
        .collect()
}

fn value_iteration(
    grid: &GridAbstraction,
    sys: &StochasticSystem,
    buffer: &TransitionBuffer,
    cutoff: f64,
    candidates: &Candidates,
) -> Result<ControllerTable> {
    let task = grid.task();
    let horizon = task.horizon();
    let n = grid.n_cells();

    let mut values = vec![0.0; (horizon + 1) * n];
    let mut actions = vec![NO_ACTION; horizon * n];
    values[horizon * n..].copy_from_slice(&terminal_values(grid));

    for k in (0..horizon).rev() {
        let (head, tail) = values.split_at_mut((k + 1) * n);
        let next = &tail[..n];
        let layer = &mut head[k * n..];
        // Goal cells stay at probability one and obstacle cells at zero
        // for every step; only free cells choose an input.
        for c in 0..n {
            layer[c] = match grid.class(c) {
                CellClass::Goal => 1.0,
                CellClass::Obstacle => 0.0,
                CellClass::Free => 0.0,
            };
        }
        let solved: Vec<(usize, f64, u32)> = grid
            .free_cells()
            .par_iter()
            .map(|&cell| -> Result<(usize, f64, u32)> {
                let mut best = 0.0f64;
                let mut act = NO_ACTION;
                let mut score = |input: usize| -> Result<()> {
                    let row = buffer.row(grid, sys, cell, input, cutoff)?;
                    let q = row.backup(grid, next);
                    if q > best {
                        best = q;
                        act = input as u32;
                    }
                    Ok(())
                };
                match candidates {
                    Candidates::Full => {
                        for input in 0..grid.n_inputs() {
                            score(input)?;
                        }
                    }
                    Candidates::Guided { net, local } => {
                        let proposal = net.forward(&grid.rep_point(cell), k);
                        let center = grid.snap_input(&proposal);
                        for input in local.around(grid, center) {
                            score(input)?;
                        }
                    }
                }
                Ok((cell, best, act))
            })
            .collect::<Result<_>>()?;
        for (cell, v, a) in solved {
            layer[cell] = v;
            actions[k * n + cell] = a;
        }
    }

    ControllerTable::new(
        task.kind(),
        horizon,
        n,
        grid.n_inputs(),
        *grid.digest(),
        actions,
        values,
    )
}

/// Dynamic programming over the full input lattice: the exact solution of
/// the abstract problem, used as the reference the guided recursion is
/// measured against and to build expert controllers on coarse grids.
pub fn full_value_iteration(
    grid: &GridAbstraction,
    sys: &StochasticSystem,
    buffer: &TransitionBuffer,
    cutoff: f64,
) -> Result<ControllerTable> {
    value_iteration(grid, sys, buffer, cutoff, &Candidates::Full)
}

/// Dynamic programming restricted, per cell and step, to the local window
/// around the network's proposed input.
pub fn guided_value_iteration(
    grid: &GridAbstraction,
    sys: &StochasticSystem,
    net: &PolicyNetwork,
    local: &LocalActionSet,
    buffer: &TransitionBuffer,
    cutoff: f64,
) -> Result<ControllerTable> {
    if net.state_dim() != grid.state_dim()
        || net.input_dim() != grid.input_dim()
        || net.horizon() != grid.task().horizon()
    {
        return Err(Error::invalid(
            "policy network shape does not match the grid and task",
        ));
    }
    value_iteration(grid, sys, buffer, cutoff, &Candidates::Guided { net, local })
}

/// Settings for the guided refinement loop.
#[derive(Debug, Clone)]
pub struct LoopConfig {
    /// Target average satisfaction probability; the loop stops as soon as
    /// a round reaches it. Zero means exactly one round.
    pub threshold: f64,
    /// Total synthesis rounds allowed, counting the first.
    pub max_rounds: usize,
    /// Hidden layer sizes for each round's freshly initialized network.
    pub hidden: Vec<usize>,
    /// Template for every training run; per-round seeds are derived from
    /// the loop seed, not taken from this template.
    pub train: TrainConfig,
    pub cutoff: f64,
    /// Spacing of searched inputs, in raw input units.
    pub precision: f64,
    /// Searched lattice positions per input dimension.
    pub local_steps: usize,
    pub seed: u64,
}

/// What one synthesis round produced.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub v_avg: f64,
    /// Final training MSE of this round's network, in raw input units.
    pub train_mse: Option<f64>,
    pub epochs: usize,
    /// Distinct transition rows in the buffer after this round.
    pub rows_computed: usize,
    /// Wall-clock time the round took.
    pub seconds: f64,
}

pub struct SynthesisOutcome {
    pub table: ControllerTable,
    pub net: PolicyNetwork,
    pub records: Vec<RoundRecord>,
    /// True when some round reached the threshold.
    pub reached_threshold: bool,
    /// Round whose table and network are returned (highest average value).
    pub best_round: usize,
}

/// The guided refinement loop: each round initializes a fresh network,
/// fits it by imitation (on the previous round's lifted controller first,
/// then on the expert set), synthesizes with the guided recursion and
/// stops once the average satisfaction probability reaches the threshold
/// or the round budget runs out. Returns the best round seen either way.
pub fn synthesis_loop(
    grid: &GridAbstraction,
    sys: &StochasticSystem,
    expert: &TrajectoryDataset,
    cfg: &LoopConfig,
    buffer: &TransitionBuffer,
) -> Result<SynthesisOutcome> {
    if cfg.max_rounds == 0 {
        return Err(Error::invalid("at least one synthesis round is required"));
    }
    if !cfg.threshold.is_finite() {
        return Err(Error::invalid("threshold must be finite"));
    }
    let local = LocalActionSet::new(grid, cfg.precision, cfg.local_steps)?;
    let task = grid.task();

    let mut records = Vec::new();
    let mut best: Option<(ControllerTable, PolicyNetwork, usize)> = None;
    let mut best_v = f64::NEG_INFINITY;
    let mut lifted: Option<TrajectoryDataset> = None;

    for round in 0..cfg.max_rounds {
        let started = std::time::Instant::now();
        let mut net = PolicyNetwork::init(
            grid.state_box(),
            grid.input_box(),
            task.horizon(),
            &cfg.hidden,
            derive_seed2(cfg.seed, round as u64, 0),
        )?;
        let mut epochs = 0;
        if let Some(prev) = &lifted {
            let tc = TrainConfig {
                seed: derive_seed2(cfg.seed, round as u64, 1),
                ..cfg.train.clone()
            };
            net.imitation_learn(prev, &tc)?;
            epochs += tc.epochs;
        }
        let tc = TrainConfig {
            seed: derive_seed2(cfg.seed, round as u64, 2),
            ..cfg.train.clone()
        };
        net.imitation_learn(expert, &tc)?;
        epochs += tc.epochs;

        let table = guided_value_iteration(grid, sys, &net, &local, buffer, cfg.cutoff)?;
        let v_avg = table.v_avg();
        records.push(RoundRecord {
            round,
            v_avg,
            train_mse: net.meta().final_mse,
            epochs,
            rows_computed: buffer.rows_computed(),
            seconds: started.elapsed().as_secs_f64(),
        });

        let reached = v_avg >= cfg.threshold;
        if !reached && round + 1 < cfg.max_rounds {
            // A table with no defined action anywhere cannot be lifted;
            // the next round then falls back to expert data alone.
            lifted = match controller_to_dataset(&table, grid) {
                Ok(ds) => Some(ds),
                Err(Error::EmptyDataset(_)) => None,
                Err(e) => return Err(e),
            };
        }
        if v_avg > best_v {
            best_v = v_avg;
            best = Some((table, net, round));
        }
        if reached {
            break;
        }
    }

    let (table, net, best_round) = best.expect("at least one round ran");
    Ok(SynthesisOutcome {
        table,
        net,
        records,
        reached_threshold: best_v >= cfg.threshold,
        best_round,
    })
}

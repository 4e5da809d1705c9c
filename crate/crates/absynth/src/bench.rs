//! The three built-in benchmark systems: a planar robot with speed and
//! heading inputs (reach-avoid), five rooms on a thermal ring with two
//! heaters (safety), and a five-cell ring road with two metered on-ramps
//! (safety). Each comes bundled with its task, discretization, guidance
//! defaults and coarse expert-generation defaults.

use std::sync::Arc;

use crate::controller::Specification;
use crate::error::{Error, Result};
use crate::geom::HyperRect;
use crate::grid::GridSpec;
use crate::model::StochasticSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BenchmarkId {
    #[serde(rename = "robot2d")]
    Robot2D,
    #[serde(rename = "room-temp5d")]
    RoomTemp5D,
    #[serde(rename = "traffic5d")]
    Traffic5D,
}

impl BenchmarkId {
    pub const ALL: [BenchmarkId; 3] =
        [BenchmarkId::Robot2D, BenchmarkId::RoomTemp5D, BenchmarkId::Traffic5D];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkId::Robot2D => "robot2d",
            BenchmarkId::RoomTemp5D => "room-temp5d",
            BenchmarkId::Traffic5D => "traffic5d",
        }
    }
}

impl std::str::FromStr for BenchmarkId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "robot2d" => Ok(BenchmarkId::Robot2D),
            "room-temp5d" => Ok(BenchmarkId::RoomTemp5D),
            "traffic5d" => Ok(BenchmarkId::Traffic5D),
            other => Err(Error::invalid(format!(
                "unknown benchmark '{other}' (expected robot2d, room-temp5d or traffic5d)"
            ))),
        }
    }
}

impl std::fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which input drives the robot's second coordinate: `Unicycle` advances it
/// by `dt * u1 * sin(u2)` (speed times heading), `AngleDrive` by
/// `dt * u2 * sin(u2)`. `AngleDrive` makes the advance non-negative for
/// every input, so southward motion is impossible; it exists for
/// comparison runs and is not the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RobotVariant {
    #[default]
    Unicycle,
    AngleDrive,
}

/// Parameter overrides for the built-in benchmarks. Every field has a
/// documented default; `validate` rejects combinations that push a linear
/// map's diagonal outside [0,1] or break the grid totals.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkParams {
    /// Robot integration step.
    pub robot_dt: f64,
    pub robot_variant: RobotVariant,
    /// Thermal exchange coefficient between ring neighbors.
    pub room_exchange: f64,
    /// Exchange coefficient with the outside.
    pub room_wall: f64,
    /// Heater input gain.
    pub room_heater_gain: f64,
    /// Outside temperature.
    pub room_outside_temp: f64,
    /// Heater temperature.
    pub room_heater_temp: f64,
    /// Sampling period of the road model.
    pub traffic_tau: f64,
    /// Free-flow speed per road cell.
    pub traffic_v: [f64; 5],
    /// Length per road cell.
    pub traffic_l: [f64; 5],
    /// Exit ratio on the two cells feeding off-ramps.
    pub traffic_q: f64,
    /// Per-dimension state cell counts, replacing the benchmark default.
    pub state_cells: Option<Vec<usize>>,
    /// Per-dimension input lattice point counts (limits included),
    /// replacing the benchmark default.
    pub input_points: Option<Vec<usize>>,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams {
            robot_dt: 1.0,
            robot_variant: RobotVariant::Unicycle,
            room_exchange: 0.3,
            room_wall: 0.022,
            room_heater_gain: 0.05,
            room_outside_temp: -1.0,
            room_heater_temp: 50.0,
            traffic_tau: 1.0,
            traffic_v: [0.3; 5],
            traffic_l: [1.0; 5],
            traffic_q: 0.2,
            state_cells: None,
            input_points: None,
        }
    }
}

impl BenchmarkParams {
    /// Outflow ratio `tau * v_i / l_i` of road cell `i`.
    fn flow_ratio(&self, i: usize) -> f64 {
        self.traffic_tau * self.traffic_v[i] / self.traffic_l[i]
    }

    pub fn validate(&self, id: BenchmarkId) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be finite, got {v}")))
            }
        };
        match id {
            BenchmarkId::Robot2D => {
                finite("robot_dt", self.robot_dt)?;
                if self.robot_dt <= 0.0 {
                    return Err(Error::invalid("robot_dt must be > 0"));
                }
            }
            BenchmarkId::RoomTemp5D => {
                for (name, v) in [
                    ("room_exchange", self.room_exchange),
                    ("room_wall", self.room_wall),
                    ("room_heater_gain", self.room_heater_gain),
                    ("room_outside_temp", self.room_outside_temp),
                    ("room_heater_temp", self.room_heater_temp),
                ] {
                    finite(name, v)?;
                }
                if self.room_exchange < 0.0 || self.room_wall < 0.0 || self.room_heater_gain < 0.0
                {
                    return Err(Error::invalid("room coefficients must be >= 0"));
                }
                // Self-coefficients at the extreme inputs must stay in [0,1].
                let b = 1.0 - 2.0 * self.room_exchange - self.room_wall;
                let a_full = b - self.room_heater_gain;
                if !(0.0..=1.0).contains(&b) || !(0.0..=1.0).contains(&a_full) {
                    return Err(Error::invalid(format!(
                        "room self-coefficients leave [0,1]: {b} unheated, {a_full} at full heat"
                    )));
                }
            }
            BenchmarkId::Traffic5D => {
                finite("traffic_tau", self.traffic_tau)?;
                finite("traffic_q", self.traffic_q)?;
                if self.traffic_q < 0.0 {
                    return Err(Error::invalid("traffic_q must be >= 0"));
                }
                for i in 0..5 {
                    finite("traffic_v", self.traffic_v[i])?;
                    finite("traffic_l", self.traffic_l[i])?;
                    if self.traffic_v[i] < 0.0 || self.traffic_l[i] <= 0.0 || self.traffic_tau <= 0.0
                    {
                        return Err(Error::invalid(
                            "traffic_tau and traffic_v must be >= 0, traffic_l > 0",
                        ));
                    }
                    let r = self.flow_ratio(i);
                    // Off-ramp cells lose both the outflow and the exit ratio.
                    let lowest = 1.0 - r - if i == 1 || i == 3 { self.traffic_q } else { 0.0 };
                    if !(0.0..=1.0).contains(&lowest) {
                        return Err(Error::invalid(format!(
                            "road cell {} self-coefficient {lowest} leaves [0,1]",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Action-window defaults for guided synthesis: the augmentation precision
/// (lattice distance between considered neighbor actions), the number of
/// steps per input dimension, and the transition probability cut-off.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GuidanceParams {
    pub precision: f64,
    pub local_steps: usize,
    pub cutoff: f64,
}

/// Coarse-grid defaults for generating expert runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertDefaults {
    pub grid: GridSpec,
    pub n_traj: usize,
}

/// A fully assembled benchmark setup.
#[derive(Clone)]
pub struct Benchmark {
    pub system: StochasticSystem,
    pub task: Specification,
    pub grid: GridSpec,
    pub guidance: GuidanceParams,
    pub expert: ExpertDefaults,
}

fn robot_step(p: &BenchmarkParams, x: &[f64], u: &[f64]) -> Vec<f64> {
    let drive = match p.robot_variant {
        RobotVariant::Unicycle => u[0],
        RobotVariant::AngleDrive => u[1],
    };
    vec![
        x[0] + p.robot_dt * u[0] * u[1].cos(),
        x[1] + p.robot_dt * drive * u[1].sin(),
    ]
}

fn room_step(p: &BenchmarkParams, x: &[f64], u: &[f64]) -> Vec<f64> {
    let b = 1.0 - 2.0 * p.room_exchange - p.room_wall;
    (0..5)
        .map(|i| {
            let neighbors = x[(i + 4) % 5] + x[(i + 1) % 5];
            // Heaters sit in rooms 1 and 3 (indices 0 and 2).
            let heat = match i {
                0 => u[0],
                2 => u[1],
                _ => 0.0,
            };
            (b - p.room_heater_gain * heat) * x[i]
                + p.room_heater_gain * p.room_heater_temp * heat
                + p.room_exchange * neighbors
                + p.room_wall * p.room_outside_temp
        })
        .collect()
}

fn traffic_step(p: &BenchmarkParams, x: &[f64], u: &[f64]) -> Vec<f64> {
    (0..5)
        .map(|i| {
            let inflow = p.flow_ratio((i + 4) % 5) * x[(i + 4) % 5];
            let exit = if i == 1 || i == 3 { p.traffic_q } else { 0.0 };
            let ramp = match i {
                0 => 6.0 * u[0],
                2 => 8.0 * u[1],
                _ => 0.0,
            };
            (1.0 - p.flow_ratio(i) - exit) * x[i] + inflow + ramp
        })
        .collect()
}

/// The noiseless one-step update of a benchmark; the same map the bundled
/// `StochasticSystem` uses as its nominal dynamics.
pub fn step_nominal(id: BenchmarkId, params: &BenchmarkParams, x: &[f64], u: &[f64]) -> Vec<f64> {
    match id {
        BenchmarkId::Robot2D => robot_step(params, x, u),
        BenchmarkId::RoomTemp5D => room_step(params, x, u),
        BenchmarkId::Traffic5D => traffic_step(params, x, u),
    }
}

fn grid_or_default(
    params: &BenchmarkParams,
    state_box: &HyperRect,
    input_box: &HyperRect,
    default_cells: &[usize],
    default_points: &[usize],
) -> Result<GridSpec> {
    let cells = params.state_cells.as_deref().unwrap_or(default_cells);
    let points = params.input_points.as_deref().unwrap_or(default_points);
    GridSpec::from_counts(state_box, input_box, cells, points)
}

pub fn make_benchmark(id: BenchmarkId, params: &BenchmarkParams) -> Result<Benchmark> {
    params.validate(id)?;
    let p = params.clone();
    match id {
        BenchmarkId::Robot2D => {
            let state_box = HyperRect::bounded(vec![-10.0, -10.0], vec![10.0, 10.0])?;
            let input_box = HyperRect::bounded(vec![-1.0, -1.0], vec![1.0, 1.0])?;
            let system = StochasticSystem::new(
                state_box.clone(),
                input_box.clone(),
                Arc::new(move |x: &[f64], u: &[f64]| robot_step(&p, x, u)),
                vec![0.75, 0.75],
            )?;
            let task = Specification::reach_avoid(
                16,
                HyperRect::new(vec![5.0, 5.0], vec![7.0, 7.0])?,
                Some(HyperRect::new(vec![-2.0, -2.0], vec![2.0, 2.0])?),
            )?;
            let grid = grid_or_default(params, &state_box, &input_box, &[40, 40], &[21, 21])?;
            Ok(Benchmark {
                system,
                task,
                grid,
                guidance: GuidanceParams {
                    precision: 0.1,
                    local_steps: 10,
                    cutoff: 1e-4,
                },
                expert: ExpertDefaults {
                    grid: GridSpec::from_counts(&state_box, &input_box, &[10, 10], &[6, 6])?,
                    n_traj: 121,
                },
            })
        }
        BenchmarkId::RoomTemp5D => {
            let state_box = HyperRect::bounded(vec![18.8; 5], vec![21.2; 5])?;
            let input_box = HyperRect::bounded(vec![0.0, 0.0], vec![1.0, 1.0])?;
            let system = StochasticSystem::new(
                state_box.clone(),
                input_box.clone(),
                Arc::new(move |x: &[f64], u: &[f64]| room_step(&p, x, u)),
                vec![0.01; 5],
            )?;
            let task = Specification::safety(8, None)?;
            let grid = grid_or_default(params, &state_box, &input_box, &[6; 5], &[21, 21])?;
            Ok(Benchmark {
                system,
                task,
                grid,
                guidance: GuidanceParams {
                    precision: 0.05,
                    local_steps: 7,
                    cutoff: 1e-4,
                },
                // The thermal drift is under half a synthesis cell per step,
                // so any coarser state grid self-loops and learns to idle;
                // only the input lattice is coarsened here.
                expert: ExpertDefaults {
                    grid: GridSpec::from_counts(&state_box, &input_box, &[6; 5], &[6, 6])?,
                    n_traj: 935,
                },
            })
        }
        BenchmarkId::Traffic5D => {
            let state_box = HyperRect::bounded(vec![0.0; 5], vec![10.0; 5])?;
            let input_box = HyperRect::bounded(vec![0.0, 0.0], vec![1.0, 1.0])?;
            let system = StochasticSystem::new(
                state_box.clone(),
                input_box.clone(),
                Arc::new(move |x: &[f64], u: &[f64]| traffic_step(&p, x, u)),
                vec![0.7; 5],
            )?;
            let task = Specification::safety(7, None)?;
            let grid = grid_or_default(
                params,
                &state_box,
                &input_box,
                &[20, 5, 5, 5, 5],
                &[100, 100],
            )?;
            let input_step = grid.input_steps[0];
            Ok(Benchmark {
                system,
                task,
                grid,
                guidance: GuidanceParams {
                    precision: input_step,
                    local_steps: 10,
                    cutoff: 1e-4,
                },
                expert: ExpertDefaults {
                    grid: GridSpec::from_counts(
                        &state_box,
                        &input_box,
                        &[5, 2, 2, 2, 2],
                        &[3, 3],
                    )?,
                    n_traj: 200,
                },
            })
        }
    }
}

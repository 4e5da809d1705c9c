//! Finite abstraction of the continuous system: a uniform cell grid over
//! the state box and a uniform point lattice over the input box.
//!
//! Cells are half-open `[l, l + w)` per dimension except the topmost cell,
//! which is closed, so the cells tile the state box exactly and every point
//! has a unique cell. Each cell is represented by its center. Transitions
//! are integrated over a per-dimension tail-cutoff window around the kernel
//! mean: with half-width `sd * quantile(1 - cutoff / (2n))` per dimension,
//! a union bound guarantees the mass omitted inside the domain is at most
//! `cutoff`. Mass leaving the state box is deliberately dropped, which
//! under-approximates satisfaction probabilities (safe side).
//!
//! Because kernels have diagonal covariance, a transition row factorizes:
//! the mass of a window cell is the product of per-dimension interval
//! masses. Rows store those per-dimension vectors instead of one entry per
//! cell, which keeps the buffered-row memory footprint linear in dimension.

use sha2::{Digest, Sha256};

use crate::controller::{SpecKind, Specification};
use crate::error::{Error, Result};
use crate::geom::HyperRect;
use crate::model::{normal_quantile, GaussianKernel};
use crate::model::StochasticSystem;

/// Discretization parameters. Cell widths and lattice steps are per
/// dimension; when `include_input_limits` is set the lattice runs from the
/// lower to the upper corner inclusive, otherwise the top limit is left out.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub state_widths: Vec<f64>,
    pub input_steps: Vec<f64>,
    pub include_input_limits: bool,
}

impl GridSpec {
    /// Widths that split `state_box` into `cells[d]` equal cells and steps
    /// that place `points[d]` lattice points per input dimension (limits
    /// included).
    pub fn from_counts(
        state_box: &HyperRect,
        input_box: &HyperRect,
        cells: &[usize],
        points: &[usize],
    ) -> Result<Self> {
        if cells.len() != state_box.dim() || points.len() != input_box.dim() {
            return Err(Error::invalid("count vectors do not match box dimensions"));
        }
        if cells.iter().any(|c| *c == 0) || points.iter().any(|p| *p < 2) {
            return Err(Error::invalid(
                "need >= 1 cell per state dimension and >= 2 lattice points per input dimension",
            ));
        }
        let state_widths = (0..cells.len())
            .map(|d| state_box.width(d) / cells[d] as f64)
            .collect();
        let input_steps = (0..points.len())
            .map(|d| input_box.width(d) / (points[d] - 1) as f64)
            .collect();
        Ok(GridSpec {
            state_widths,
            input_steps,
            include_input_limits: true,
        })
    }
}

/// Cell classification under the task's region boxes. A cell is `Goal`
/// only when fully contained in the goal box and `Obstacle` when its
/// overlap with the obstacle box has positive volume; partial goal overlap
/// stays `Free` and is accounted exactly in the transition rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    Free,
    Goal,
    Obstacle,
}

/// Per-dimension index window of a transition row, inclusive bounds.
pub type IndexWindow = Vec<(usize, usize)>;

/// One buffered transition row in separable form. The mass of window cell
/// `(i_1, .., i_n)` is `prod_d mass[d][i_d - lo_d]` minus the same product
/// over `goal_overlap` when a goal box is present; `goal_mass` is the exact
/// mass of the goal box itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRow {
    window: Option<RowWindow>,
    goal_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct RowWindow {
    lo: Vec<usize>,
    mass: Vec<Vec<f64>>,
    goal_overlap: Option<Vec<Vec<f64>>>,
}

impl TransitionRow {
    /// Mass captured by the goal box (zero for safety tasks).
    pub fn goal_mass(&self) -> f64 {
        self.goal_mass
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_none()
    }

    /// Sum of all row entries: total mass on window cells net of the goal
    /// overlap. Exact in separable form.
    pub fn interior_mass(&self) -> f64 {
        let Some(w) = &self.window else { return 0.0 };
        let total: f64 = w.mass.iter().map(|m| m.iter().sum::<f64>()).product();
        let overlap = w
            .goal_overlap
            .as_ref()
            .map(|o| o.iter().map(|m| m.iter().sum::<f64>()).product())
            .unwrap_or(0.0);
        total - overlap
    }

    /// `sum_cells T(cell) * values[cell] + goal_mass`, the backup of a
    /// value vector through this row. `values` is indexed by flat cell.
    pub fn backup(&self, grid: &GridAbstraction, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), grid.n_cells());
        let mut acc = self.goal_mass;
        if let Some(w) = &self.window {
            let base: usize = w
                .lo
                .iter()
                .zip(&grid.strides)
                .map(|(lo, s)| lo * s)
                .sum();
            acc += backup_rec(w, grid, values, 0, base, 1.0, 1.0);
        }
        // Summing a full-mass row can land a few ulps past one.
        acc.min(1.0)
    }

    /// Materializes the nonzero entries as (flat cell, probability) pairs.
    pub fn to_sparse(&self, grid: &GridAbstraction) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let Some(w) = &self.window else { return out };
        let dims = w.lo.len();
        let mut idx = vec![0usize; dims];
        'outer: loop {
            let mut mass = 1.0;
            let mut overlap = if w.goal_overlap.is_some() { 1.0 } else { 0.0 };
            let mut flat = 0usize;
            for d in 0..dims {
                mass *= w.mass[d][idx[d]];
                if let Some(o) = &w.goal_overlap {
                    overlap *= o[d][idx[d]];
                }
                flat += (w.lo[d] + idx[d]) * grid.strides[d];
            }
            let p = mass - overlap;
            if p > 0.0 {
                out.push((flat, p));
            }
            for d in (0..dims).rev() {
                idx[d] += 1;
                if idx[d] < w.mass[d].len() {
                    continue 'outer;
                }
                idx[d] = 0;
            }
            break;
        }
        out
    }

    /// The per-dimension inclusive index ranges of the window, if any.
    pub fn index_window(&self) -> Option<IndexWindow> {
        self.window
            .as_ref()
            .map(|w| {
                w.lo.iter()
                    .zip(&w.mass)
                    .map(|(lo, m)| (*lo, lo + m.len() - 1))
                    .collect()
            })
    }
}

fn backup_rec(
    w: &RowWindow,
    grid: &GridAbstraction,
    values: &[f64],
    d: usize,
    base: usize,
    mass: f64,
    overlap: f64,
) -> f64 {
    let stride = grid.strides[d];
    let masses = &w.mass[d];
    if d + 1 == w.lo.len() {
        let mut acc = 0.0;
        match w.goal_overlap.as_ref() {
            Some(o) => {
                let od = &o[d];
                for i in 0..masses.len() {
                    let p = mass * masses[i] - overlap * od[i];
                    acc += p * values[base + i * stride];
                }
            }
            None => {
                for i in 0..masses.len() {
                    acc += mass * masses[i] * values[base + i * stride];
                }
            }
        }
        acc
    } else {
        let mut acc = 0.0;
        for i in 0..masses.len() {
            let o = w
                .goal_overlap
                .as_ref()
                .map(|ov| overlap * ov[d][i])
                .unwrap_or(0.0);
            acc += backup_rec(
                w,
                grid,
                values,
                d + 1,
                base + i * stride,
                mass * masses[i],
                o,
            );
        }
        acc
    }
}

/// The finite abstraction: cell grid, input lattice, cell classes and the
/// task it was built for.
#[derive(Debug, Clone)]
pub struct GridAbstraction {
    state_box: HyperRect,
    input_box: HyperRect,
    widths: Vec<f64>,
    cells: Vec<usize>,
    strides: Vec<usize>,
    n_cells: usize,
    input_steps: Vec<f64>,
    input_counts: Vec<usize>,
    input_strides: Vec<usize>,
    n_inputs: usize,
    include_input_limits: bool,
    classes: Vec<CellClass>,
    free_cells: Vec<usize>,
    task: Specification,
    digest: [u8; 32],
}

/// Number of uniform pieces of width `step` in `width`, tolerant of
/// floating-point remainders: near-integer ratios round, others truncate.
fn piece_count(width: f64, step: f64) -> usize {
    let raw = width / step;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-6 * rounded.max(1.0) {
        rounded as usize
    } else {
        raw.floor() as usize
    }
}

impl GridAbstraction {
    pub fn build(
        spec: &GridSpec,
        sys: &StochasticSystem,
        task: &Specification,
    ) -> Result<Self> {
        Self::build_boxes(spec, sys.state_box(), sys.input_box(), task)
    }

    pub fn build_boxes(
        spec: &GridSpec,
        state_box: &HyperRect,
        input_box: &HyperRect,
        task: &Specification,
    ) -> Result<Self> {
        let n = state_box.dim();
        let m = input_box.dim();
        if spec.state_widths.len() != n {
            return Err(Error::invalid(format!(
                "{} state widths for state dimension {n}",
                spec.state_widths.len()
            )));
        }
        if spec.input_steps.len() != m {
            return Err(Error::invalid(format!(
                "{} input steps for input dimension {m}",
                spec.input_steps.len()
            )));
        }
        if spec.state_widths.iter().any(|w| !w.is_finite() || *w <= 0.0)
            || spec.input_steps.iter().any(|s| !s.is_finite() || *s <= 0.0)
        {
            return Err(Error::invalid("cell widths and lattice steps must be > 0"));
        }
        task.validate_against(state_box)?;

        let mut cells = Vec::with_capacity(n);
        for d in 0..n {
            let c = piece_count(state_box.width(d), spec.state_widths[d]).max(1);
            if c > 1 << 20 {
                return Err(Error::invalid(format!("dimension {d}: {c} cells is implausible")));
            }
            cells.push(c);
        }
        let mut input_counts = Vec::with_capacity(m);
        for d in 0..m {
            let pieces = piece_count(input_box.width(d), spec.input_steps[d]);
            let count = if spec.include_input_limits {
                pieces + 1
            } else {
                pieces
            };
            if count == 0 {
                return Err(Error::invalid(format!(
                    "input dimension {d} has an empty lattice"
                )));
            }
            input_counts.push(count);
        }

        // Row-major flattening, last dimension fastest.
        let strides = strides_of(&cells);
        let input_strides = strides_of(&input_counts);
        let n_cells = cells.iter().product();
        let n_inputs = input_counts.iter().product();

        let mut grid = GridAbstraction {
            state_box: state_box.clone(),
            input_box: input_box.clone(),
            widths: spec.state_widths.clone(),
            cells,
            strides,
            n_cells,
            input_steps: spec.input_steps.clone(),
            input_counts,
            input_strides,
            n_inputs,
            include_input_limits: spec.include_input_limits,
            classes: Vec::new(),
            free_cells: Vec::new(),
            task: task.clone(),
            digest: [0u8; 32],
        };
        grid.classes = (0..n_cells).map(|j| grid.classify(j)).collect();
        grid.free_cells = (0..n_cells)
            .filter(|j| grid.classes[*j] == CellClass::Free)
            .collect();
        grid.digest = grid.compute_digest();
        Ok(grid)
    }

    fn classify(&self, cell: usize) -> CellClass {
        let cell_box = self.cell_box(cell);
        if let Some(obstacle) = self.task.obstacle() {
            if cell_box.overlaps(obstacle, 1e-9) {
                return CellClass::Obstacle;
            }
        }
        if let Some(goal) = self.task.goal() {
            if cell_box.contained_in(goal, 1e-9) {
                return CellClass::Goal;
            }
        }
        CellClass::Free
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn state_dim(&self) -> usize {
        self.cells.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_counts.len()
    }

    pub fn cells_per_dim(&self) -> &[usize] {
        &self.cells
    }

    pub fn input_points_per_dim(&self) -> &[usize] {
        &self.input_counts
    }

    pub fn input_steps(&self) -> &[f64] {
        &self.input_steps
    }

    pub fn state_box(&self) -> &HyperRect {
        &self.state_box
    }

    pub fn input_box(&self) -> &HyperRect {
        &self.input_box
    }

    pub fn task(&self) -> &Specification {
        &self.task
    }

    pub fn class(&self, cell: usize) -> CellClass {
        self.classes[cell]
    }

    pub fn free_cells(&self) -> &[usize] {
        &self.free_cells
    }

    /// SHA-256 over the canonical description of the discretization; stored
    /// in controller artifacts so evaluation can refuse a mismatched grid.
    pub fn digest(&self) -> &[u8; 32] {
        &self.digest
    }

    fn compute_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"absynth-grid-v1");
        let push_usizes = |h: &mut Sha256, v: &[usize]| {
            for x in v {
                h.update((*x as u64).to_le_bytes());
            }
        };
        let push_f64s = |h: &mut Sha256, v: &[f64]| {
            for x in v {
                h.update(x.to_le_bytes());
            }
        };
        h.update((self.state_dim() as u64).to_le_bytes());
        h.update((self.input_dim() as u64).to_le_bytes());
        push_f64s(&mut h, self.state_box.lower());
        push_f64s(&mut h, self.state_box.upper());
        push_f64s(&mut h, &self.widths);
        push_usizes(&mut h, &self.cells);
        push_f64s(&mut h, self.input_box.lower());
        push_f64s(&mut h, self.input_box.upper());
        push_f64s(&mut h, &self.input_steps);
        push_usizes(&mut h, &self.input_counts);
        h.update([u8::from(self.include_input_limits)]);
        h.finalize().into()
    }

    // ---- state side ----

    fn quantize_dim(&self, d: usize, x: f64) -> Option<usize> {
        let lo = self.state_box.lower()[d];
        let hi = self.state_box.upper()[d];
        if x < lo || x > hi {
            return None;
        }
        if x == hi {
            return Some(self.cells[d] - 1);
        }
        let idx = ((x - lo) / self.widths[d]).floor() as usize;
        Some(idx.min(self.cells[d] - 1))
    }

    /// Cell containing `x`, or `None` when `x` is outside the state box.
    /// Interior boundary points belong to the cell whose lower face they
    /// lie on; the upper box boundary belongs to the last cell.
    pub fn quantize_state(&self, x: &[f64]) -> Option<usize> {
        debug_assert_eq!(x.len(), self.state_dim());
        let mut flat = 0usize;
        for d in 0..self.state_dim() {
            flat += self.quantize_dim(d, x[d])? * self.strides[d];
        }
        Some(flat)
    }

    pub fn cell_multi(&self, cell: usize) -> Vec<usize> {
        debug_assert!(cell < self.n_cells);
        let mut rest = cell;
        self.strides
            .iter()
            .map(|s| {
                let i = rest / s;
                rest %= s;
                i
            })
            .collect()
    }

    pub fn cell_flat(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Center of the cell; the representative point used everywhere.
    pub fn rep_point(&self, cell: usize) -> Vec<f64> {
        let multi = self.cell_multi(cell);
        (0..self.state_dim())
            .map(|d| self.cell_bounds(d, multi[d]).0 * 0.5 + self.cell_bounds(d, multi[d]).1 * 0.5)
            .collect()
    }

    /// Lower and upper bound of cell index `i` in dimension `d`. The last
    /// cell's upper bound is the box bound itself.
    fn cell_bounds(&self, d: usize, i: usize) -> (f64, f64) {
        let lo = self.state_box.lower()[d] + i as f64 * self.widths[d];
        let hi = if i + 1 == self.cells[d] {
            self.state_box.upper()[d]
        } else {
            self.state_box.lower()[d] + (i + 1) as f64 * self.widths[d]
        };
        (lo, hi)
    }

    pub fn cell_box(&self, cell: usize) -> HyperRect {
        let multi = self.cell_multi(cell);
        let (lower, upper): (Vec<f64>, Vec<f64>) = (0..self.state_dim())
            .map(|d| self.cell_bounds(d, multi[d]))
            .unzip();
        HyperRect::new(lower, upper).expect("cell bounds are valid")
    }

    // ---- input side ----

    pub fn input_multi(&self, input: usize) -> Vec<usize> {
        debug_assert!(input < self.n_inputs);
        let mut rest = input;
        self.input_strides
            .iter()
            .map(|s| {
                let i = rest / s;
                rest %= s;
                i
            })
            .collect()
    }

    pub fn input_flat(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.input_strides)
            .map(|(i, s)| i * s)
            .sum()
    }

    fn input_coord(&self, d: usize, i: usize) -> f64 {
        let v = self.input_box.lower()[d] + i as f64 * self.input_steps[d];
        v.min(self.input_box.upper()[d])
    }

    pub fn input_point(&self, input: usize) -> Vec<f64> {
        let multi = self.input_multi(input);
        (0..self.input_dim())
            .map(|d| self.input_coord(d, multi[d]))
            .collect()
    }

    /// Nearest lattice point to `u` after clamping to the input box; ties
    /// round toward the larger index (round half up).
    pub fn snap_input(&self, u: &[f64]) -> usize {
        debug_assert_eq!(u.len(), self.input_dim());
        let mut flat = 0usize;
        for d in 0..self.input_dim() {
            let clamped = u[d].clamp(self.input_box.lower()[d], self.input_box.upper()[d]);
            let t = (clamped - self.input_box.lower()[d]) / self.input_steps[d];
            let i = (t + 0.5).floor().max(0.0) as usize;
            flat += i.min(self.input_counts[d] - 1) * self.input_strides[d];
        }
        flat
    }

    // ---- transitions ----

    /// Per-dimension inclusive cell-index ranges of the cutoff window for
    /// `kernel`, or `None` when the window misses the state box entirely in
    /// some dimension. Deterministic dimensions reduce to the single cell
    /// containing the mean.
    pub fn window_ranges(&self, kernel: &GaussianKernel, cutoff: f64) -> Option<IndexWindow> {
        debug_assert!(cutoff > 0.0 && cutoff < 1.0);
        let n = self.state_dim();
        let q = normal_quantile(1.0 - cutoff / (2.0 * n as f64));
        let mut ranges = Vec::with_capacity(n);
        for d in 0..n {
            let r = kernel.sd(d) * q;
            let wlo = kernel.mean()[d] - r;
            let whi = kernel.mean()[d] + r;
            if whi < self.state_box.lower()[d] || wlo > self.state_box.upper()[d] {
                return None;
            }
            let lo_idx = self.quantize_dim(d, wlo).unwrap_or(0);
            let hi_idx = self
                .quantize_dim(d, whi)
                .unwrap_or(self.cells[d] - 1);
            ranges.push((lo_idx, hi_idx));
        }
        Some(ranges)
    }

    /// Flat indices of all cells intersecting the cutoff window.
    pub fn reachable_cells(&self, kernel: &GaussianKernel, cutoff: f64) -> Vec<usize> {
        let Some(ranges) = self.window_ranges(kernel, cutoff) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut idx: Vec<usize> = ranges.iter().map(|(lo, _)| *lo).collect();
        'outer: loop {
            out.push(self.cell_flat(&idx));
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] <= ranges[d].1 {
                    continue 'outer;
                }
                idx[d] = ranges[d].0;
            }
            break;
        }
        out
    }

    /// The transition row from `cell`'s representative under input `u`:
    /// per-dimension interval masses over the cutoff window, the exact goal
    /// mass for reach-avoid tasks, and the per-dimension goal overlap used
    /// to remove goal mass from window-cell entries (so entries of cells
    /// inside the goal are exactly zero and straddling cells keep only
    /// their non-goal part; mass is never counted twice).
    pub fn transition_row(
        &self,
        sys: &StochasticSystem,
        cell: usize,
        u: &[f64],
        cutoff: f64,
    ) -> Result<TransitionRow> {
        let rep = self.rep_point(cell);
        let kernel = sys.kernel_at(&rep, u)?;
        Ok(self.row_from_kernel(&kernel, cutoff))
    }

    /// Row construction from an explicit kernel; used by the simulator
    /// cross-checks and tests.
    pub fn row_from_kernel(&self, kernel: &GaussianKernel, cutoff: f64) -> TransitionRow {
        let goal = match self.task.kind() {
            SpecKind::ReachAvoid => self.task.goal(),
            SpecKind::Safety => None,
        };
        let goal_mass = goal.map(|g| kernel.box_mass(g)).unwrap_or(0.0);
        let Some(ranges) = self.window_ranges(kernel, cutoff) else {
            return TransitionRow {
                window: None,
                goal_mass,
            };
        };
        let n = self.state_dim();
        let mut lo = Vec::with_capacity(n);
        let mut mass = Vec::with_capacity(n);
        let mut overlap = goal.map(|_| Vec::with_capacity(n));
        for d in 0..n {
            let (lo_idx, hi_idx) = ranges[d];
            lo.push(lo_idx);
            let mut mass_d = Vec::with_capacity(hi_idx - lo_idx + 1);
            let mut overlap_d = goal.map(|_| Vec::with_capacity(hi_idx - lo_idx + 1));
            for i in lo_idx..=hi_idx {
                let (cl, cu) = self.cell_bounds(d, i);
                mass_d.push(normal_interval_mass_dim(kernel, d, cl, cu));
                if let (Some(o), Some(g)) = (overlap_d.as_mut(), goal) {
                    let gl = g.lower()[d].max(cl);
                    let gu = g.upper()[d].min(cu);
                    o.push(if gl < gu {
                        normal_interval_mass_dim(kernel, d, gl, gu)
                    } else {
                        0.0
                    });
                }
            }
            mass.push(mass_d);
            if let (Some(o), Some(od)) = (overlap.as_mut(), overlap_d) {
                o.push(od);
            }
        }
        TransitionRow {
            window: Some(RowWindow {
                lo,
                mass,
                goal_overlap: overlap,
            }),
            goal_mass,
        }
    }
}

fn normal_interval_mass_dim(kernel: &GaussianKernel, d: usize, lo: f64, hi: f64) -> f64 {
    crate::model::normal_interval_mass(kernel.mean()[d], kernel.sd(d), lo, hi)
}

fn strides_of(counts: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; counts.len()];
    for d in (0..counts.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * counts[d + 1];
    }
    strides
}

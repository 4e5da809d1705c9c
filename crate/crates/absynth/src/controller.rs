//! Control tasks and synthesized controller tables.
//!
//! A task is a bounded-horizon probabilistic objective over the working
//! domain: stay inside it (safety) or reach a goal box while avoiding an
//! obstacle box (reach-avoid). A synthesized controller is a dense table
//! mapping every (state cell, step) pair to a lattice input index together
//! with the value table of satisfaction probabilities.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::geom::HyperRect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SpecKind {
    Safety,
    ReachAvoid,
}

/// Bounded-horizon objective. The safe region is always the working domain
/// minus the optional obstacle box; reach-avoid additionally requires
/// entering the goal box within the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Specification {
    kind: SpecKind,
    horizon: usize,
    goal: Option<HyperRect>,
    obstacle: Option<HyperRect>,
}

impl Specification {
    pub fn safety(horizon: usize, obstacle: Option<HyperRect>) -> Result<Self> {
        let spec = Specification {
            kind: SpecKind::Safety,
            horizon,
            goal: None,
            obstacle,
        };
        spec.basic_checks()?;
        Ok(spec)
    }

    pub fn reach_avoid(horizon: usize, goal: HyperRect, obstacle: Option<HyperRect>) -> Result<Self> {
        let spec = Specification {
            kind: SpecKind::ReachAvoid,
            horizon,
            goal: Some(goal),
            obstacle,
        };
        spec.basic_checks()?;
        Ok(spec)
    }

    fn basic_checks(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        for (name, rect) in [("goal", &self.goal), ("obstacle", &self.obstacle)] {
            if let Some(r) = rect {
                if r.is_degenerate() {
                    return Err(Error::invalid(format!("{name} box is degenerate")));
                }
            }
        }
        if let (Some(g), Some(o)) = (&self.goal, &self.obstacle) {
            if g.overlaps(o, 0.0) {
                return Err(Error::invalid("goal and obstacle boxes overlap"));
            }
        }
        Ok(())
    }

    /// Checks region boxes against the working domain.
    pub fn validate_against(&self, state_box: &HyperRect) -> Result<()> {
        for (name, rect) in [("goal", &self.goal), ("obstacle", &self.obstacle)] {
            if let Some(r) = rect {
                if r.dim() != state_box.dim() {
                    return Err(Error::invalid(format!(
                        "{name} box dimension {} does not match state dimension {}",
                        r.dim(),
                        state_box.dim()
                    )));
                }
                if !r.contained_in(state_box, 1e-12) {
                    return Err(Error::invalid(format!(
                        "{name} box is not contained in the state box"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> SpecKind {
        self.kind
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn goal(&self) -> Option<&HyperRect> {
        self.goal.as_ref()
    }

    pub fn obstacle(&self) -> Option<&HyperRect> {
        self.obstacle.as_ref()
    }
}

/// Sentinel for "no input improves on the zero value" in the action table.
pub const NO_ACTION: u32 = u32::MAX;

/// Dense controller and value tables over (cell, step).
///
/// Layout: `actions[k * n_cells + cell]` for `k` in `0..horizon`,
/// `values[k * n_cells + cell]` for `k` in `0..=horizon`. Values are
/// probabilities of satisfying the objective when starting from the cell's
/// representative with `horizon - k` steps remaining.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerTable {
    kind: SpecKind,
    horizon: usize,
    n_cells: usize,
    n_inputs: usize,
    grid_digest: [u8; 32],
    actions: Vec<u32>,
    values: Vec<f64>,
}

impl ControllerTable {
    pub fn new(
        kind: SpecKind,
        horizon: usize,
        n_cells: usize,
        n_inputs: usize,
        grid_digest: [u8; 32],
        actions: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if actions.len() != horizon * n_cells {
            return Err(Error::invalid("action table has wrong length"));
        }
        if values.len() != (horizon + 1) * n_cells {
            return Err(Error::invalid("value table has wrong length"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("values outside [0, 1]"));
        }
        if actions
            .iter()
            .any(|a| *a != NO_ACTION && *a as usize >= n_inputs)
        {
            return Err(Error::invalid("action index out of range"));
        }
        Ok(ControllerTable {
            kind,
            horizon,
            n_cells,
            n_inputs,
            grid_digest,
            actions,
            values,
        })
    }

    pub fn kind(&self) -> SpecKind {
        self.kind
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn grid_digest(&self) -> &[u8; 32] {
        &self.grid_digest
    }

    /// Input lattice index chosen at `(cell, k)`, if any.
    pub fn action(&self, cell: usize, k: usize) -> Option<usize> {
        debug_assert!(k < self.horizon && cell < self.n_cells);
        match self.actions[k * self.n_cells + cell] {
            NO_ACTION => None,
            a => Some(a as usize),
        }
    }

    pub fn value(&self, cell: usize, k: usize) -> f64 {
        debug_assert!(k <= self.horizon && cell < self.n_cells);
        self.values[k * self.n_cells + cell]
    }

    pub fn actions_raw(&self) -> &[u32] {
        &self.actions
    }

    pub fn values_raw(&self) -> &[f64] {
        &self.values
    }

    /// Average satisfaction probability at step 0 over all cells, goal and
    /// obstacle cells included (they contribute 1 and 0 respectively).
    pub fn v_avg(&self) -> f64 {
        let sum: f64 = self.values[..self.n_cells].iter().sum();
        sum / self.n_cells as f64
    }

    const MAGIC: &'static [u8; 4] = b"ABSC";
    const VERSION: u8 = 1;

    /// Serializes to the little-endian binary controller format:
    /// magic, version, task kind, horizon, table sizes, grid digest, the
    /// dense action array, then the dense value array.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(Self::MAGIC)?;
        w.write_u8(Self::VERSION)?;
        w.write_u8(match self.kind {
            SpecKind::Safety => 0,
            SpecKind::ReachAvoid => 1,
        })?;
        w.write_u32::<LittleEndian>(self.horizon as u32)?;
        w.write_u64::<LittleEndian>(self.n_cells as u64)?;
        w.write_u64::<LittleEndian>(self.n_inputs as u64)?;
        w.write_all(&self.grid_digest)?;
        for a in &self.actions {
            w.write_u32::<LittleEndian>(*a)?;
        }
        for v in &self.values {
            w.write_f64::<LittleEndian>(*v)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::InvalidFormat {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        if r.read_u8()? != Self::VERSION {
            return Err(bad("unsupported version"));
        }
        let kind = match r.read_u8()? {
            0 => SpecKind::Safety,
            1 => SpecKind::ReachAvoid,
            _ => return Err(bad("unknown task kind")),
        };
        let horizon = r.read_u32::<LittleEndian>()? as usize;
        let n_cells = r.read_u64::<LittleEndian>()? as usize;
        let n_inputs = r.read_u64::<LittleEndian>()? as usize;
        if horizon == 0 || n_cells == 0 || horizon.saturating_mul(n_cells) > (1 << 33) {
            return Err(bad("implausible table sizes"));
        }
        let mut grid_digest = [0u8; 32];
        r.read_exact(&mut grid_digest)?;
        let mut actions = vec![0u32; horizon * n_cells];
        for a in actions.iter_mut() {
            *a = r.read_u32::<LittleEndian>()?;
        }
        let mut values = vec![0f64; (horizon + 1) * n_cells];
        for v in values.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        ControllerTable::new(kind, horizon, n_cells, n_inputs, grid_digest, actions, values)
            .map_err(|e| Error::InvalidFormat {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

pub fn digest_hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specification_validation() {
        let goal = HyperRect::new(vec![5.0, 5.0], vec![7.0, 7.0]).unwrap();
        let obst = HyperRect::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let spec = Specification::reach_avoid(16, goal.clone(), Some(obst.clone())).unwrap();
        let domain = HyperRect::new(vec![-10.0, -10.0], vec![10.0, 10.0]).unwrap();
        spec.validate_against(&domain).unwrap();

        let small = HyperRect::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert!(spec.validate_against(&small).is_err());
        assert!(Specification::reach_avoid(0, goal.clone(), None).is_err());
        let overlapping = HyperRect::new(vec![6.0, 6.0], vec![8.0, 8.0]).unwrap();
        assert!(Specification::reach_avoid(16, goal, Some(overlapping)).is_err());
        assert!(Specification::safety(8, Some(obst)).is_ok());
    }

    #[test]
    fn table_roundtrip_is_bitwise() {
        let n_cells = 6;
        let horizon = 3;
        let actions: Vec<u32> = (0..horizon * n_cells)
            .map(|i| if i % 5 == 0 { NO_ACTION } else { i as u32 % 4 })
            .collect();
        let values: Vec<f64> = (0..(horizon + 1) * n_cells)
            .map(|i| (i as f64 / 24.0).min(1.0))
            .collect();
        let table =
            ControllerTable::new(SpecKind::ReachAvoid, horizon, n_cells, 4, [7u8; 32], actions, values)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctrl.bin");
        table.save(&path).unwrap();
        let loaded = ControllerTable::load(&path).unwrap();
        assert_eq!(table, loaded);
        // Byte-identical on re-save.
        let path2 = dir.path().join("ctrl2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_corruption() {
        let table = ControllerTable::new(
            SpecKind::Safety,
            2,
            3,
            2,
            [0u8; 32],
            vec![0; 6],
            vec![0.5; 9],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctrl.bin");
        table.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ControllerTable::load(&path),
            Err(Error::InvalidFormat { .. })
        ));
    }

    #[test]
    fn v_avg_averages_step_zero_row() {
        let values = vec![1.0, 0.5, 0.0, /* k=1 */ 0.0, 0.0, 0.0];
        let table = ControllerTable::new(
            SpecKind::Safety,
            1,
            3,
            1,
            [0u8; 32],
            vec![0, NO_ACTION, 0],
            values,
        )
        .unwrap();
        assert!((table.v_avg() - 0.5).abs() < 1e-15);
    }
}

//! Labeled trajectory data: sequences of (state, step, input) pairs used
//! for imitation training, tagged with where they came from. Stored on
//! disk as CSV with one row per pair.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::HyperRect;

/// Where a dataset's pairs originate: recorded expert demonstrations, or
/// pairs read off a synthesized controller table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Expert,
    Lifted,
}

/// One labeled pair: at `state` on step `step`, the input `input` was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedPair {
    pub step: usize,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub pairs: Vec<TimedPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    state_dim: usize,
    input_dim: usize,
    provenance: Provenance,
    trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn new(state_dim: usize, input_dim: usize, provenance: Provenance) -> Self {
        TrajectoryDataset {
            state_dim,
            input_dim,
            provenance,
            trajectories: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn push(&mut self, traj: Trajectory) -> Result<()> {
        for pair in &traj.pairs {
            if pair.state.len() != self.state_dim || pair.input.len() != self.input_dim {
                return Err(Error::invalid(format!(
                    "pair dimensions ({}, {}) do not match dataset ({}, {})",
                    pair.state.len(),
                    pair.input.len(),
                    self.state_dim,
                    self.input_dim
                )));
            }
            if pair.state.iter().chain(&pair.input).any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite value in trajectory pair"));
            }
        }
        self.trajectories.push(traj);
        Ok(())
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.trajectories.iter().map(|t| t.pairs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_pairs() == 0
    }

    pub fn iter_pairs(&self) -> impl Iterator<Item = &TimedPair> {
        self.trajectories.iter().flat_map(|t| t.pairs.iter())
    }

    /// Checks every input lies in `input_box` (closed) and every step index
    /// is below `horizon`.
    pub fn check_bounds(&self, input_box: &HyperRect, horizon: usize) -> Result<()> {
        for (t, traj) in self.trajectories.iter().enumerate() {
            for pair in &traj.pairs {
                if pair.step >= horizon {
                    return Err(Error::invalid(format!(
                        "trajectory {t}: step {} outside horizon {horizon}",
                        pair.step
                    )));
                }
                if !input_box.contains(&pair.input) {
                    return Err(Error::invalid(format!(
                        "trajectory {t}: input {:?} outside the input box",
                        pair.input
                    )));
                }
            }
        }
        Ok(())
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["traj_id".to_string(), "k".to_string()];
        h.extend((1..=self.state_dim).map(|d| format!("x_{d}")));
        h.extend((1..=self.input_dim).map(|d| format!("u_{d}")));
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        for (t, traj) in self.trajectories.iter().enumerate() {
            for pair in &traj.pairs {
                let mut rec = vec![t.to_string(), pair.step.to_string()];
                rec.extend(pair.state.iter().map(|v| format_f64(*v)));
                rec.extend(pair.input.iter().map(|v| format_f64(*v)));
                w.write_record(rec)?;
            }
        }
        w.flush().map_err(Error::Io)?;
        Ok(())
    }

    /// Reads a dataset back; state and input dimensions are recovered from
    /// the `x_*`/`u_*` header columns.
    pub fn read_csv(path: &Path, provenance: Provenance) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        let state_dim = cols.iter().filter(|c| c.starts_with("x_")).count();
        let input_dim = cols.iter().filter(|c| c.starts_with("u_")).count();
        let expected: Vec<String> = {
            let mut h = vec!["traj_id".to_string(), "k".to_string()];
            h.extend((1..=state_dim).map(|d| format!("x_{d}")));
            h.extend((1..=input_dim).map(|d| format!("u_{d}")));
            h
        };
        if cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::InvalidFormat {
                path: path.to_path_buf(),
                reason: format!("unexpected header {cols:?}"),
            });
        }

        let mut ds = TrajectoryDataset::new(state_dim, input_dim, provenance);
        let mut current: Option<(u64, Trajectory)> = None;
        for record in r.records() {
            let record = record?;
            let bad = |reason: String| Error::InvalidFormat {
                path: path.to_path_buf(),
                reason,
            };
            let field = |i: usize| -> Result<f64> {
                record
                    .get(i)
                    .ok_or_else(|| bad(format!("short row {record:?}")))?
                    .parse::<f64>()
                    .map_err(|e| bad(format!("bad number in {record:?}: {e}")))
            };
            let id: u64 = record
                .get(0)
                .ok_or_else(|| bad("missing traj_id".into()))?
                .parse()
                .map_err(|e| bad(format!("bad traj_id: {e}")))?;
            let step: usize = record
                .get(1)
                .ok_or_else(|| bad("missing k".into()))?
                .parse()
                .map_err(|e| bad(format!("bad step: {e}")))?;
            let state: Vec<f64> = (0..state_dim)
                .map(|d| field(2 + d))
                .collect::<Result<_>>()?;
            let input: Vec<f64> = (0..input_dim)
                .map(|d| field(2 + state_dim + d))
                .collect::<Result<_>>()?;
            let pair = TimedPair { step, state, input };
            match &mut current {
                Some((cid, traj)) if *cid == id => traj.pairs.push(pair),
                _ => {
                    if let Some((_, traj)) = current.take() {
                        ds.push(traj)?;
                    }
                    current = Some((id, Trajectory { pairs: vec![pair] }));
                }
            }
        }
        if let Some((_, traj)) = current.take() {
            ds.push(traj)?;
        }
        Ok(ds)
    }
}

/// Shortest representation that parses back to the identical value.
fn format_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_dataset() -> TrajectoryDataset {
        let mut ds = TrajectoryDataset::new(2, 2, Provenance::Expert);
        ds.push(Trajectory {
            pairs: vec![
                TimedPair {
                    step: 0,
                    state: vec![0.1, -0.2],
                    input: vec![0.5, -1.0],
                },
                TimedPair {
                    step: 1,
                    state: vec![0.30000000000000004, 2.0 / 3.0],
                    input: vec![-0.1, 0.9],
                },
            ],
        })
        .unwrap();
        ds.push(Trajectory {
            pairs: vec![TimedPair {
                step: 3,
                state: vec![-5.0, 1e-17],
                input: vec![1.0, 1.0],
            }],
        })
        .unwrap();
        ds
    }

    #[test]
    fn counting_and_iteration() {
        let ds = sample_dataset();
        assert_eq!(ds.n_trajectories(), 2);
        assert_eq!(ds.n_pairs(), 3);
        assert!(!ds.is_empty());
        let steps: Vec<usize> = ds.iter_pairs().map(|p| p.step).collect();
        assert_eq!(steps, vec![0, 1, 3]);
    }

    #[test]
    fn csv_roundtrip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        let ds = sample_dataset();
        ds.write_csv(&p1).unwrap();
        let back = TrajectoryDataset::read_csv(&p1, Provenance::Expert).unwrap();
        assert_eq!(back, ds);
        back.write_csv(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.starts_with("traj_id,k,x_1,x_2,u_1,u_2\n"));
    }

    #[test]
    fn read_rejects_mismatched_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "traj,k,x_1,u_1\n0,0,1.0,0.5\n").unwrap();
        assert!(TrajectoryDataset::read_csv(&p, Provenance::Expert).is_err());
        std::fs::write(&p, "traj_id,k,x_1,u_1\n0,0,1.0,oops\n").unwrap();
        assert!(TrajectoryDataset::read_csv(&p, Provenance::Expert).is_err());
    }

    #[test]
    fn bounds_checking() {
        let ds = sample_dataset();
        let unit = HyperRect::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert!(ds.check_bounds(&unit, 16).is_ok());
        assert!(ds.check_bounds(&unit, 3).is_err());
        // Excludes the (1.0, 1.0) input of the second trajectory.
        let tight = HyperRect::new(vec![-1.0, -1.0], vec![0.9, 1.0]).unwrap();
        assert!(ds.check_bounds(&tight, 16).is_err());
    }

    #[test]
    fn push_validates_dimensions_and_finiteness() {
        let mut ds = TrajectoryDataset::new(2, 1, Provenance::Lifted);
        let bad_dims = Trajectory {
            pairs: vec![TimedPair {
                step: 0,
                state: vec![0.0],
                input: vec![0.0],
            }],
        };
        assert!(ds.push(bad_dims).is_err());
        let bad_value = Trajectory {
            pairs: vec![TimedPair {
                step: 0,
                state: vec![0.0, f64::NAN],
                input: vec![0.0],
            }],
        };
        assert!(ds.push(bad_value).is_err());
        assert!(ds.is_empty());
    }

    #[test]
    fn empty_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        let ds = TrajectoryDataset::new(3, 2, Provenance::Lifted);
        ds.write_csv(&p).unwrap();
        let back = TrajectoryDataset::read_csv(&p, Provenance::Lifted).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.state_dim(), 3);
        assert_eq!(back.input_dim(), 2);
    }
}

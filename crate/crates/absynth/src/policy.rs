//! The guidance policy: a small MLP mapping (state, step) to a continuous
//! input vector. States are normalized to [-1,1] per dimension and the
//! step index to [0,1] before entering the network; the output is squashed
//! through tanh and rescaled into the input box, so the policy can never
//! emit an infeasible input. Training is plain mini-batch Adam on squared
//! error, written out by hand so the gradient path is fully inspectable
//! and checkable against finite differences.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use crate::controller::ControllerTable;
use crate::dataset::{Provenance, TimedPair, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::geom::HyperRect;
use crate::grid::GridAbstraction;
use crate::rng::{derive_seed, make_rng};

const WEIGHTS_MAGIC: &[u8; 4] = b"ABSN";
const WEIGHTS_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    rows: usize,
    cols: usize,
    /// Row-major `rows x cols` weight matrix.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer {
            rows,
            cols,
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
        }
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.cols);
        out.clear();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

/// Training hyperparameters. Defaults: batch 32, learning rate 1e-3,
/// moment decays (0.9, 0.999), epsilon 1e-8.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Provenance written to the weights metadata sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct NetMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    state_box: HyperRect,
    input_box: HyperRect,
    horizon: usize,
    sizes: Vec<usize>,
    layers: Vec<Layer>,
    meta: NetMeta,
}

impl PolicyNetwork {
    /// A fresh network with scaled-uniform weights: each layer's weights
    /// are drawn from U(-a, a) with a = sqrt(6 / (fan_in + fan_out)),
    /// biases zero. Reproducible from the seed.
    pub fn init(
        state_box: &HyperRect,
        input_box: &HyperRect,
        horizon: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::invalid("hidden layer sizes must be >= 1"));
        }
        let mut sizes = vec![state_box.dim() + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(input_box.dim());

        let mut rng = make_rng(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (cols, rows) = (sizes[l], sizes[l + 1]);
            let a = (6.0 / (cols + rows) as f64).sqrt();
            let mut layer = Layer::zeros(rows, cols);
            for w in layer.w.iter_mut() {
                *w = rng.random_range(-a..a);
            }
            layers.push(layer);
        }
        Ok(PolicyNetwork {
            state_box: state_box.clone(),
            input_box: input_box.clone(),
            horizon,
            sizes,
            layers,
            meta: NetMeta {
                seed,
                epochs: 0,
                final_mse: None,
            },
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_box.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.input_box.dim()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn meta(&self) -> &NetMeta {
        &self.meta
    }

    pub fn state_box(&self) -> &HyperRect {
        &self.state_box
    }

    pub fn input_box(&self) -> &HyperRect {
        &self.input_box
    }

    fn features(&self, x: &[f64], k: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.state_dim());
        let mut f = Vec::with_capacity(self.state_dim() + 1);
        for d in 0..self.state_dim() {
            let lo = self.state_box.lower()[d];
            let w = self.state_box.width(d);
            f.push(2.0 * (x[d] - lo) / w - 1.0);
        }
        f.push(k as f64 / self.horizon as f64);
        f
    }

    /// Maps tanh outputs in [-1,1] onto the input box.
    fn rescale(&self, squashed: &[f64]) -> Vec<f64> {
        squashed
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let lo = self.input_box.lower()[j];
                let hi = self.input_box.upper()[j];
                lo + (t + 1.0) * 0.5 * (hi - lo)
            })
            .collect()
    }

    /// Evaluates the policy. The result lies inside the input box for any
    /// finite state, including states far outside the state box.
    pub fn forward(&self, x: &[f64], k: usize) -> Vec<f64> {
        let mut a = self.features(x, k);
        let mut next = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&a, &mut next);
            if l + 1 < self.layers.len() {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            } else {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            std::mem::swap(&mut a, &mut next);
        }
        self.rescale(&a)
    }

    /// Forward pass keeping every layer's post-activation (features first,
    /// tanh-squashed values last), for training.
    fn forward_trace(&self, x: &[f64], k: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.features(x, k));
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.affine(acts.last().unwrap(), &mut z);
            if l + 1 < self.layers.len() {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            } else {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
            }
            acts.push(z);
        }
        let out = self.rescale(acts.last().unwrap());
        (acts, out)
    }

    /// Squared-error loss of one batch in raw input units:
    /// mean over pairs and output dimensions of (forward - u)^2.
    fn batch_loss(&self, pairs: &[&TimedPair]) -> f64 {
        let m = self.input_dim() as f64;
        let mut acc = 0.0;
        for p in pairs {
            let out = self.forward(&p.state, p.step);
            acc += out
                .iter()
                .zip(&p.input)
                .map(|(o, t)| (o - t) * (o - t))
                .sum::<f64>();
        }
        acc / (pairs.len() as f64 * m)
    }

    /// Accumulates the gradient of the batch loss into `grads`.
    fn accumulate_gradient(&self, pairs: &[&TimedPair], grads: &mut [Layer]) {
        let m = self.input_dim() as f64;
        let scale = 2.0 / (pairs.len() as f64 * m);
        for p in pairs {
            let (acts, out) = self.forward_trace(&p.state, p.step);
            // Delta at the last pre-activation: through the output
            // rescaling (slope width/2) and tanh (slope 1 - a^2, with a
            // the stored squashed activation).
            let last = acts.last().unwrap();
            let mut delta: Vec<f64> = (0..self.input_dim())
                .map(|j| {
                    let half_w = 0.5 * self.input_box.width(j);
                    scale * (out[j] - p.input[j]) * half_w * (1.0 - last[j] * last[j])
                })
                .collect();
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input = &acts[l];
                let g = &mut grads[l];
                for r in 0..layer.rows {
                    g.b[r] += delta[r];
                    let row = &mut g.w[r * layer.cols..(r + 1) * layer.cols];
                    for (c, gi) in row.iter_mut().enumerate() {
                        *gi += delta[r] * input[c];
                    }
                }
                if l > 0 {
                    // Push delta through this layer's weights and the ReLU
                    // gate of the layer below (stored activation > 0 iff
                    // its pre-activation was > 0).
                    let below = &acts[l];
                    let mut next_delta = vec![0.0; layer.cols];
                    for r in 0..layer.rows {
                        let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                        for (c, nd) in next_delta.iter_mut().enumerate() {
                            *nd += row[c] * delta[r];
                        }
                    }
                    for (c, nd) in next_delta.iter_mut().enumerate() {
                        if below[c] <= 0.0 {
                            *nd = 0.0;
                        }
                    }
                    delta = next_delta;
                }
            }
        }
    }

    /// Mini-batch Adam on the dataset. Returns the full-dataset MSE after
    /// each epoch; the last entry is the final MSE. Deterministic given
    /// the config seed (it fixes the per-epoch shuffle order).
    pub fn imitation_learn(
        &mut self,
        data: &TrajectoryDataset,
        cfg: &TrainConfig,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("imitation training".into()));
        }
        if data.state_dim() != self.state_dim() || data.input_dim() != self.input_dim() {
            return Err(Error::invalid(format!(
                "dataset dims ({}, {}) do not match network ({}, {})",
                data.state_dim(),
                data.input_dim(),
                self.state_dim(),
                self.input_dim()
            )));
        }
        if cfg.batch == 0 || cfg.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be >= 1"));
        }
        let pairs: Vec<&TimedPair> = data.iter_pairs().collect();

        let mut m: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer::zeros(l.rows, l.cols))
            .collect();
        let mut v = m.clone();
        let mut grads = m.clone();
        let mut t = 0u64;
        let mut log = Vec::with_capacity(cfg.epochs);

        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for epoch in 0..cfg.epochs {
            shuffle(&mut order, derive_seed(cfg.seed, epoch as u64));
            for chunk in order.chunks(cfg.batch) {
                let batch: Vec<&TimedPair> = chunk.iter().map(|i| pairs[*i]).collect();
                for g in grads.iter_mut() {
                    g.w.iter_mut().for_each(|x| *x = 0.0);
                    g.b.iter_mut().for_each(|x| *x = 0.0);
                }
                self.accumulate_gradient(&batch, &mut grads);
                t += 1;
                let bc1 = 1.0 - cfg.beta1.powi(t as i32);
                let bc2 = 1.0 - cfg.beta2.powi(t as i32);
                for l in 0..self.layers.len() {
                    adam_update(
                        &mut self.layers[l].w,
                        &grads[l].w,
                        &mut m[l].w,
                        &mut v[l].w,
                        cfg,
                        bc1,
                        bc2,
                    );
                    adam_update(
                        &mut self.layers[l].b,
                        &grads[l].b,
                        &mut m[l].b,
                        &mut v[l].b,
                        cfg,
                        bc1,
                        bc2,
                    );
                }
            }
            let mse = self.batch_loss(&pairs);
            if !mse.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss: mse });
            }
            log.push(mse);
        }
        self.meta.epochs += cfg.epochs;
        self.meta.final_mse = log.last().copied();
        Ok(log)
    }

    /// Full-dataset MSE in raw input units without touching the weights.
    pub fn evaluate_mse(&self, data: &TrajectoryDataset) -> f64 {
        let pairs: Vec<&TimedPair> = data.iter_pairs().collect();
        if pairs.is_empty() {
            return 0.0;
        }
        self.batch_loss(&pairs)
    }

    /// Compares the backpropagated gradient of the single-pair loss
    /// against central finite differences (h = 1e-5) over every parameter
    /// and returns the largest relative discrepancy.
    pub fn gradient_check(&self, pair: &TimedPair) -> f64 {
        let h = 1e-5;
        let pairs = [pair];
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer::zeros(l.rows, l.cols))
            .collect();
        self.accumulate_gradient(&pairs, &mut grads);

        let mut probe = self.clone();
        let mut worst = 0.0f64;
        for l in 0..self.layers.len() {
            for slot in 0..self.layers[l].w.len() + self.layers[l].b.len() {
                let (is_w, idx) = if slot < self.layers[l].w.len() {
                    (true, slot)
                } else {
                    (false, slot - self.layers[l].w.len())
                };
                let read = |net: &PolicyNetwork| {
                    if is_w {
                        net.layers[l].w[idx]
                    } else {
                        net.layers[l].b[idx]
                    }
                };
                let write = |net: &mut PolicyNetwork, v: f64| {
                    if is_w {
                        net.layers[l].w[idx] = v;
                    } else {
                        net.layers[l].b[idx] = v;
                    }
                };
                let orig = read(self);
                write(&mut probe, orig + h);
                let up = probe.batch_loss(&pairs);
                write(&mut probe, orig - h);
                let down = probe.batch_loss(&pairs);
                write(&mut probe, orig);
                let fd = (up - down) / (2.0 * h);
                let bp = if is_w { grads[l].w[idx] } else { grads[l].b[idx] };
                let rel = (bp - fd).abs() / (bp.abs() + fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    // ---- persistence ----

    fn meta_path(path: &Path) -> PathBuf {
        let mut os = path.as_os_str().to_owned();
        os.push(".meta");
        PathBuf::from(os)
    }

    /// Writes the weights binary (header: layer sizes; body: row-major
    /// matrices followed by biases, little-endian f64) and a plain-text
    /// `.meta` sidecar holding the normalization constants, seed and
    /// epoch count.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_u8(WEIGHTS_VERSION)?;
        w.write_u32::<LittleEndian>(self.sizes.len() as u32)?;
        for s in &self.sizes {
            w.write_u32::<LittleEndian>(*s as u32)?;
        }
        for layer in &self.layers {
            for v in layer.w.iter().chain(&layer.b) {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        w.flush()?;

        let mut meta = String::new();
        meta.push_str("format = absynth-policy-meta-v1\n");
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        meta.push_str(&format!("state_lower = {}\n", join(self.state_box.lower())));
        meta.push_str(&format!("state_upper = {}\n", join(self.state_box.upper())));
        meta.push_str(&format!("input_lower = {}\n", join(self.input_box.lower())));
        meta.push_str(&format!("input_upper = {}\n", join(self.input_box.upper())));
        meta.push_str(&format!("horizon = {}\n", self.horizon));
        meta.push_str(&format!("seed = {}\n", self.meta.seed));
        meta.push_str(&format!("epochs = {}\n", self.meta.epochs));
        if let Some(mse) = self.meta.final_mse {
            meta.push_str(&format!("final_mse = {mse}\n"));
        }
        std::fs::write(Self::meta_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::InvalidFormat {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = r.read_u8()?;
        if version != WEIGHTS_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n_sizes = r.read_u32::<LittleEndian>()? as usize;
        if !(2..=16).contains(&n_sizes) {
            return Err(bad(format!("implausible layer count {n_sizes}")));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            let s = r.read_u32::<LittleEndian>()? as usize;
            if s == 0 || s > 1 << 16 {
                return Err(bad(format!("implausible layer size {s}")));
            }
            sizes.push(s);
        }
        let mut layers = Vec::with_capacity(n_sizes - 1);
        for l in 0..n_sizes - 1 {
            let mut layer = Layer::zeros(sizes[l + 1], sizes[l]);
            for slot in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                *slot = r.read_f64::<LittleEndian>()?;
            }
            layers.push(layer);
        }
        let mut trailing = Vec::new();
        r.read_to_end(&mut trailing)?;
        if !trailing.is_empty() {
            return Err(bad(format!("{} trailing bytes", trailing.len())));
        }

        let meta_path = Self::meta_path(path);
        let text = std::fs::read_to_string(&meta_path)?;
        let meta_bad = |reason: String| Error::InvalidFormat {
            path: meta_path.clone(),
            reason,
        };
        let mut fields = std::collections::HashMap::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| meta_bad(format!("bad line '{line}'")))?;
            fields.insert(key.trim().to_string(), value.trim().to_string());
        }
        let get = |key: &str| {
            fields
                .get(key)
                .ok_or_else(|| meta_bad(format!("missing key '{key}'")))
        };
        if get("format")? != "absynth-policy-meta-v1" {
            return Err(meta_bad(format!("unknown format '{}'", get("format")?)));
        }
        let vector = |key: &str| -> Result<Vec<f64>> {
            get(key)?
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|e| meta_bad(format!("bad number in '{key}': {e}")))
                })
                .collect()
        };
        let state_box = HyperRect::bounded(vector("state_lower")?, vector("state_upper")?)?;
        let input_box = HyperRect::bounded(vector("input_lower")?, vector("input_upper")?)?;
        let horizon: usize = get("horizon")?
            .parse()
            .map_err(|e| meta_bad(format!("bad horizon: {e}")))?;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|e| meta_bad(format!("bad seed: {e}")))?;
        let epochs: usize = get("epochs")?
            .parse()
            .map_err(|e| meta_bad(format!("bad epochs: {e}")))?;
        let final_mse = match fields.get("final_mse") {
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|e| meta_bad(format!("bad final_mse: {e}")))?,
            ),
            None => None,
        };

        if sizes[0] != state_box.dim() + 1 || sizes[n_sizes - 1] != input_box.dim() {
            return Err(meta_bad(format!(
                "layer sizes {sizes:?} do not match boxes ({} states, {} inputs)",
                state_box.dim(),
                input_box.dim()
            )));
        }
        if horizon == 0 {
            return Err(meta_bad("horizon must be >= 1".into()));
        }
        Ok(PolicyNetwork {
            state_box,
            input_box,
            horizon,
            sizes,
            layers,
            meta: NetMeta {
                seed,
                epochs,
                final_mse,
            },
        })
    }

    #[cfg(test)]
    fn zero_weights(&mut self) {
        for layer in self.layers.iter_mut() {
            layer.w.iter_mut().for_each(|w| *w = 0.0);
            layer.b.iter_mut().for_each(|b| *b = 0.0);
        }
    }
}

fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &TrainConfig,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        theta[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
}

/// Fisher-Yates with its own derived stream, so shuffle order depends only
/// on the passed seed.
fn shuffle(order: &mut [usize], seed: u64) {
    let mut rng = make_rng(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Reads the controller table off the grid as supervised pairs: one
/// (representative point, k, chosen input point) per free cell and step
/// with a defined action. One trajectory per cell.
pub fn controller_to_dataset(
    table: &ControllerTable,
    grid: &GridAbstraction,
) -> Result<TrajectoryDataset> {
    if table.n_cells() != grid.n_cells() || table.n_inputs() != grid.n_inputs() {
        return Err(Error::invalid(
            "controller table does not match the grid shape",
        ));
    }
    let mut ds = TrajectoryDataset::new(grid.state_dim(), grid.input_dim(), Provenance::Lifted);
    for &cell in grid.free_cells() {
        let rep = grid.rep_point(cell);
        let mut traj = Trajectory::default();
        for k in 0..table.horizon() {
            if let Some(action) = table.action(cell, k) {
                traj.pairs.push(TimedPair {
                    step: k,
                    state: rep.clone(),
                    input: grid.input_point(action),
                });
            }
        }
        if !traj.pairs.is_empty() {
            ds.push(traj)?;
        }
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset(
            "controller has no actions to lift".into(),
        ));
    }
    Ok(ds)
}

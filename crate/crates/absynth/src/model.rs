//! System descriptions and their one-step transition kernels.
//!
//! A system is `x_{k+1} = f(x_k, u_k) + g(x_k, u_k) + noise` with `f` a
//! known nominal map, `g` an unknown residual learned by Gaussian-process
//! regression, and independent zero-mean Gaussian noise per dimension. For
//! a fixed `(x, u)` the next state is then Gaussian with diagonal
//! covariance, so the probability of landing in any axis-aligned box is an
//! exact product of one-dimensional normal CDF differences. All abstraction
//! probabilities in this crate are computed that way; nothing is sampled.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geom::HyperRect;
use crate::gp::ModelErrorGp;

/// Mass of the closed interval `[lo, hi]` under `N(mean, sd^2)`.
///
/// `sd = 0` degenerates to a point mass: the indicator of `mean` lying in
/// the closed interval. Infinite endpoints are allowed. The tails are
/// evaluated through `erfc` on the side away from the mean so that masses
/// far from the mean keep full relative precision.
pub fn normal_interval_mass(mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    debug_assert!(sd >= 0.0);
    if lo >= hi {
        return 0.0;
    }
    if sd == 0.0 {
        return if lo <= mean && mean <= hi { 1.0 } else { 0.0 };
    }
    // Standardized bounds; infinities propagate correctly through erfc.
    let za = (lo - mean) / sd;
    let zb = (hi - mean) / sd;
    const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
    let mass = if za >= 0.0 {
        // Right tail: Phi(zb) - Phi(za) = (erfc(za/s2) - erfc(zb/s2)) / 2.
        0.5 * (erfc_ext(za * FRAC_1_SQRT_2) - erfc_ext(zb * FRAC_1_SQRT_2))
    } else if zb <= 0.0 {
        // Left tail, by symmetry.
        0.5 * (erfc_ext(-zb * FRAC_1_SQRT_2) - erfc_ext(-za * FRAC_1_SQRT_2))
    } else {
        // Interval straddles the mean; both erfc arguments are >= 0.
        1.0 - 0.5 * (erfc_ext(zb * FRAC_1_SQRT_2) + erfc_ext(-za * FRAC_1_SQRT_2))
    };
    mass.clamp(0.0, 1.0)
}

fn erfc_ext(z: f64) -> f64 {
    if z == f64::INFINITY {
        0.0
    } else if z == f64::NEG_INFINITY {
        2.0
    } else {
        libm::erfc(z)
    }
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::ContinuousCDF;
    debug_assert!(p > 0.0 && p < 1.0);
    statrs::distribution::Normal::standard().inverse_cdf(p)
}

/// One-step next-state distribution for a fixed state/input pair:
/// an independent Gaussian per dimension, possibly degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() {
            return Err(Error::invalid("kernel mean/variance length mismatch"));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteModel("kernel mean".into()));
        }
        if var.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("kernel variances must be finite and >= 0"));
        }
        Ok(GaussianKernel { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn sd(&self, d: usize) -> f64 {
        self.var[d].sqrt()
    }

    /// Probability that the next state lands in `rect`. Exact up to CDF
    /// rounding; degenerate boxes return 0.
    pub fn box_mass(&self, rect: &HyperRect) -> f64 {
        debug_assert_eq!(rect.dim(), self.dim());
        let mut mass = 1.0;
        for d in 0..self.dim() {
            mass *= normal_interval_mass(self.mean[d], self.sd(d), rect.lower()[d], rect.upper()[d]);
            if mass == 0.0 {
                return 0.0;
            }
        }
        mass
    }
}

type NominalMap = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// A discrete-time stochastic system on a bounded working domain.
#[derive(Clone)]
pub struct StochasticSystem {
    state_box: HyperRect,
    input_box: HyperRect,
    nominal: NominalMap,
    model_error: ModelErrorGp,
    noise_var: Vec<f64>,
}

impl StochasticSystem {
    /// `noise_var` holds the diagonal of the additive-noise covariance.
    pub fn new(
        state_box: HyperRect,
        input_box: HyperRect,
        nominal: NominalMap,
        noise_var: Vec<f64>,
    ) -> Result<Self> {
        let n = state_box.dim();
        if noise_var.len() != n {
            return Err(Error::invalid(format!(
                "noise covariance diagonal has length {}, state dimension is {n}",
                noise_var.len()
            )));
        }
        if noise_var.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("noise variances must be finite and >= 0"));
        }
        // Domain boxes must be bounded and non-degenerate.
        let state_box = HyperRect::bounded(state_box.lower().to_vec(), state_box.upper().to_vec())?;
        let input_box = HyperRect::bounded(input_box.lower().to_vec(), input_box.upper().to_vec())?;
        Ok(StochasticSystem {
            state_box,
            input_box,
            nominal,
            model_error: ModelErrorGp::zero(n),
            noise_var,
        })
    }

    /// Replaces the model-error term; dimensions must agree.
    pub fn with_model_error(mut self, gp: ModelErrorGp) -> Result<Self> {
        if gp.output_dim() != self.state_dim() {
            return Err(Error::invalid(format!(
                "model-error output dimension {} does not match state dimension {}",
                gp.output_dim(),
                self.state_dim()
            )));
        }
        self.model_error = gp;
        Ok(self)
    }

    /// Linear-affine system `x' = A x + B u + c + noise`; `a` is row-major
    /// `n x n`, `b` row-major `n x m`.
    pub fn affine(
        state_box: HyperRect,
        input_box: HyperRect,
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<f64>,
        noise_var: Vec<f64>,
    ) -> Result<Self> {
        let n = state_box.dim();
        let m = input_box.dim();
        if a.len() != n || a.iter().any(|row| row.len() != n) {
            return Err(Error::invalid("matrix A must be n x n"));
        }
        if b.len() != n || b.iter().any(|row| row.len() != m) {
            return Err(Error::invalid("matrix B must be n x m"));
        }
        if c.len() != n {
            return Err(Error::invalid("offset c must have length n"));
        }
        let finite = |rows: &[Vec<f64>]| rows.iter().flatten().all(|v| v.is_finite());
        if !finite(&a) || !finite(&b) || !c.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("affine coefficients must be finite"));
        }
        let nominal: NominalMap = Arc::new(move |x: &[f64], u: &[f64]| {
            (0..x.len())
                .map(|i| {
                    let ax: f64 = a[i].iter().zip(x).map(|(aij, xj)| aij * xj).sum();
                    let bu: f64 = b[i].iter().zip(u).map(|(bij, uj)| bij * uj).sum();
                    ax + bu + c[i]
                })
                .collect()
        });
        StochasticSystem::new(state_box, input_box, nominal, noise_var)
    }

    pub fn state_dim(&self) -> usize {
        self.state_box.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.input_box.dim()
    }

    pub fn state_box(&self) -> &HyperRect {
        &self.state_box
    }

    pub fn input_box(&self) -> &HyperRect {
        &self.input_box
    }

    pub fn noise_var(&self) -> &[f64] {
        &self.noise_var
    }

    pub fn model_error(&self) -> &ModelErrorGp {
        &self.model_error
    }

    /// Nominal next state `f(x, u)` without residual or noise.
    pub fn nominal(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        (self.nominal)(x, u)
    }

    /// The Gaussian next-state kernel at `(x, u)`: mean is the nominal map
    /// plus the residual posterior mean, variance is the noise variance
    /// plus the residual posterior variance, per dimension.
    pub fn kernel_at(&self, x: &[f64], u: &[f64]) -> Result<GaussianKernel> {
        if x.len() != self.state_dim() {
            return Err(Error::invalid(format!(
                "state has dimension {}, expected {}",
                x.len(),
                self.state_dim()
            )));
        }
        if u.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has dimension {}, expected {}",
                u.len(),
                self.input_dim()
            )));
        }
        let mut mean = (self.nominal)(x, u);
        if mean.len() != self.state_dim() {
            return Err(Error::NonFiniteModel(format!(
                "nominal map returned dimension {}, expected {}",
                mean.len(),
                self.state_dim()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteModel(format!(
                "nominal map not finite at x={x:?}, u={u:?}"
            )));
        }
        let mut var = self.noise_var.clone();
        if !self.model_error.is_zero() {
            let posterior = self.model_error.posterior(x, u)?;
            for d in 0..mean.len() {
                mean[d] += posterior[d].0;
                var[d] += posterior[d].1;
            }
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteModel(format!(
                    "model-error posterior not finite at x={x:?}, u={u:?}"
                )));
            }
        }
        GaussianKernel::new(mean, var)
    }
}

impl std::fmt::Debug for StochasticSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StochasticSystem")
            .field("state_box", &self.state_box)
            .field("input_box", &self.input_box)
            .field("noise_var", &self.noise_var)
            .field("model_error", &self.model_error)
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_kernel(mean: Vec<f64>, var: Vec<f64>) -> GaussianKernel {
        GaussianKernel::new(mean, var).unwrap()
    }

    #[test]
    fn standard_normal_central_interval() {
        // One-dimensional N(0,1) over [-1, 1]: 2 Phi(1) - 1.
        let k = unit_kernel(vec![0.0], vec![1.0]);
        let rect = HyperRect::new(vec![-1.0], vec![1.0]).unwrap();
        assert_abs_diff_eq!(k.box_mass(&rect), 0.682_689_492_137_085_9, epsilon = 1e-12);
    }

    #[test]
    fn whole_space_and_degenerate_boxes() {
        let k = unit_kernel(vec![0.3, -2.0], vec![0.5, 4.0]);
        let all = HyperRect::new(
            vec![f64::NEG_INFINITY, f64::NEG_INFINITY],
            vec![f64::INFINITY, f64::INFINITY],
        )
        .unwrap();
        assert_abs_diff_eq!(k.box_mass(&all), 1.0, epsilon = 1e-14);
        let degenerate = HyperRect::new(vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(k.box_mass(&degenerate), 0.0);
    }

    #[test]
    fn deterministic_dims_are_indicators() {
        let k = unit_kernel(vec![0.5, 0.5], vec![0.0, 1.0]);
        let inside = HyperRect::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let outside = HyperRect::new(vec![0.6, -1.0], vec![1.0, 1.0]).unwrap();
        let expected = normal_interval_mass(0.5, 1.0, -1.0, 1.0);
        assert_abs_diff_eq!(k.box_mass(&inside), expected, epsilon = 1e-12);
        assert_eq!(k.box_mass(&outside), 0.0);
    }

    #[test]
    fn fully_deterministic_kernel_hits_goal_box() {
        let k = unit_kernel(vec![6.0, 6.0], vec![0.0, 0.0]);
        let goal = HyperRect::new(vec![5.0, 5.0], vec![7.0, 7.0]).unwrap();
        let miss = HyperRect::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        assert_eq!(k.box_mass(&goal), 1.0);
        assert_eq!(k.box_mass(&miss), 0.0);
    }

    #[test]
    fn far_tail_masses_keep_relative_precision() {
        let k = unit_kernel(vec![0.0], vec![1.0]);
        let tail = HyperRect::new(vec![8.0], vec![9.0]).unwrap();
        let m = k.box_mass(&tail);
        // Phi(9) - Phi(8) is about 6.2e-16; a naive CDF difference loses it.
        assert!(m > 5e-16 && m < 8e-16, "tail mass {m:e}");
    }

    #[test]
    fn affine_system_kernel() {
        let sys = StochasticSystem::affine(
            HyperRect::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
            HyperRect::new(vec![-1.0], vec![1.0]).unwrap(),
            vec![vec![0.5, 0.0], vec![0.0, 2.0]],
            vec![vec![1.0], vec![0.0]],
            vec![0.1, -0.1],
            vec![0.01, 0.04],
        )
        .unwrap();
        let k = sys.kernel_at(&[0.2, 0.4], &[0.5]).unwrap();
        assert_abs_diff_eq!(k.mean()[0], 0.5 * 0.2 + 0.5 + 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(k.mean()[1], 2.0 * 0.4 - 0.1, epsilon = 1e-15);
        assert_eq!(k.var(), &[0.01, 0.04]);
    }

    #[test]
    fn kernel_rejects_non_finite_nominal() {
        let nominal: super::NominalMap = Arc::new(|x: &[f64], _u: &[f64]| vec![x[0] / 0.0]);
        let sys = StochasticSystem::new(
            HyperRect::new(vec![-1.0], vec![1.0]).unwrap(),
            HyperRect::new(vec![-1.0], vec![1.0]).unwrap(),
            nominal,
            vec![1.0],
        )
        .unwrap();
        assert!(matches!(
            sys.kernel_at(&[1.0], &[0.0]),
            Err(Error::NonFiniteModel(_))
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn kernel_strategy() -> impl Strategy<Value = (f64, f64)> {
            // Mean in [-5, 5], sd in [0.05, 3].
            (-5.0..5.0f64, 0.05..3.0f64)
        }

        proptest! {
            // Splitting an interval at any point conserves mass.
            #[test]
            fn additivity_under_splits(
                (mean, sd) in kernel_strategy(),
                a in -10.0..10.0f64,
                len in 0.01..8.0f64,
                frac in 0.0..1.0f64,
            ) {
                let c = a + len;
                let b = a + len * frac;
                let whole = normal_interval_mass(mean, sd, a, c);
                let parts = normal_interval_mass(mean, sd, a, b)
                    + normal_interval_mass(mean, sd, b, c);
                prop_assert!((whole - parts).abs() < 1e-12, "whole {whole} parts {parts}");
            }

            // Translating kernel and box together leaves the mass unchanged.
            #[test]
            fn translation_equivariance(
                (mean, sd) in kernel_strategy(),
                a in -10.0..10.0f64,
                len in 0.01..8.0f64,
                shift in -50.0..50.0f64,
            ) {
                let m0 = normal_interval_mass(mean, sd, a, a + len);
                let m1 = normal_interval_mass(mean + shift, sd, a + shift, a + len + shift);
                prop_assert!((m0 - m1).abs() < 1e-12);
            }

            // Masses of two-dimensional boxes multiply across dimensions.
            #[test]
            fn product_structure(
                (m1, s1) in kernel_strategy(),
                (m2, s2) in kernel_strategy(),
                lo1 in -6.0..0.0f64, w1 in 0.1..6.0f64,
                lo2 in -6.0..0.0f64, w2 in 0.1..6.0f64,
            ) {
                let k = GaussianKernel::new(vec![m1, m2], vec![s1 * s1, s2 * s2]).unwrap();
                let rect = HyperRect::new(vec![lo1, lo2], vec![lo1 + w1, lo2 + w2]).unwrap();
                let expected = normal_interval_mass(m1, s1, lo1, lo1 + w1)
                    * normal_interval_mass(m2, s2, lo2, lo2 + w2);
                prop_assert!((k.box_mass(&rect) - expected).abs() < 1e-15);
            }
        }
    }
}

//! Gaussian-process regression for the unknown residual dynamics.
//!
//! One scalar GP per state dimension, all sharing a squared-exponential
//! kernel over the joint `(x, u)` vector with user-supplied hyperparameters;
//! no marginal-likelihood optimization is performed. Because the kernel and
//! training inputs are shared, the Gram factorization is computed once and
//! only the target weights differ per output dimension.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Squared-exponential kernel parameters over the joint input `z = (x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpHyperParams {
    pub signal_var: f64,
    /// One length-scale per joint-input dimension (`n + m` entries).
    pub length_scales: Vec<f64>,
    pub noise_var: f64,
}

impl GpHyperParams {
    fn validate(&self, joint_dim: usize) -> Result<()> {
        if self.length_scales.len() != joint_dim {
            return Err(Error::invalid(format!(
                "expected {joint_dim} length-scales, got {}",
                self.length_scales.len()
            )));
        }
        if self.length_scales.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return Err(Error::invalid("length-scales must be finite and > 0"));
        }
        if !self.signal_var.is_finite() || self.signal_var < 0.0 {
            return Err(Error::invalid("signal variance must be finite and >= 0"));
        }
        if !self.noise_var.is_finite() || self.noise_var <= 0.0 {
            return Err(Error::invalid("observation-noise variance must be finite and > 0"));
        }
        Ok(())
    }

    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for d in 0..a.len() {
            let t = (a[d] - b[d]) / self.length_scales[d];
            s += t * t;
        }
        self.signal_var * (-0.5 * s).exp()
    }
}

/// One observed residual: the joint input and the residual target for every
/// state dimension.
#[derive(Debug, Clone)]
pub struct GpSample {
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone)]
struct FittedGp {
    hyper: GpHyperParams,
    /// Joint training inputs, one row per sample.
    inputs: Vec<Vec<f64>>,
    /// Lower Cholesky factor of the noisy Gram matrix.
    chol_l: DMatrix<f64>,
    /// `K^-1 y` per output dimension.
    alphas: Vec<DVector<f64>>,
}

/// Residual model for every state dimension; the zero model predicts a zero
/// mean and zero variance everywhere.
#[derive(Debug, Clone)]
pub struct ModelErrorGp {
    output_dim: usize,
    fitted: Option<FittedGp>,
}

impl ModelErrorGp {
    pub fn zero(output_dim: usize) -> Self {
        ModelErrorGp {
            output_dim,
            fitted: None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.fitted.is_none()
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Posterior `(mean, variance)` of the residual at `(x, u)` for every
    /// state dimension. The variance is that of the latent residual and
    /// never exceeds the observation-noise variance at a training input.
    pub fn posterior(&self, x: &[f64], u: &[f64]) -> Result<Vec<(f64, f64)>> {
        let Some(fit) = &self.fitted else {
            return Ok(vec![(0.0, 0.0); self.output_dim]);
        };
        let z: Vec<f64> = x.iter().chain(u.iter()).copied().collect();
        if z.len() != fit.hyper.length_scales.len() {
            return Err(Error::invalid(format!(
                "query has joint dimension {}, trained on {}",
                z.len(),
                fit.hyper.length_scales.len()
            )));
        }
        let kstar = DVector::from_iterator(
            fit.inputs.len(),
            fit.inputs.iter().map(|zi| fit.hyper.kernel(zi, &z)),
        );
        let v = fit
            .chol_l
            .solve_lower_triangular(&kstar)
            .ok_or_else(|| Error::NonFiniteModel("triangular solve failed".into()))?;
        let var = (fit.hyper.signal_var - v.dot(&v)).max(0.0);
        let out = fit
            .alphas
            .iter()
            .map(|alpha| (kstar.dot(alpha), var))
            .collect::<Vec<_>>();
        if out.iter().any(|(m, s)| !m.is_finite() || !s.is_finite()) {
            return Err(Error::NonFiniteModel("GP posterior".into()));
        }
        Ok(out)
    }
}

/// Fits the residual model on observed samples. An empty sample list yields
/// the zero model. The Gram matrix is factorized by Cholesky; on failure a
/// diagonal jitter escalates from 1e-10 to 1e-6 before giving up.
pub fn gp_fit(
    samples: &[GpSample],
    state_dim: usize,
    input_dim: usize,
    hyper: &GpHyperParams,
) -> Result<ModelErrorGp> {
    let joint_dim = state_dim + input_dim;
    hyper.validate(joint_dim)?;
    if samples.is_empty() {
        return Ok(ModelErrorGp::zero(state_dim));
    }
    let mut inputs = Vec::with_capacity(samples.len());
    for s in samples {
        if s.state.len() != state_dim || s.input.len() != input_dim {
            return Err(Error::invalid("GP sample dimension mismatch"));
        }
        if s.residual.len() != state_dim {
            return Err(Error::invalid(format!(
                "GP sample residual has length {}, expected {state_dim}",
                s.residual.len()
            )));
        }
        let z: Vec<f64> = s.state.iter().chain(s.input.iter()).copied().collect();
        if z.iter().chain(s.residual.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("GP sample contains non-finite values"));
        }
        inputs.push(z);
    }

    let n = inputs.len();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        let k = hyper.kernel(&inputs[i], &inputs[j]);
        if i == j {
            k + hyper.noise_var
        } else {
            k
        }
    });

    let chol = cholesky_with_jitter(&gram)?;
    let chol_l = chol.l();
    let alphas = (0..state_dim)
        .map(|d| {
            let y = DVector::from_iterator(n, samples.iter().map(|s| s.residual[d]));
            chol.solve(&y)
        })
        .collect();

    Ok(ModelErrorGp {
        output_dim: state_dim,
        fitted: Some(FittedGp {
            hyper: hyper.clone(),
            inputs,
            chol_l,
            alphas,
        }),
    })
}

fn cholesky_with_jitter(gram: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = nalgebra::Cholesky::new(gram.clone()) {
        return Ok(c);
    }
    let mut jitter = 1e-10;
    while jitter <= 1e-6 {
        let mut jittered = gram.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(c) = nalgebra::Cholesky::new(jittered) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::GramFactorization { max_jitter: 1e-6 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(dims: usize) -> GpHyperParams {
        GpHyperParams {
            signal_var: 1.0,
            length_scales: vec![1.0; dims],
            noise_var: 1e-6,
        }
    }

    #[test]
    fn empty_sample_set_is_zero_model() {
        let gp = gp_fit(&[], 2, 1, &hyper(3)).unwrap();
        assert!(gp.is_zero());
        let post = gp.posterior(&[0.3, -0.1], &[0.5]).unwrap();
        assert_eq!(post, vec![(0.0, 0.0), (0.0, 0.0)]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut h = hyper(2);
        h.length_scales[1] = 0.0;
        assert!(gp_fit(&[], 1, 1, &h).is_err());
        let mut h = hyper(2);
        h.noise_var = 0.0;
        assert!(gp_fit(&[], 1, 1, &h).is_err());
        let h = hyper(3);
        assert!(gp_fit(&[], 1, 1, &h).is_err());
    }

    #[test]
    fn single_sample_posterior_mean_matches_target() {
        let sample = GpSample {
            state: vec![0.2],
            input: vec![-0.4],
            residual: vec![0.37],
        };
        let mut h = hyper(2);
        h.noise_var = 1e-9;
        let gp = gp_fit(std::slice::from_ref(&sample), 1, 1, &h).unwrap();
        let post = gp.posterior(&[0.2], &[-0.4]).unwrap();
        assert!((post[0].0 - 0.37).abs() < 1e-6, "mean {}", post[0].0);
    }

    #[test]
    fn interpolates_training_targets_within_noise_scale() {
        let mut samples = Vec::new();
        for i in 0..15 {
            let x = -1.0 + 2.0 * (i as f64) / 14.0;
            samples.push(GpSample {
                state: vec![x],
                input: vec![0.5 * x],
                residual: vec![(2.0 * x).cos() * 0.3],
            });
        }
        let mut h = hyper(2);
        h.noise_var = 1e-4;
        let gp = gp_fit(&samples, 1, 1, &h).unwrap();
        for s in &samples {
            let post = gp.posterior(&s.state, &s.input).unwrap();
            let err = (post[0].0 - s.residual[0]).abs();
            assert!(err < 3.0 * h.noise_var.sqrt(), "error {err}");
            assert!(post[0].1 <= h.noise_var + 1e-9, "variance {}", post[0].1);
        }
    }

    // Oracle: the residual is a known function; the posterior must track it
    // within two posterior standard deviations on a held-out grid.
    #[test]
    fn recovers_known_residual_function() {
        let g = |x: f64| 0.1 * x.sin();
        let mut samples = Vec::new();
        for i in 0..20 {
            let x = -3.0 + 6.0 * (i as f64) / 19.0;
            let u = if i % 2 == 0 { -0.5 } else { 0.5 };
            samples.push(GpSample {
                state: vec![x],
                input: vec![u],
                residual: vec![g(x)],
            });
        }
        let h = GpHyperParams {
            signal_var: 0.05,
            length_scales: vec![1.2, 5.0],
            noise_var: 1e-6,
        };
        let gp = gp_fit(&samples, 1, 1, &h).unwrap();
        for i in 0..40 {
            let x = -2.9 + 5.8 * (i as f64) / 39.0;
            let post = gp.posterior(&[x], &[0.0]).unwrap();
            let (mean, var) = post[0];
            let sd = var.sqrt();
            let err = (mean - g(x)).abs();
            assert!(
                err <= 2.0 * sd + 1e-4,
                "x={x}: |{mean} - {}| = {err}, 2sd = {}",
                g(x),
                2.0 * sd
            );
        }
    }

    #[test]
    fn duplicate_inputs_survive_via_jitter() {
        let s = GpSample {
            state: vec![0.1, 0.2],
            input: vec![0.0],
            residual: vec![0.5, -0.5],
        };
        let samples = vec![s.clone(), s.clone(), s];
        let mut h = hyper(3);
        h.noise_var = 1e-14;
        // The Gram matrix is numerically rank one; jitter must rescue it.
        let gp = gp_fit(&samples, 2, 1, &h).unwrap();
        let post = gp.posterior(&[0.1, 0.2], &[0.0]).unwrap();
        assert!((post[0].0 - 0.5).abs() < 1e-3);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            // The latent posterior variance at a training input never
            // exceeds the observation-noise variance.
            #[test]
            fn training_variance_bounded_by_noise(
                xs in proptest::collection::vec((-2.0..2.0f64, -1.0..1.0f64), 1..12),
                noise_exp in -6.0..-1.0f64,
                signal in 0.1..4.0f64,
            ) {
                let noise_var = 10.0f64.powf(noise_exp);
                let samples: Vec<GpSample> = xs
                    .iter()
                    .map(|(x, u)| GpSample {
                        state: vec![*x],
                        input: vec![*u],
                        residual: vec![x * u],
                    })
                    .collect();
                let h = GpHyperParams {
                    signal_var: signal,
                    length_scales: vec![0.7, 0.9],
                    noise_var,
                };
                let gp = gp_fit(&samples, 1, 1, &h).unwrap();
                for s in &samples {
                    let post = gp.posterior(&s.state, &s.input).unwrap();
                    prop_assert!(post[0].1 <= noise_var + 1e-9,
                        "variance {} > noise {noise_var}", post[0].1);
                }
            }
        }
    }
}

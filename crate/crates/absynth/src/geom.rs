//! Axis-aligned hyper-rectangles. The closed box is the common currency of
//! the crate: system domains, goal and obstacle regions, grid cells and
//! integration windows are all `HyperRect`s.

use crate::error::{Error, Result};

/// Closed axis-aligned box `[lower_1, upper_1] x ... x [lower_n, upper_n]`.
///
/// Bounds may be infinite (integration over half-spaces or the whole space)
/// but never NaN. A box may be degenerate (`lower >= upper` in some
/// dimension); degenerate boxes carry no probability mass.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperRect {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl HyperRect {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::invalid(format!(
                "box bounds of different lengths: {} vs {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.is_empty() {
            return Err(Error::invalid("zero-dimensional box"));
        }
        if lower.iter().chain(upper.iter()).any(|v| v.is_nan()) {
            return Err(Error::invalid("NaN box bound"));
        }
        Ok(HyperRect { lower, upper })
    }

    /// A box required to have finite, strictly ordered bounds, as for system
    /// state and input domains.
    pub fn bounded(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let rect = Self::new(lower, upper)?;
        for d in 0..rect.dim() {
            if !rect.lower[d].is_finite() || !rect.upper[d].is_finite() {
                return Err(Error::invalid("domain box must have finite bounds"));
            }
            if rect.lower[d] >= rect.upper[d] {
                return Err(Error::invalid(format!(
                    "domain box degenerate in dimension {d}: [{}, {}]",
                    rect.lower[d], rect.upper[d]
                )));
            }
        }
        Ok(rect)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, d: usize) -> f64 {
        self.upper[d] - self.lower[d]
    }

    pub fn center(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|d| 0.5 * (self.lower[d] + self.upper[d]))
            .collect()
    }

    pub fn is_degenerate(&self) -> bool {
        (0..self.dim()).any(|d| self.lower[d] >= self.upper[d])
    }

    /// Closed-box membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        debug_assert_eq!(x.len(), self.dim());
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Intersection; `None` when empty in some dimension.
    pub fn intersect(&self, other: &HyperRect) -> Option<HyperRect> {
        debug_assert_eq!(self.dim(), other.dim());
        let lower: Vec<f64> = (0..self.dim())
            .map(|d| self.lower[d].max(other.lower[d]))
            .collect();
        let upper: Vec<f64> = (0..self.dim())
            .map(|d| self.upper[d].min(other.upper[d]))
            .collect();
        if lower.iter().zip(&upper).any(|(l, u)| l >= u) {
            return None;
        }
        Some(HyperRect { lower, upper })
    }

    /// True when `self` is contained in `other` up to `tol` per bound.
    pub fn contained_in(&self, other: &HyperRect, tol: f64) -> bool {
        debug_assert_eq!(self.dim(), other.dim());
        (0..self.dim()).all(|d| {
            self.lower[d] >= other.lower[d] - tol && self.upper[d] <= other.upper[d] + tol
        })
    }

    /// True when the intersection has positive volume (tolerance `tol`).
    pub fn overlaps(&self, other: &HyperRect, tol: f64) -> bool {
        debug_assert_eq!(self.dim(), other.dim());
        (0..self.dim()).all(|d| {
            self.lower[d].max(other.lower[d]) + tol < self.upper[d].min(other.upper[d])
        })
    }

    /// Euclidean projection onto the box; requires finite bounds.
    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim());
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect()
    }
}

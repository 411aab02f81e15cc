//! Spectral Galerkin truncation of the spatial operator.
//!
//! The state space `X` is truncated to the span of the first `N` eigenmodes
//! of a diagonal operator `A`. The default instance is the Dirichlet
//! Laplacian on `(0, pi)` with eigenvalues `lambda_k = -k^2` and orthonormal
//! eigenfunctions `sqrt(2/pi) sin(k x)`. States are stored as modal
//! coefficient vectors; pointwise nonlinearities go through an explicit
//! collocation transform (discrete sine matrix), which is exact for modes up
//! to `N` and makes the modal Euclidean norm equal the quadrature-weighted
//! collocation norm.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Coefficients of a state in the truncated eigenbasis of `A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalVector {
    pub coeffs: Vec<f64>,
}

impl ModalVector {
    pub fn zeros(n: usize) -> Self {
        ModalVector {
            coeffs: vec![0.0; n],
        }
    }

    /// Unit vector of eigenmode `k` (zero-based index, so mode number `k+1`).
    pub fn unit_mode(n: usize, k: usize) -> Self {
        let mut v = Self::zeros(n);
        v.coeffs[k] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn dot(&self, other: &ModalVector) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Euclidean norm; with the orthonormal eigenbasis convention this is
    /// the `X` norm.
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.coeffs {
            *c *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> ModalVector {
        let mut v = self.clone();
        v.scale(s);
        v
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &ModalVector, s: f64) {
        for (a, b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &ModalVector) -> ModalVector {
        let mut v = self.clone();
        v.add_scaled(other, -1.0);
        v
    }

    pub fn add(&self, other: &ModalVector) -> ModalVector {
        let mut v = self.clone();
        v.add_scaled(other, 1.0);
        v
    }
}

/// Truncated diagonal spatial operator with its collocation transform.
///
/// Immutable after construction; freely shared between workers.
#[derive(Clone, Debug)]
pub struct SpectralDomain {
    eigenvalues: Vec<f64>,
    collocation_points: Vec<f64>,
    /// Row-major `N x N`: modal coefficients -> values at collocation points.
    to_colloc: Vec<f64>,
    /// Row-major `N x N`: collocation values -> modal coefficients.
    to_modal: Vec<f64>,
    /// Quadrature weight of the collocation rule (uniform).
    quad_weight: f64,
}

impl SpectralDomain {
    /// Dirichlet Laplacian on `(0, pi)`: `lambda_k = -k^2`, sine eigenbasis.
    pub fn dirichlet_laplacian(n_modes: usize) -> Self {
        let eigenvalues = (1..=n_modes).map(|k| -((k * k) as f64)).collect();
        Self::build(n_modes, eigenvalues)
    }

    /// Diagonal operator with an explicit eigenvalue list. The collocation
    /// transform stays the sine one of the default instance; it is only
    /// meaningful when the pointwise nonlinearity is active.
    pub fn from_eigenvalues(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::Domain("eigenvalue list is empty".into()));
        }
        for w in eigenvalues.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::invalid_config(
                    "eigenvalues strictly decreasing",
                    format!("{} followed by {}", w[0], w[1]),
                ));
            }
        }
        let n = eigenvalues.len();
        Ok(Self::build(n, eigenvalues))
    }

    fn build(n: usize, eigenvalues: Vec<f64>) -> Self {
        use std::f64::consts::PI;
        assert!(n > 0);
        let collocation_points: Vec<f64> =
            (1..=n).map(|i| i as f64 * PI / (n as f64 + 1.0)).collect();
        let quad_weight = PI / (n as f64 + 1.0);
        let basis_norm = (2.0 / PI).sqrt();
        let mut to_colloc = vec![0.0; n * n];
        let mut to_modal = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let s = basis_norm * ((k as f64 + 1.0) * collocation_points[i]).sin();
                to_colloc[i * n + k] = s;
                // Discrete sine orthogonality makes the weighted transpose
                // the exact inverse.
                to_modal[k * n + i] = quad_weight * s;
            }
        }
        SpectralDomain {
            eigenvalues,
            collocation_points,
            to_colloc,
            to_modal,
            quad_weight,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn collocation_points(&self) -> &[f64] {
        &self.collocation_points
    }

    pub fn quad_weight(&self) -> f64 {
        self.quad_weight
    }

    /// Spectral bound `s(A)`, the largest eigenvalue.
    pub fn spectral_bound(&self) -> f64 {
        self.eigenvalues[0]
    }

    fn check_len(&self, v: &ModalVector) -> Result<()> {
        if v.len() != self.n_modes() {
            return Err(Error::DimensionMismatch(format!(
                "vector has {} modes, domain has {}",
                v.len(),
                self.n_modes()
            )));
        }
        Ok(())
    }

    /// `S(t) v`: multiplies mode `k` by `exp(lambda_k t)`.
    pub fn semigroup_apply(&self, t: f64, v: &ModalVector) -> Result<ModalVector> {
        if t < 0.0 {
            return Err(Error::Domain(format!(
                "semigroup time must be nonnegative, got {t}"
            )));
        }
        self.check_len(v)?;
        let mut out = v.clone();
        for (c, &lam) in out.coeffs.iter_mut().zip(&self.eigenvalues) {
            *c *= (lam * t).exp();
        }
        Ok(out)
    }

    /// `A v`: multiplies mode `k` by `lambda_k`.
    pub fn apply_a(&self, v: &ModalVector) -> ModalVector {
        let mut out = v.clone();
        for (c, &lam) in out.coeffs.iter_mut().zip(&self.eigenvalues) {
            *c *= lam;
        }
        out
    }

    /// Values of the eigenfunction expansion at the collocation points.
    pub fn to_collocation(&self, v: &ModalVector) -> Vec<f64> {
        let n = self.n_modes();
        debug_assert_eq!(v.len(), n);
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &self.to_colloc[i * n..(i + 1) * n];
            out[i] = row.iter().zip(&v.coeffs).map(|(m, c)| m * c).sum();
        }
        out
    }

    /// Inverse of [`Self::to_collocation`].
    pub fn to_modal(&self, values: &[f64]) -> ModalVector {
        let n = self.n_modes();
        debug_assert_eq!(values.len(), n);
        let mut out = ModalVector::zeros(n);
        for k in 0..n {
            let row = &self.to_modal[k * n..(k + 1) * n];
            out.coeffs[k] = row.iter().zip(values).map(|(m, u)| m * u).sum();
        }
        out
    }
}

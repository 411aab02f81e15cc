//! Discretized product space `H = L^2([-tau, 0], X) x X`.
//!
//! A history segment holds the modal state on a uniform grid
//! `s_i = -tau + i tau/M`, `i = 0..=M`; a product state pairs a segment with
//! its head, which by convention equals the segment value at `s = 0`. The
//! `L^2` factor of the inner product is evaluated by trapezoidal quadrature,
//! which is exact for the piecewise-linear interpolant the segment
//! represents. The delay semigroup shifts history nodes left and fills the
//! exposed nodes with the semigroup orbit of the head.

use crate::space::{ModalVector, SpectralDomain};
use crate::{Error, Result};
use std::collections::VecDeque;

/// Modal history on the uniform grid over `[-tau, 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistorySegment {
    tau: f64,
    nodes: VecDeque<ModalVector>,
}

impl HistorySegment {
    /// Builds a segment from `M + 1` nodes, oldest first.
    pub fn from_nodes(tau: f64, nodes: Vec<ModalVector>) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::Domain(format!("delay must be positive, got {tau}")));
        }
        if nodes.len() < 3 {
            return Err(Error::Domain(format!(
                "history grid needs at least 3 nodes (M >= 2), got {}",
                nodes.len()
            )));
        }
        let n = nodes[0].len();
        if nodes.iter().any(|v| v.len() != n) {
            return Err(Error::DimensionMismatch(
                "history nodes have differing mode counts".into(),
            ));
        }
        Ok(HistorySegment {
            tau,
            nodes: nodes.into(),
        })
    }

    /// Constant-in-time segment.
    pub fn constant(tau: f64, history_nodes: usize, value: &ModalVector) -> Result<Self> {
        Self::from_nodes(tau, vec![value.clone(); history_nodes + 1])
    }

    pub fn zeros(tau: f64, history_nodes: usize, n_modes: usize) -> Result<Self> {
        Self::constant(tau, history_nodes, &ModalVector::zeros(n_modes))
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Number of history intervals `M`.
    pub fn history_nodes(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Grid spacing `tau / M`, also the integrator step.
    pub fn dt(&self) -> f64 {
        self.tau / self.history_nodes() as f64
    }

    pub fn n_modes(&self) -> usize {
        self.nodes[0].len()
    }

    pub fn node(&self, i: usize) -> &ModalVector {
        &self.nodes[i]
    }

    /// Oldest node, the state at `s = -tau`.
    pub fn delayed(&self) -> &ModalVector {
        &self.nodes[0]
    }

    /// Newest node, the state at `s = 0`.
    pub fn latest(&self) -> &ModalVector {
        &self.nodes[self.nodes.len() - 1]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &ModalVector> {
        self.nodes.iter()
    }

    /// Drops the oldest node and appends `new_head` at `s = 0`; returns the
    /// dropped node so steppers can recycle its buffer.
    pub fn shift_append(&mut self, new_head: ModalVector) -> ModalVector {
        let old = self.nodes.pop_front().expect("segment never empty");
        self.nodes.push_back(new_head);
        old
    }

    /// Piecewise-linear evaluation at `s` in `[-tau, 0]`, exact at nodes.
    pub fn eval(&self, s: f64) -> Result<ModalVector> {
        let tol = 1e-9 * self.tau;
        if s < -self.tau - tol || s > tol {
            return Err(Error::Domain(format!(
                "evaluation point {s} outside [-{}, 0]",
                self.tau
            )));
        }
        let m = self.history_nodes() as f64;
        let x = ((s + self.tau) / self.dt()).clamp(0.0, m);
        let i = (x.floor() as usize).min(self.history_nodes() - 1);
        let frac = x - i as f64;
        let mut out = self.nodes[i].scaled(1.0 - frac);
        out.add_scaled(&self.nodes[i + 1], frac);
        Ok(out)
    }

    fn check_grid(&self, other: &HistorySegment) -> Result<()> {
        if self.tau != other.tau
            || self.nodes.len() != other.nodes.len()
            || self.n_modes() != other.n_modes()
        {
            return Err(Error::DimensionMismatch(format!(
                "history grids differ: tau {} vs {}, nodes {} vs {}, modes {} vs {}",
                self.tau,
                other.tau,
                self.nodes.len(),
                other.nodes.len(),
                self.n_modes(),
                other.n_modes()
            )));
        }
        Ok(())
    }

    /// Trapezoidal quadrature of the `L^2([-tau,0], X)` inner product.
    pub fn l2_inner(&self, other: &HistorySegment) -> Result<f64> {
        self.check_grid(other)?;
        let dt = self.dt();
        let m = self.history_nodes();
        let mut acc = 0.0;
        for i in 0..=m {
            let w = if i == 0 || i == m { 0.5 * dt } else { dt };
            acc += w * self.nodes[i].dot(&other.nodes[i]);
        }
        Ok(acc)
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_inner(self).expect("same grid").sqrt()
    }

    /// Time average `(1/tau) \int_{-tau}^0 phi(s) ds` by the same quadrature.
    pub fn time_mean(&self) -> ModalVector {
        let dt = self.dt();
        let m = self.history_nodes();
        let mut acc = ModalVector::zeros(self.n_modes());
        for i in 0..=m {
            let w = if i == 0 || i == m { 0.5 * dt } else { dt };
            acc.add_scaled(&self.nodes[i], w / self.tau);
        }
        acc
    }

    /// Nodewise sum, used to assemble `v_t + z_t`.
    pub fn add(&self, other: &HistorySegment) -> Result<HistorySegment> {
        self.check_grid(other)?;
        let nodes = self
            .nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| a.add(b))
            .collect();
        Ok(HistorySegment {
            tau: self.tau,
            nodes,
        })
    }

    pub fn sub(&self, other: &HistorySegment) -> Result<HistorySegment> {
        self.check_grid(other)?;
        let nodes = self
            .nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| a.sub(b))
            .collect();
        Ok(HistorySegment {
            tau: self.tau,
            nodes,
        })
    }

    /// Refines the grid by linear interpolation (factor >= 1).
    pub fn refined(&self, factor: usize) -> HistorySegment {
        let m = self.history_nodes() * factor.max(1);
        let dt = self.tau / m as f64;
        let nodes = (0..=m)
            .map(|i| self.eval(-self.tau + i as f64 * dt).expect("in range"))
            .collect();
        HistorySegment {
            tau: self.tau,
            nodes,
        }
    }
}

/// Element `(phi, h)` of the product space with `h = phi(0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductState {
    pub segment: HistorySegment,
    pub head: ModalVector,
}

impl ProductState {
    /// Builds a state from a segment; the head is the segment value at zero.
    pub fn from_segment(segment: HistorySegment) -> Self {
        let head = segment.latest().clone();
        ProductState { segment, head }
    }

    pub fn zeros(tau: f64, history_nodes: usize, n_modes: usize) -> Result<Self> {
        Ok(Self::from_segment(HistorySegment::zeros(
            tau,
            history_nodes,
            n_modes,
        )?))
    }

    pub fn n_modes(&self) -> usize {
        self.segment.n_modes()
    }

    /// Exact head/segment consistency (`h = phi(0)` bitwise).
    pub fn head_consistent(&self) -> bool {
        self.head == *self.segment.latest()
    }

    pub fn add(&self, other: &ProductState) -> Result<ProductState> {
        Ok(ProductState::from_segment(self.segment.add(&other.segment)?))
    }

    pub fn sub(&self, other: &ProductState) -> Result<ProductState> {
        Ok(ProductState::from_segment(self.segment.sub(&other.segment)?))
    }

    pub fn scaled(&self, s: f64) -> ProductState {
        let nodes = self.segment.nodes().map(|v| v.scaled(s)).collect();
        ProductState::from_segment(HistorySegment {
            tau: self.segment.tau,
            nodes,
        })
    }
}

/// Inner product of `H`: quadrature of the segment pairing plus the head
/// pairing.
pub fn h_inner(a: &ProductState, b: &ProductState) -> Result<f64> {
    Ok(a.segment.l2_inner(&b.segment)? + a.head.dot(&b.head))
}

/// Norm induced by [`h_inner`].
pub fn h_norm(a: &ProductState) -> f64 {
    h_inner(a, a).expect("same grid").sqrt()
}

/// Applies the delay semigroup for a grid-aligned duration `t`: on the exposed
/// part of the history window the new segment is the semigroup orbit of the
/// old head, on the rest the left-shifted old segment; the new head is
/// `S(t) h`.
pub fn tilde_semigroup_apply(
    dom: &SpectralDomain,
    t: f64,
    x: &ProductState,
) -> Result<ProductState> {
    if t < 0.0 {
        return Err(Error::Domain(format!(
            "semigroup time must be nonnegative, got {t}"
        )));
    }
    let dt = x.segment.dt();
    let steps = t / dt;
    if (steps - steps.round()).abs() > 1e-9 {
        return Err(Error::MisalignedTime { time: t, step: dt });
    }
    let k = steps.round() as usize;
    let m = x.segment.history_nodes();
    let mut nodes = Vec::with_capacity(m + 1);
    for i in 0..=m {
        if i + k <= m {
            nodes.push(x.segment.node(i + k).clone());
        } else {
            let elapsed = (i + k - m) as f64 * dt;
            nodes.push(dom.semigroup_apply(elapsed, &x.head)?);
        }
    }
    Ok(ProductState::from_segment(HistorySegment {
        tau: x.segment.tau(),
        nodes: nodes.into(),
    }))
}

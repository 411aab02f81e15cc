//! Model right-hand side, conjugated drift and the cocycles.
//!
//! The conjugated equation integrated here is
//!
//! ```text
//! dv/dt = A v - mu v - a v(t-tau) - a z(theta_{t-tau} omega)
//!         + f(v_t + z(theta_{t+.} omega)) + A z(theta_t omega),
//! ```
//!
//! with `f(phi)(x) = b tanh((1/tau) \int_{-tau}^0 phi(s)(x) ds)` evaluated
//! pointwise in collocation space. One step of the integrator treats the
//! semigroup part `exp((A - mu) h)` exactly per mode and freezes the rest of
//! the drift at the left endpoint (exponential Euler), then shifts the
//! history window by one node.
//!
//! Two cocycles are exposed. `cocycle_phi` steps the conjugated variable `v`.
//! `cocycle_psi` steps the original variable `u = v + z` natively in `u`
//! coordinates: the update
//!
//! ```text
//! u(t+h) = E (u(t) - z(t)) + c N(u_t, t) + z(t+h)
//! ```
//!
//! depends only on the current `u` window and on OU values keyed by absolute
//! grid cell, never on where the trajectory started. That purity is what
//! makes the cocycle identity `Psi(t+s, w) = Psi(t, theta_s w) . Psi(s, w)`
//! hold bitwise on the grid, for `Psi` exactly as for `Phi`. The price is
//! that `Psi` and `Phi + lift` agree only to rounding, which the tests pin
//! at `1e-13`.

use crate::noise::{NoiseShape, OuCursor, StationaryOu};
use crate::segment::{HistorySegment, ProductState};
use crate::space::{ModalVector, SpectralDomain};
use crate::util::phi1;
use crate::{Error, Result};

/// Model parameters with their derived constants.
///
/// `l_f` is the Lipschitz constant of the default nonlinearity,
/// `|b| / sqrt(tau)`; `rho_op` is the operational growth rate
/// `max(0, 1/2 + s(A)) - mu` of the damped delay semigroup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams {
    pub mu: f64,
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    pub l_f: f64,
    pub rho_op: f64,
}

impl ModelParams {
    /// Validates the basic parameter constraints and derives the constants.
    /// `spectral_bound` is `s(A)` of the spatial domain.
    pub fn new(mu: f64, a: f64, b: f64, tau: f64, spectral_bound: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::invalid_config("mu > 0", format!("mu = {mu}")));
        }
        if !(tau > 0.0) {
            return Err(Error::invalid_config("tau > 0", format!("tau = {tau}")));
        }
        if !(a.abs() <= mu) {
            return Err(Error::invalid_config(
                "|a| <= mu (delayed feedback operator norm bound)",
                format!("|a| = {} > mu = {mu}", a.abs()),
            ));
        }
        if !b.is_finite() {
            return Err(Error::invalid_config("b finite", format!("b = {b}")));
        }
        let l_f = b.abs() / tau.sqrt();
        let rho_op = (0.0f64).max(0.5 + spectral_bound) - mu;
        Ok(ModelParams {
            mu,
            a,
            b,
            tau,
            l_f,
            rho_op,
        })
    }

    /// Extra constraints required before attractor or dimension runs:
    /// `rho_op < -mu/2` and `rho_op + L_f < 0`.
    pub fn validate_dissipativity(&self) -> Result<()> {
        if !(self.rho_op < -0.5 * self.mu) {
            return Err(Error::invalid_config(
                "rho_op < -mu/2 (absorbing-set margin)",
                format!("rho_op = {} vs -mu/2 = {}", self.rho_op, -0.5 * self.mu),
            ));
        }
        if !(self.rho_op + self.l_f < 0.0) {
            return Err(Error::invalid_config(
                "rho_op + L_f < 0 (contraction margin)",
                format!("rho_op + L_f = {}", self.rho_op + self.l_f),
            ));
        }
        Ok(())
    }
}

/// Default nonlinearity from a precomputed window mean:
/// `b tanh(mean)` pointwise in collocation space.
pub(crate) fn nonlinearity_from_mean(
    params: &ModelParams,
    dom: &SpectralDomain,
    mean: &ModalVector,
) -> ModalVector {
    if params.b == 0.0 {
        return ModalVector::zeros(dom.n_modes());
    }
    let mut values = dom.to_collocation(mean);
    for u in &mut values {
        *u = params.b * u.tanh();
    }
    dom.to_modal(&values)
}

/// `f(phi)(x) = b tanh((1/tau) \int phi(s)(x) ds)`; `f(0) = 0` and f is
/// Lipschitz with constant `|b|/sqrt(tau)` in the `L^2` segment norm.
pub fn nonlinearity_f(
    params: &ModelParams,
    dom: &SpectralDomain,
    seg: &HistorySegment,
) -> ModalVector {
    nonlinearity_from_mean(params, dom, &seg.time_mean())
}

/// Collocation weights `b sech^2(mean(x))` of the derivative of the default
/// nonlinearity at the window `seg`.
pub fn jacobian_weights(
    params: &ModelParams,
    dom: &SpectralDomain,
    seg: &HistorySegment,
) -> Vec<f64> {
    let values = dom.to_collocation(&seg.time_mean());
    values
        .iter()
        .map(|u| {
            let c = u.cosh();
            params.b / (c * c)
        })
        .collect()
}

/// Applies the nonlinearity derivative: weights from [`jacobian_weights`]
/// multiply the collocation values of the perturbation's window mean.
pub fn apply_jacobian(
    dom: &SpectralDomain,
    weights: &[f64],
    eta_mean: &ModalVector,
) -> ModalVector {
    let mut values = dom.to_collocation(eta_mean);
    for (v, w) in values.iter_mut().zip(weights) {
        *v *= w;
    }
    dom.to_modal(&values)
}

/// Point-delay operator `L phi = a phi(-tau)`.
pub fn delay_operator_l(params: &ModelParams, seg: &HistorySegment) -> ModalVector {
    seg.delayed().scaled(params.a)
}

/// Conjugated drift
/// `A z(theta_t) - L z(theta_{t+.}) + f(v_t + z(theta_{t+.}))`.
///
/// The full step drift additionally subtracts `L v_t`; see [`mild_step`].
pub fn conjugated_drift(
    params: &ModelParams,
    dom: &SpectralDomain,
    z_now: (&ModalVector, &ModalVector),
    z_seg: &HistorySegment,
    v_seg: &HistorySegment,
) -> Result<ModalVector> {
    let (_, az_now) = z_now;
    let full = v_seg.add(z_seg)?;
    let mut out = nonlinearity_f(params, dom, &full);
    out.add_scaled(az_now, 1.0);
    out.add_scaled(z_seg.delayed(), -params.a);
    Ok(out)
}

/// Per-mode exponential-Euler coefficients for step `h`:
/// `e_k = exp((lambda_k - mu) h)` and `c_k = (e_k - 1)/(lambda_k - mu)`.
#[derive(Clone, Debug)]
pub struct StepCoeffs {
    pub(crate) e: Vec<f64>,
    pub(crate) c: Vec<f64>,
    pub(crate) h: f64,
}

impl StepCoeffs {
    pub fn new(dom: &SpectralDomain, mu: f64, h: f64) -> Self {
        let e = dom
            .eigenvalues()
            .iter()
            .map(|&lam| ((lam - mu) * h).exp())
            .collect();
        let c = dom
            .eigenvalues()
            .iter()
            .map(|&lam| h * phi1((lam - mu) * h))
            .collect();
        StepCoeffs { e, c, h }
    }
}

/// Noise data consumed by one integrator step: the field and its image under
/// `A` at the step's left endpoint, the field at the right endpoint, and the
/// field history over the step's window.
#[derive(Clone, Debug)]
pub struct NoiseSample {
    pub z_now: ModalVector,
    pub az_now: ModalVector,
    pub z_next: ModalVector,
    pub z_segment: HistorySegment,
}

/// Materializes the noise sample for the step starting at path-local `cell`.
pub fn noise_sample(
    ou: &StationaryOu,
    shapes: &NoiseShape,
    cell: i64,
    tau: f64,
    history_nodes: usize,
) -> Result<NoiseSample> {
    let m = history_nodes;
    let mut cursor = ou.cursor(cell - m as i64);
    let n = shapes.n_modes();
    let mut nodes = Vec::with_capacity(m + 1);
    for _ in 0..=m {
        let (zf, _) = shapes.field_from_values(cursor.values());
        nodes.push(zf);
        cursor.advance();
    }
    let (z_next, _) = shapes.field_from_values(cursor.values());
    let z_segment = HistorySegment::from_nodes(tau, nodes)?;
    let z_now = z_segment.latest().clone();
    let mut az_now = ModalVector::zeros(n);
    // A applied to the field is assembled from the shape images, matching
    // the walker's arithmetic.
    {
        let values = ou.values_at(cell);
        for (j, &zj) in values.iter().enumerate() {
            az_now.add_scaled(&shapes.ag[j], zj);
        }
    }
    Ok(NoiseSample {
        z_now,
        az_now,
        z_next,
        z_segment,
    })
}

fn check_state(dom: &SpectralDomain, state: &ProductState) -> Result<()> {
    if state.n_modes() != dom.n_modes() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} modes, domain has {}",
            state.n_modes(),
            dom.n_modes()
        )));
    }
    if !state.head_consistent() {
        return Err(Error::Domain(
            "product state head differs from segment value at zero".into(),
        ));
    }
    Ok(())
}

/// New head of the conjugated step from the `v` window and the noise data.
fn phi_head(
    params: &ModelParams,
    dom: &SpectralDomain,
    coeffs: &StepCoeffs,
    v_seg: &HistorySegment,
    z_seg: &HistorySegment,
    az_now: &ModalVector,
    out: &mut ModalVector,
) {
    // Mean of v + z accumulated nodewise so the arithmetic is a pure
    // function of the two windows.
    let m = v_seg.history_nodes();
    let dt = v_seg.dt();
    let tau = v_seg.tau();
    let n = dom.n_modes();
    let mut mean = ModalVector::zeros(n);
    let mut tmp = ModalVector::zeros(n);
    for i in 0..=m {
        let w = if i == 0 || i == m { 0.5 * dt } else { dt };
        for k in 0..n {
            tmp.coeffs[k] = v_seg.node(i).coeffs[k] + z_seg.node(i).coeffs[k];
        }
        mean.add_scaled(&tmp, w / tau);
    }
    let mut nvec = nonlinearity_from_mean(params, dom, &mean);
    nvec.add_scaled(az_now, 1.0);
    nvec.add_scaled(v_seg.delayed(), -params.a);
    nvec.add_scaled(z_seg.delayed(), -params.a);
    let head = v_seg.latest();
    for k in 0..n {
        out.coeffs[k] = coeffs.e[k] * head.coeffs[k] + coeffs.c[k] * nvec.coeffs[k];
    }
}

/// One exponential-Euler step of the conjugated equation: the head evolves
/// by the exact per-mode semigroup plus the frozen drift, the segment shifts
/// one node and appends the new head.
pub fn mild_step(
    params: &ModelParams,
    dom: &SpectralDomain,
    state: &ProductState,
    sample: &NoiseSample,
) -> Result<ProductState> {
    check_state(dom, state)?;
    if sample.z_segment.history_nodes() != state.segment.history_nodes()
        || sample.z_segment.tau() != state.segment.tau()
    {
        return Err(Error::DimensionMismatch(
            "noise sample grid differs from state grid".into(),
        ));
    }
    let coeffs = StepCoeffs::new(dom, params.mu, state.segment.dt());
    let mut head = ModalVector::zeros(dom.n_modes());
    phi_head(
        params,
        dom,
        &coeffs,
        &state.segment,
        &sample.z_segment,
        &sample.az_now,
        &mut head,
    );
    let mut segment = state.segment.clone();
    segment.shift_append(head);
    Ok(ProductState::from_segment(segment))
}

/// Projection onto the history factor of `H`.
pub fn project_p1(x: &ProductState) -> &HistorySegment {
    &x.segment
}

/// Projection onto the state factor of `H`.
pub fn project_p2(x: &ProductState) -> &ModalVector {
    &x.head
}

/// Which variable a walker advances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Coords {
    /// Conjugated variable `v` (cocycle `Phi`).
    Conjugated,
    /// Original variable `u = v + z` (cocycle `Psi`).
    Original,
}

/// Immutable bundle of model, domain and noise shapes.
#[derive(Clone, Debug)]
pub struct Flow {
    pub params: ModelParams,
    pub dom: SpectralDomain,
    pub shapes: NoiseShape,
}

impl Flow {
    pub fn new(params: ModelParams, dom: SpectralDomain, shapes: NoiseShape) -> Result<Self> {
        if shapes.components() > 0 && shapes.n_modes() != dom.n_modes() {
            return Err(Error::DimensionMismatch(format!(
                "noise shapes span {} modes, domain has {}",
                shapes.n_modes(),
                dom.n_modes()
            )));
        }
        Ok(Flow {
            params,
            dom,
            shapes,
        })
    }

    fn check_ou(&self, ou: &StationaryOu) -> Result<()> {
        if ou.components() != self.shapes.components() {
            return Err(Error::DimensionMismatch(format!(
                "path has {} components, shapes have {}",
                ou.components(),
                self.shapes.components()
            )));
        }
        if (ou.mu() - self.params.mu).abs() > 1e-12 {
            return Err(Error::invalid_config(
                "OU decay rate equals model mu",
                format!("{} vs {}", ou.mu(), self.params.mu),
            ));
        }
        Ok(())
    }

    /// The OU lift `Z = (z(theta_. omega), z(omega))` on the state grid,
    /// anchored at path-local cell `at_cell`.
    pub fn lift(
        &self,
        ou: &StationaryOu,
        history_nodes: usize,
        at_cell: i64,
    ) -> Result<ProductState> {
        self.check_ou(ou)?;
        let m = history_nodes;
        let mut cursor = ou.cursor(at_cell - m as i64);
        let mut nodes = Vec::with_capacity(m + 1);
        for _ in 0..=m {
            let (zf, _) = self.shapes.field_from_values(cursor.values());
            nodes.push(zf);
            cursor.advance();
        }
        Ok(ProductState::from_segment(HistorySegment::from_nodes(
            self.params.tau,
            nodes,
        )?))
    }

    /// Conjugated cocycle `Phi(t, omega, .)`: iterated [`mild_step`] over
    /// `[0, t]` with the OU trace read from `ou`. `Phi(0)` is the identity.
    pub fn cocycle_phi(&self, ou: &StationaryOu, t: f64, init: &ProductState) -> Result<ProductState> {
        let mut w = Walker::conjugated(self, ou, init.clone(), 0)?;
        let steps = steps_for(ou, t)?;
        w.run(steps);
        Ok(w.into_state())
    }

    /// Original-coordinate cocycle `Psi(t, omega, .)`, the solution operator
    /// of the noisy equation. Stepped natively in `u`; equals
    /// `Phi(t, omega, chi - Z(omega)) + Z(theta_t omega)` up to rounding.
    pub fn cocycle_psi(&self, ou: &StationaryOu, t: f64, chi: &ProductState) -> Result<ProductState> {
        let mut w = Walker::original(self, ou, chi.clone(), 0)?;
        let steps = steps_for(ou, t)?;
        w.run(steps);
        Ok(w.into_state())
    }

    /// Integrates from `init` and records every grid state on `[0, t_final]`.
    pub fn simulate(
        &self,
        ou: &StationaryOu,
        t_final: f64,
        init: &ProductState,
    ) -> Result<Trajectory> {
        let steps = steps_for(ou, t_final)?;
        let mut w = Walker::original(self, ou, init.clone(), 0)?;
        let mut states = Vec::with_capacity(steps + 1);
        let mut ou_trace = Vec::with_capacity(steps + 1);
        states.push(w.state().clone());
        ou_trace.push(w.ou_values().to_vec());
        for _ in 0..steps {
            w.step();
            states.push(w.state().clone());
            ou_trace.push(w.ou_values().to_vec());
        }
        Ok(Trajectory {
            t0: 0.0,
            dt: ou.step(),
            states,
            ou_trace,
        })
    }
}

fn steps_for(ou: &StationaryOu, t: f64) -> Result<usize> {
    if t < 0.0 {
        return Err(Error::Domain(format!("duration must be nonnegative, got {t}")));
    }
    let cells = ou.path().cells_of(t)?;
    Ok(cells as usize)
}

/// Grid recording of a single trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<ProductState>,
    pub ou_trace: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn final_state(&self) -> &ProductState {
        self.states.last().expect("trajectory never empty")
    }
}

/// Single-trajectory stepper. Holds the rolling OU cursor and (for the
/// conjugated variable) the modal noise window, and recycles node buffers so
/// a step performs no allocation beyond the nonlinearity transforms.
pub struct Walker<'a> {
    flow: &'a Flow,
    coords: Coords,
    coeffs: StepCoeffs,
    cursor: OuCursor<'a>,
    state: ProductState,
    /// Modal noise window, maintained only for the conjugated variable.
    zseg: Option<HistorySegment>,
    cell: i64,
    z_now: ModalVector,
    az_now: ModalVector,
    newhead: ModalVector,
}

impl<'a> Walker<'a> {
    fn new(
        flow: &'a Flow,
        ou: &'a StationaryOu,
        init: ProductState,
        start_cell: i64,
        coords: Coords,
    ) -> Result<Self> {
        flow.check_ou(ou)?;
        check_state(&flow.dom, &init)?;
        let h = init.segment.dt();
        if (h - ou.step()).abs() > 1e-9 * ou.step() {
            return Err(Error::MisalignedTime {
                time: h,
                step: ou.step(),
            });
        }
        if (init.segment.tau() - flow.params.tau).abs() > 1e-12 {
            return Err(Error::DimensionMismatch(format!(
                "state delay {} differs from model tau {}",
                init.segment.tau(),
                flow.params.tau
            )));
        }
        let n = flow.dom.n_modes();
        let m = init.segment.history_nodes();
        let (cursor, zseg) = match coords {
            Coords::Original => (ou.cursor(start_cell), None),
            Coords::Conjugated => {
                let mut c = ou.cursor(start_cell - m as i64);
                let mut nodes = Vec::with_capacity(m + 1);
                for i in 0..=m {
                    let (zf, _) = flow.shapes.field_from_values(c.values());
                    nodes.push(zf);
                    if i < m {
                        c.advance();
                    }
                }
                (
                    c,
                    Some(HistorySegment::from_nodes(flow.params.tau, nodes)?),
                )
            }
        };
        let coeffs = StepCoeffs::new(&flow.dom, flow.params.mu, ou.step());
        Ok(Walker {
            flow,
            coords,
            coeffs,
            cursor,
            state: init,
            zseg,
            cell: start_cell,
            z_now: ModalVector::zeros(n),
            az_now: ModalVector::zeros(n),
            newhead: ModalVector::zeros(n),
        })
    }

    /// Walker for the conjugated variable `v` (cocycle `Phi`).
    pub fn conjugated(
        flow: &'a Flow,
        ou: &'a StationaryOu,
        init: ProductState,
        start_cell: i64,
    ) -> Result<Self> {
        Self::new(flow, ou, init, start_cell, Coords::Conjugated)
    }

    /// Walker for the original variable `u` (cocycle `Psi`).
    pub fn original(
        flow: &'a Flow,
        ou: &'a StationaryOu,
        init: ProductState,
        start_cell: i64,
    ) -> Result<Self> {
        Self::new(flow, ou, init, start_cell, Coords::Original)
    }

    pub fn state(&self) -> &ProductState {
        &self.state
    }

    pub fn flow(&self) -> &Flow {
        self.flow
    }

    pub fn coeffs(&self) -> &StepCoeffs {
        &self.coeffs
    }

    /// Path-local cell of the current state time.
    pub fn cell(&self) -> i64 {
        self.cell
    }

    /// Raw OU values at the current cell.
    pub fn ou_values(&self) -> &[f64] {
        self.cursor.values()
    }

    pub fn into_state(self) -> ProductState {
        self.state
    }

    /// Advances the trajectory by one grid step.
    pub fn step(&mut self) {
        let flow = self.flow;
        match self.coords {
            Coords::Conjugated => {
                let zseg = self.zseg.as_ref().expect("conjugated walker has z window");
                // A z at the left endpoint from the shape images.
                for c in &mut self.az_now.coeffs {
                    *c = 0.0;
                }
                for (j, &zj) in self.cursor.values().iter().enumerate() {
                    self.az_now.add_scaled(&flow.shapes.ag[j], zj);
                }
                phi_head(
                    &flow.params,
                    &flow.dom,
                    &self.coeffs,
                    &self.state.segment,
                    zseg,
                    &self.az_now,
                    &mut self.newhead,
                );
                self.cursor.advance();
                // Fresh modal noise node for the advanced cell, built in the
                // z_now scratch and swapped into the window.
                let n = flow.dom.n_modes();
                self.z_now.coeffs.clear();
                self.z_now.coeffs.resize(n, 0.0);
                for (j, &zj) in self.cursor.values().iter().enumerate() {
                    self.z_now.add_scaled(&flow.shapes.g[j], zj);
                }
                let zseg = self.zseg.as_mut().expect("conjugated walker has z window");
                let dropped =
                    zseg.shift_append(std::mem::replace(&mut self.z_now, ModalVector::zeros(0)));
                self.z_now = dropped;
            }
            Coords::Original => {
                for c in &mut self.z_now.coeffs {
                    *c = 0.0;
                }
                for c in &mut self.az_now.coeffs {
                    *c = 0.0;
                }
                for (j, &zj) in self.cursor.values().iter().enumerate() {
                    self.z_now.add_scaled(&flow.shapes.g[j], zj);
                    self.az_now.add_scaled(&flow.shapes.ag[j], zj);
                }
                // Head update up to the right-endpoint lift term.
                let n = flow.dom.n_modes();
                let mut nvec =
                    nonlinearity_from_mean(&flow.params, &flow.dom, &self.state.segment.time_mean());
                nvec.add_scaled(&self.az_now, 1.0);
                nvec.add_scaled(self.state.segment.delayed(), -flow.params.a);
                let head = self.state.segment.latest();
                for k in 0..n {
                    self.newhead.coeffs[k] = self.coeffs.e[k]
                        * (head.coeffs[k] - self.z_now.coeffs[k])
                        + self.coeffs.c[k] * nvec.coeffs[k];
                }
                self.cursor.advance();
                for (j, &zj) in self.cursor.values().iter().enumerate() {
                    self.newhead.add_scaled(&flow.shapes.g[j], zj);
                }
            }
        }
        // Append the new head, recycling the dropped node's buffer.
        let mut recycled = self
            .state
            .segment
            .shift_append(std::mem::replace(&mut self.newhead, ModalVector::zeros(0)));
        recycled.coeffs.clear();
        recycled.coeffs.resize(self.flow.dom.n_modes(), 0.0);
        self.newhead = recycled;
        self.state
            .head
            .coeffs
            .copy_from_slice(&self.state.segment.latest().coeffs);
        self.cell += 1;
    }

    pub fn run(&mut self, steps: usize) {
        for _ in 0..steps {
            self.step();
        }
    }
}

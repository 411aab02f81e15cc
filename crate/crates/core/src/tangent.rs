//! Variational cocycle, Lyapunov statistics and dimension bounds.
//!
//! Perturbations of the solution cocycle satisfy the linearized equation:
//! the head is driven by `(A - mu) w - a w(-tau) + Df(u_t) w_t` along the
//! base trajectory `u`, the segment is the trail of past tangent heads. One
//! unit of time defines the linearized map whose singular values the QR
//! sweep estimates: a frame of `m` H-orthonormal perturbations is propagated
//! unit by unit, re-orthonormalized by modified Gram-Schmidt in the `H`
//! inner product, and the logarithms of the diagonal stretches accumulate
//! into the `q_j` statistics
//!
//! ```text
//! q_j = E[ time average of log(alpha_1 ... alpha_j) ],
//! ```
//!
//! whose first negative index bounds the Hausdorff dimension of the
//! attractor and feeds the fractal-dimension threshold
//! `gamma > E[max_j (d q_j - j q_d)] / (-E q_d)`.
//!
//! The trace functional `Tr(G Q_m)` uses the generator in trail form: the
//! damping, the delay term and the nonlinearity derivative act on the head,
//! the segment contributes the telescoped transport boundary term
//! `(|w(0)|^2 - |w(-tau)|^2) / 2`. This is the generator of the flow
//! actually stepped above, so its time average reproduces the QR log-stretch
//! sums (Liouville identity); tests pin the agreement at 5% on the linear
//! instance.

use crate::attractor::{hausdorff_semidist, pullback_evolve};
use crate::dynamics::{apply_jacobian, jacobian_weights, Flow, ModelParams, StepCoeffs, Walker};
use crate::noise::{derive_seed, keyed_normal, StationaryOu};
use crate::parallel::map_indexed;
use crate::segment::{h_inner, h_norm, HistorySegment, ProductState};
use crate::space::{ModalVector, SpectralDomain};
use crate::util::{linfit_slope, mean, sample_variance};
use crate::{Error, Result};
use serde::Serialize;

const FRAME_STREAM: u64 = 0x6672_616d;

/// Pairwise H-orthonormal perturbations.
#[derive(Clone, Debug)]
pub struct TangentFrame {
    pub vectors: Vec<ProductState>,
}

/// Diagonal stretches of one orthonormalization pass.
#[derive(Clone, Debug)]
pub struct OrthoOutcome {
    pub stretches: Vec<f64>,
    /// Set when a stretch underflowed and the vector was reseeded.
    pub underflow: bool,
}

impl TangentFrame {
    /// Deterministic random orthonormal frame of `m` vectors.
    pub fn seeded(
        seed: u64,
        m: usize,
        tau: f64,
        history_nodes: usize,
        n_modes: usize,
    ) -> Result<TangentFrame> {
        let fseed = derive_seed(seed, FRAME_STREAM);
        let vectors = (0..m)
            .map(|v| {
                let nodes = (0..=history_nodes)
                    .map(|i| ModalVector {
                        coeffs: (0..n_modes)
                            .map(|k| keyed_normal(fseed, v as u64, (i * n_modes + k) as i64))
                            .collect(),
                    })
                    .collect();
                Ok(ProductState::from_segment(HistorySegment::from_nodes(
                    tau, nodes,
                )?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut frame = TangentFrame { vectors };
        frame.orthonormalize()?;
        Ok(frame)
    }

    /// Frame of head modes with zero interior history: vector `k` carries
    /// `e_k` at the head node and zeros elsewhere, normalized in `H`
    /// (head consistency puts the head on the segment's last node, so the
    /// norm picks up the boundary quadrature weight).
    pub fn head_modes(m: usize, tau: f64, history_nodes: usize, n_modes: usize) -> TangentFrame {
        let dt = tau / history_nodes as f64;
        let scale = 1.0 / (1.0 + 0.5 * dt).sqrt();
        let vectors = (0..m)
            .map(|k| {
                let mut nodes = vec![ModalVector::zeros(n_modes); history_nodes + 1];
                nodes[history_nodes] = ModalVector::unit_mode(n_modes, k).scaled(scale);
                ProductState::from_segment(
                    HistorySegment::from_nodes(tau, nodes).expect("frame grid"),
                )
            })
            .collect();
        TangentFrame { vectors }
    }

    /// Frame of equilibrated trail profiles: vector `k` is the invariant
    /// delay profile `exp((lambda_k - mu) s) e_k` of the delay-free linear
    /// flow, normalized in `H`. On these the trace functional reproduces the
    /// exponents `lambda_k - mu` up to quadrature error.
    pub fn trail_profiles(
        dom: &SpectralDomain,
        mu: f64,
        m: usize,
        tau: f64,
        history_nodes: usize,
    ) -> TangentFrame {
        let n = dom.n_modes();
        let dt = tau / history_nodes as f64;
        let mut frame = TangentFrame {
            vectors: (0..m)
                .map(|k| {
                    let rate = dom.eigenvalues()[k] - mu;
                    let nodes = (0..=history_nodes)
                        .map(|i| {
                            let s = -tau + i as f64 * dt;
                            ModalVector::unit_mode(n, k).scaled((rate * s).exp())
                        })
                        .collect();
                    ProductState::from_segment(
                        HistorySegment::from_nodes(tau, nodes).expect("frame grid"),
                    )
                })
                .collect(),
        };
        frame.orthonormalize().expect("profile frame");
        frame
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn gram_deviation(&self) -> f64 {
        let mut dev = 0.0f64;
        for (i, a) in self.vectors.iter().enumerate() {
            for (j, b) in self.vectors.iter().enumerate() {
                let g = h_inner(a, b).expect("frame grids agree");
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((g - target).abs());
            }
        }
        dev
    }

    /// Modified Gram-Schmidt in the `H` inner product. Returns the diagonal
    /// stretches; a vector whose residual underflows is reseeded with a
    /// deterministic draw orthogonal to its predecessors.
    pub fn orthonormalize(&mut self) -> Result<OrthoOutcome> {
        let mut stretches = Vec::with_capacity(self.vectors.len());
        let mut underflow = false;
        for i in 0..self.vectors.len() {
            let mut v = self.vectors[i].clone();
            for j in 0..i {
                let proj = h_inner(&v, &self.vectors[j])?;
                v = sub_scaled(&v, &self.vectors[j], proj);
            }
            let mut norm = h_norm(&v);
            if norm < 1e-300 {
                underflow = true;
                v = self.reseed_orthogonal(i)?;
                norm = h_norm(&v);
            }
            stretches.push(norm);
            self.vectors[i] = v.scaled(1.0 / norm);
        }
        Ok(OrthoOutcome {
            stretches,
            underflow,
        })
    }

    fn reseed_orthogonal(&self, index: usize) -> Result<ProductState> {
        let template = &self.vectors[index].segment;
        let tau = template.tau();
        let m = template.history_nodes();
        let n = template.n_modes();
        for attempt in 0..16u64 {
            let nodes = (0..=m)
                .map(|i| ModalVector {
                    coeffs: (0..n)
                        .map(|k| {
                            keyed_normal(0x7265_7365, attempt * 64 + index as u64, (i * n + k) as i64)
                        })
                        .collect(),
                })
                .collect();
            let mut v = ProductState::from_segment(HistorySegment::from_nodes(tau, nodes)?);
            for j in 0..index {
                let proj = h_inner(&v, &self.vectors[j])?;
                v = sub_scaled(&v, &self.vectors[j], proj);
            }
            if h_norm(&v) > 1e-8 {
                return Ok(v);
            }
        }
        Err(Error::NotConverged(
            "could not reseed a collapsed tangent direction".into(),
        ))
    }
}

fn sub_scaled(a: &ProductState, b: &ProductState, s: f64) -> ProductState {
    let nodes = a
        .segment
        .nodes()
        .zip(b.segment.nodes())
        .map(|(x, y)| {
            let mut v = x.clone();
            v.add_scaled(y, -s);
            v
        })
        .collect();
    ProductState::from_segment(
        HistorySegment::from_nodes(a.segment.tau(), nodes).expect("same grid"),
    )
}

/// One linearized exponential-Euler step of the perturbation `u` along the
/// base window `base_seg` (the original-variable history `u_t`, noise
/// included). Mirrors the arithmetic of the nonlinear step with the drift
/// replaced by its derivative.
pub fn tangent_step(
    params: &ModelParams,
    dom: &SpectralDomain,
    base_seg: &HistorySegment,
    u: &ProductState,
) -> Result<ProductState> {
    if base_seg.history_nodes() != u.segment.history_nodes()
        || base_seg.n_modes() != u.segment.n_modes()
    {
        return Err(Error::DimensionMismatch(
            "base window grid differs from tangent grid".into(),
        ));
    }
    if !u.head_consistent() {
        return Err(Error::Domain("tangent state head inconsistent".into()));
    }
    let coeffs = StepCoeffs::new(dom, params.mu, u.segment.dt());
    let weights = if params.b == 0.0 {
        None
    } else {
        Some(jacobian_weights(params, dom, base_seg))
    };
    let mut segment = u.segment.clone();
    let head = tangent_head(params, dom, &coeffs, weights.as_deref(), &segment);
    segment.shift_append(head);
    Ok(ProductState::from_segment(segment))
}

fn tangent_head(
    params: &ModelParams,
    dom: &SpectralDomain,
    coeffs: &StepCoeffs,
    weights: Option<&[f64]>,
    w_seg: &HistorySegment,
) -> ModalVector {
    let n = dom.n_modes();
    let mut nvec = match weights {
        Some(w) => apply_jacobian(dom, w, &w_seg.time_mean()),
        None => ModalVector::zeros(n),
    };
    nvec.add_scaled(w_seg.delayed(), -params.a);
    let head = w_seg.latest();
    let mut out = ModalVector::zeros(n);
    for k in 0..n {
        out.coeffs[k] = coeffs.e[k] * head.coeffs[k] + coeffs.c[k] * nvec.coeffs[k];
    }
    out
}

/// Joint stepper for a base trajectory and a set of tangent vectors.
///
/// The nonlinearity weights are evaluated once per step from the base window
/// and shared across the frame.
pub struct VariationalWalker<'a> {
    base: Walker<'a>,
    tangents: Vec<ProductState>,
    steps_per_unit: usize,
}

impl<'a> VariationalWalker<'a> {
    pub fn new(
        flow: &'a Flow,
        ou: &'a StationaryOu,
        base: ProductState,
        frame: &TangentFrame,
        start_cell: i64,
    ) -> Result<Self> {
        let steps_per_unit = ou.path().cells_of(1.0)?;
        if steps_per_unit <= 0 {
            return Err(Error::Domain("unit time shorter than one step".into()));
        }
        for v in &frame.vectors {
            if v.segment.history_nodes() != base.segment.history_nodes() {
                return Err(Error::DimensionMismatch(
                    "frame grid differs from base grid".into(),
                ));
            }
        }
        let base = Walker::original(flow, ou, base, start_cell)?;
        Ok(VariationalWalker {
            base,
            tangents: frame.vectors.clone(),
            steps_per_unit: steps_per_unit as usize,
        })
    }

    pub fn base(&self) -> &ProductState {
        self.base.state()
    }

    pub fn tangents(&self) -> &[ProductState] {
        &self.tangents
    }

    pub fn frame(&self) -> TangentFrame {
        TangentFrame {
            vectors: self.tangents.clone(),
        }
    }

    pub fn steps_per_unit(&self) -> usize {
        self.steps_per_unit
    }

    /// One grid step of base and tangents.
    pub fn step(&mut self) {
        let flow = self.base.flow();
        let weights = if flow.params.b == 0.0 {
            None
        } else {
            Some(jacobian_weights(
                &flow.params,
                &flow.dom,
                &self.base.state().segment,
            ))
        };
        let coeffs = self.base.coeffs().clone();
        for w in &mut self.tangents {
            let head = tangent_head(
                &flow.params,
                &flow.dom,
                &coeffs,
                weights.as_deref(),
                &w.segment,
            );
            w.segment.shift_append(head);
            w.head.coeffs.copy_from_slice(&w.segment.latest().coeffs);
        }
        self.base.step();
    }

    /// Raw propagation without re-orthonormalization.
    pub fn propagate(&mut self, steps: usize) {
        for _ in 0..steps {
            self.step();
        }
    }

    /// Re-orthonormalizes the frame in place, returning the stretches.
    pub fn orthonormalize_frame(&mut self) -> Result<OrthoOutcome> {
        let mut frame = TangentFrame {
            vectors: std::mem::take(&mut self.tangents),
        };
        let out = frame.orthonormalize()?;
        self.tangents = frame.vectors;
        Ok(out)
    }

    /// One unit of time followed by a QR pass.
    pub fn unit(&mut self) -> Result<OrthoOutcome> {
        self.propagate(self.steps_per_unit);
        self.orthonormalize_frame()
    }
}

/// Result of one unit-time linearization along a base point.
#[derive(Clone, Debug)]
pub struct DpsiUnit {
    pub frame: TangentFrame,
    pub stretches: Vec<f64>,
    pub base_next: ProductState,
    pub underflow: bool,
}

/// Propagates an orthonormal frame over one unit of time along the base
/// trajectory and re-orthonormalizes; the returned stretches are the
/// diagonal factors whose logarithms feed the Lyapunov statistics.
pub fn dpsi_unit(
    flow: &Flow,
    ou: &StationaryOu,
    base: &ProductState,
    frame: &TangentFrame,
) -> Result<DpsiUnit> {
    let dev = frame.gram_deviation();
    if dev > 1e-8 {
        return Err(Error::NonOrthonormalFrame { deviation: dev });
    }
    let mut w = VariationalWalker::new(flow, ou, base.clone(), frame, 0)?;
    let out = w.unit()?;
    Ok(DpsiUnit {
        frame: w.frame(),
        stretches: out.stretches,
        base_next: w.base().clone(),
        underflow: out.underflow,
    })
}

/// Configuration of the Lyapunov-statistics estimator.
#[derive(Clone, Copy, Debug)]
pub struct LyapunovConfig {
    /// Frame size `m` (number of exponents).
    pub m: usize,
    /// Unit intervals accumulated per run.
    pub intervals: usize,
    /// Independent driving paths.
    pub paths: usize,
    /// Attractor base points per path (the supremum surrogate).
    pub base_points: usize,
    /// Warm-up units discarded before accumulation.
    pub warmup: usize,
    /// Pullback time of the base cloud.
    pub cloud_time: f64,
    /// Initial-ball radius for the clouds.
    pub cloud_radius: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        LyapunovConfig {
            m: 6,
            intervals: 200,
            paths: 32,
            base_points: 32,
            warmup: 4,
            cloud_time: 20.0,
            cloud_radius: 8.0,
        }
    }
}

/// Accumulated `q_j` statistics.
#[derive(Clone, Debug, Serialize)]
pub struct LyapunovStats {
    pub m: usize,
    pub intervals: usize,
    /// Per-path `q_j` (already maximized over base points).
    pub per_path_q: Vec<Vec<f64>>,
    /// Monte Carlo mean over paths.
    pub q_mean: Vec<f64>,
    /// Standard error of the mean.
    pub q_se: Vec<f64>,
    /// Same statistic over the first half of the intervals, the convergence
    /// diagnostic.
    pub q_mean_half: Vec<f64>,
    /// Mean over paths of the spread (max - min) across base points.
    pub base_spread: Vec<f64>,
    /// Underflow-and-reseed events across all runs.
    pub underflow_events: usize,
}

impl LyapunovStats {
    /// Builds statistics from raw per-path `q_j` values (no time averaging).
    pub fn from_per_path(per_path_q: Vec<Vec<f64>>) -> LyapunovStats {
        let m = per_path_q.first().map_or(0, |q| q.len());
        let (q_mean, q_se) = reduce_paths(&per_path_q, m);
        LyapunovStats {
            m,
            intervals: 0,
            q_mean_half: q_mean.clone(),
            base_spread: vec![0.0; m],
            underflow_events: 0,
            per_path_q,
            q_mean,
            q_se,
        }
    }
}

fn reduce_paths(per_path: &[Vec<f64>], m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut q_mean = Vec::with_capacity(m);
    let mut q_se = Vec::with_capacity(m);
    for j in 0..m {
        let col: Vec<f64> = per_path.iter().map(|q| q[j]).collect();
        q_mean.push(mean(&col));
        q_se.push((sample_variance(&col) / col.len() as f64).sqrt());
    }
    (q_mean, q_se)
}

struct LyapunovRun {
    q: Vec<f64>,
    q_half: Vec<f64>,
    underflows: usize,
}

fn lyapunov_run(
    flow: &Flow,
    ou: &StationaryOu,
    base: &ProductState,
    frame_seed: u64,
    cfg: &LyapunovConfig,
) -> Result<LyapunovRun> {
    let m_nodes = base.segment.history_nodes();
    let frame = TangentFrame::seeded(
        frame_seed,
        cfg.m,
        flow.params.tau,
        m_nodes,
        flow.dom.n_modes(),
    )?;
    let mut w = VariationalWalker::new(flow, ou, base.clone(), &frame, 0)?;
    for _ in 0..cfg.warmup {
        w.unit()?;
    }
    let mut log_sums = vec![0.0; cfg.m];
    let mut half = vec![0.0; cfg.m];
    let mut underflows = 0;
    for interval in 0..cfg.intervals {
        let out = w.unit()?;
        if out.underflow {
            underflows += 1;
        }
        for (acc, s) in log_sums.iter_mut().zip(&out.stretches) {
            *acc += s.ln();
        }
        if interval + 1 == cfg.intervals / 2 {
            half.copy_from_slice(&log_sums);
        }
    }
    let to_q = |sums: &[f64], k: usize| -> Vec<f64> {
        let mut q = Vec::with_capacity(cfg.m);
        let mut acc = 0.0;
        for s in sums {
            acc += s / k.max(1) as f64;
            q.push(acc);
        }
        q
    };
    Ok(LyapunovRun {
        q: to_q(&log_sums, cfg.intervals),
        q_half: to_q(&half, cfg.intervals / 2),
        underflows,
    })
}

/// Estimates the `q_j` statistics over a path ensemble.
///
/// Per path, base points are drawn from a converged pullback cloud and the
/// supremum over the attractor is approximated by the maximum over those
/// points; the expectation is the Monte Carlo mean over paths. Refuses to
/// run when the cloud has not converged (semidistance between the `T` and
/// `2T` clouds above tolerance).
pub fn estimate_q(flow: &Flow, ou: &StationaryOu, cfg: &LyapunovConfig) -> Result<LyapunovStats> {
    flow.params.validate_dissipativity()?;
    if cfg.m == 0 {
        return Err(Error::Domain("frame size m must be at least 1".into()));
    }
    if cfg.intervals < 50 {
        return Err(Error::Domain(format!(
            "need at least 50 unit intervals, got {}",
            cfg.intervals
        )));
    }
    if cfg.paths == 0 || cfg.base_points == 0 {
        return Err(Error::Domain(
            "paths and base_points must be positive".into(),
        ));
    }
    // Per-path clouds with a convergence check.
    let setups: Result<Vec<(StationaryOu, Vec<ProductState>)>> = map_indexed(cfg.paths, |p| {
        let ou_p = ou.reseeded(derive_seed(ou.path().seed(), 1 + p as u64));
        let clouds = pullback_evolve(
            flow,
            &ou_p,
            &[cfg.cloud_time, 2.0 * cfg.cloud_time],
            cfg.base_points,
            cfg.cloud_radius,
        )?;
        let gap = hausdorff_semidist(&clouds[0].states, &clouds[1].states)?;
        let scale = 1.0 + clouds[1].states.iter().map(h_norm).fold(0.0, f64::max);
        if gap > 1e-3 * scale {
            return Err(Error::NotConverged(format!(
                "attractor cloud at T = {} still moving (semidistance {gap:.3e})",
                cfg.cloud_time
            )));
        }
        Ok((ou_p, clouds.into_iter().nth(1).expect("two clouds").states))
    })
    .into_iter()
    .collect();
    let setups = setups?;

    let runs: Result<Vec<LyapunovRun>> = map_indexed(cfg.paths * cfg.base_points, |i| {
        let p = i / cfg.base_points;
        let b = i % cfg.base_points;
        let (ou_p, bases) = &setups[p];
        let frame_seed = derive_seed(ou_p.path().seed(), 0x4c59 + b as u64);
        lyapunov_run(flow, ou_p, &bases[b], frame_seed, cfg)
    })
    .into_iter()
    .collect();
    let runs = runs?;

    let mut per_path_q = Vec::with_capacity(cfg.paths);
    let mut per_path_half = Vec::with_capacity(cfg.paths);
    let mut base_spread = vec![0.0; cfg.m];
    let mut underflow_events = 0;
    for p in 0..cfg.paths {
        let chunk = &runs[p * cfg.base_points..(p + 1) * cfg.base_points];
        underflow_events += chunk.iter().map(|r| r.underflows).sum::<usize>();
        let mut q = vec![f64::NEG_INFINITY; cfg.m];
        let mut q_half = vec![f64::NEG_INFINITY; cfg.m];
        for j in 0..cfg.m {
            let col: Vec<f64> = chunk.iter().map(|r| r.q[j]).collect();
            q[j] = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            base_spread[j] += (q[j] - lo) / cfg.paths as f64;
            q_half[j] = chunk
                .iter()
                .map(|r| r.q_half[j])
                .fold(f64::NEG_INFINITY, f64::max);
        }
        per_path_q.push(q);
        per_path_half.push(q_half);
    }
    let (q_mean, q_se) = reduce_paths(&per_path_q, cfg.m);
    let (q_mean_half, _) = reduce_paths(&per_path_half, cfg.m);
    Ok(LyapunovStats {
        m: cfg.m,
        intervals: cfg.intervals,
        per_path_q,
        q_mean,
        q_se,
        q_mean_half,
        base_spread,
        underflow_events,
    })
}

/// Dimension bounds derived from the `q_j` statistics.
#[derive(Clone, Debug, Serialize)]
pub struct DimensionReport {
    pub q_mean: Vec<f64>,
    pub q_se: Vec<f64>,
    /// Smallest `d` whose upper confidence bound `q_d + 2 se` is negative.
    pub d_h_bound: Option<usize>,
    /// Fractal-dimension threshold
    /// `E[max_{j <= d} (d q_j - j q_d)] / (-E q_d)`, with the per-path
    /// maximum inside the expectation.
    pub gamma_bound: Option<f64>,
    /// Box-counting cross-check, filled by the dimension pipeline.
    pub box_estimate: Option<f64>,
    pub diagnostics: Vec<String>,
}

/// Evaluates the dimension bounds from accumulated statistics.
pub fn dimension_bounds(stats: &LyapunovStats) -> DimensionReport {
    let mut diagnostics = Vec::new();
    let d_h_bound = (0..stats.m).find(|&j| stats.q_mean[j] + 2.0 * stats.q_se[j] < 0.0);
    let gamma_bound = match d_h_bound {
        None => {
            diagnostics.push(format!(
                "no negative q_d within m = {}; bound not established at this frame size",
                stats.m
            ));
            None
        }
        Some(d_idx) => {
            let d = d_idx + 1;
            let numerator = mean(
                &stats
                    .per_path_q
                    .iter()
                    .map(|q| {
                        (0..d)
                            .map(|j_idx| d as f64 * q[j_idx] - (j_idx + 1) as f64 * q[d_idx])
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect::<Vec<f64>>(),
            );
            let denominator = -stats.q_mean[d_idx];
            Some(numerator / denominator)
        }
    };
    if stats.underflow_events > 0 {
        diagnostics.push(format!(
            "{} QR underflow reseeds during accumulation",
            stats.underflow_events
        ));
    }
    DimensionReport {
        q_mean: stats.q_mean.clone(),
        q_se: stats.q_se.clone(),
        d_h_bound: d_h_bound.map(|i| i + 1),
        gamma_bound,
        box_estimate: None,
        diagnostics,
    }
}

/// Trace of the linearized generator over the frame's span,
/// `sum_i <G u_i, u_i>` with the generator in trail form: transport
/// boundary term on the segment, `(A - mu) - a eval(-tau) + Df(base)` on
/// the head.
pub fn trace_q(
    params: &ModelParams,
    dom: &SpectralDomain,
    base_seg: &HistorySegment,
    frame: &TangentFrame,
) -> Result<f64> {
    if frame.is_empty() {
        return Ok(0.0);
    }
    let dev = frame.gram_deviation();
    if dev > 1e-8 {
        return Err(Error::NonOrthonormalFrame { deviation: dev });
    }
    let weights = if params.b == 0.0 {
        None
    } else {
        Some(jacobian_weights(params, dom, base_seg))
    };
    let mut trace = 0.0;
    for u in &frame.vectors {
        let head = &u.head;
        let oldest = u.segment.delayed();
        // Transport part, telescoped to the boundary.
        trace += 0.5 * (head.dot(head) - oldest.dot(oldest));
        // Head drift against the head.
        let mut drift = ModalVector::zeros(dom.n_modes());
        for (k, &lam) in dom.eigenvalues().iter().enumerate() {
            drift.coeffs[k] = (lam - params.mu) * head.coeffs[k];
        }
        drift.add_scaled(oldest, -params.a);
        if let Some(w) = &weights {
            let jac = apply_jacobian(dom, w, &u.segment.time_mean());
            drift.add_scaled(&jac, 1.0);
        }
        trace += drift.dot(head);
    }
    Ok(trace)
}

/// Differentiability-order measurement.
#[derive(Clone, Debug, Serialize)]
pub struct DifferentiabilityReport {
    /// Log-log slope of the remainder against the perturbation size.
    pub slope: f64,
    /// `slope - 1`; the differentiability order exponent.
    pub alpha_est: f64,
    /// `max r(h)/h^2`, floored at one.
    pub k_est: f64,
    /// `(h, remainder)` pairs that entered the fit.
    pub samples: Vec<(f64, f64)>,
    /// Scales excluded for sitting at the precision floor.
    pub excluded: usize,
}

/// Measures the Taylor remainder
/// `r(h) = ||Psi(1, chi + h e) - Psi(1, chi) - h DPsi e||` over a list of
/// scales and fits its order. Scales whose remainder sits below `1e-13`
/// are excluded from the fit.
pub fn differentiability_check(
    flow: &Flow,
    ou: &StationaryOu,
    chi: &ProductState,
    direction: &ProductState,
    h_scales: &[f64],
) -> Result<DifferentiabilityReport> {
    let norm = h_norm(direction);
    if norm == 0.0 {
        return Err(Error::Domain("zero perturbation direction".into()));
    }
    let e = direction.scaled(1.0 / norm);
    let frame = TangentFrame {
        vectors: vec![e.clone()],
    };
    let mut w = VariationalWalker::new(flow, ou, chi.clone(), &frame, 0)?;
    w.propagate(w.steps_per_unit());
    let de = w.tangents()[0].clone();
    let psi_chi = flow.cocycle_psi(ou, 1.0, chi)?;
    let mut samples = Vec::new();
    let mut excluded = 0;
    let mut k_est = 1.0f64;
    for &h in h_scales {
        let perturbed = chi.add(&e.scaled(h))?;
        let psi_p = flow.cocycle_psi(ou, 1.0, &perturbed)?;
        let r = h_norm(&psi_p.sub(&psi_chi)?.sub(&de.scaled(h))?);
        if r < 1e-13 {
            excluded += 1;
            continue;
        }
        k_est = k_est.max(r / (h * h));
        samples.push((h, r));
    }
    if samples.len() < 2 {
        return Err(Error::WindowTooShort(
            "all remainder scales sit at the precision floor".into(),
        ));
    }
    let x: Vec<f64> = samples.iter().map(|&(h, _)| h.ln()).collect();
    let y: Vec<f64> = samples.iter().map(|&(_, r)| r.ln()).collect();
    let slope = linfit_slope(&x, &y);
    Ok(DifferentiabilityReport {
        slope,
        alpha_est: slope - 1.0,
        k_est,
        samples,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoisePath, NoiseShape};

    fn flow_with(
        n: usize,
        m_nodes: usize,
        a: f64,
        b: f64,
        amps: &[(usize, f64)],
        eigenvalues: Option<Vec<f64>>,
    ) -> (Flow, StationaryOu, usize) {
        let dom = match eigenvalues {
            Some(ev) => SpectralDomain::from_eigenvalues(ev).unwrap(),
            None => SpectralDomain::dirichlet_laplacian(n),
        };
        let params = ModelParams::new(1.0, a, b, 1.0, dom.spectral_bound()).unwrap();
        let spec: Vec<Vec<(usize, f64)>> = amps.iter().map(|&p| vec![p]).collect();
        let shapes = if amps.is_empty() {
            NoiseShape::none(dom.n_modes())
        } else {
            NoiseShape::from_pairs(&dom, &spec).unwrap()
        };
        let flow = Flow::new(params, dom, shapes).unwrap();
        let path = NoisePath::new(77, 1.0 / m_nodes as f64, amps.len()).unwrap();
        let ou = StationaryOu::new(path, 1.0, 40.0).unwrap();
        (flow, ou, m_nodes)
    }

    fn default_flow() -> (Flow, StationaryOu, usize) {
        flow_with(8, 32, 0.25, 0.5, &[(1, 0.3), (2, 0.1)], None)
    }

    fn random_state(tau: f64, m: usize, n: usize, seed: u64) -> ProductState {
        let nodes = (0..=m)
            .map(|i| ModalVector {
                coeffs: (0..n)
                    .map(|k| 0.4 * keyed_normal(seed, i as u64, k as i64))
                    .collect(),
            })
            .collect();
        ProductState::from_segment(HistorySegment::from_nodes(tau, nodes).unwrap())
    }

    #[test]
    fn linear_tangent_equals_flow_differences() {
        // With b = 0 the flow is affine, so differences of trajectories
        // follow the tangent dynamics exactly.
        let (flow, ou, m) = flow_with(8, 32, 0.25, 0.0, &[(1, 0.3), (2, 0.1)], None);
        let chi = random_state(1.0, m, 8, 1);
        let delta = random_state(1.0, m, 8, 2).scaled(0.01);
        let t = 2.0;
        let a = flow.cocycle_psi(&ou, t, &chi).unwrap();
        let b = flow.cocycle_psi(&ou, t, &chi.add(&delta).unwrap()).unwrap();
        let diff = b.sub(&a).unwrap();
        let frame = TangentFrame {
            vectors: vec![delta.clone()],
        };
        let mut w = VariationalWalker::new(&flow, &ou, chi, &frame, 0).unwrap();
        w.propagate(2 * w.steps_per_unit());
        let propagated = &w.tangents()[0];
        let err = h_norm(&diff.sub(propagated).unwrap());
        assert!(err <= 1e-12 * (1.0 + h_norm(propagated)), "err {err}");
    }

    #[test]
    fn zero_tangent_stays_zero() {
        let (flow, ou, m) = default_flow();
        let base = random_state(1.0, m, 8, 3);
        let zero = ProductState::zeros(1.0, m, 8).unwrap();
        let frame = TangentFrame { vectors: vec![zero] };
        let mut w = VariationalWalker::new(&flow, &ou, base, &frame, 0).unwrap();
        w.propagate(64);
        assert!(w.tangents()[0]
            .segment
            .nodes()
            .all(|v| v.coeffs.iter().all(|&c| c == 0.0)));
    }

    #[test]
    fn tangent_step_matches_walker_step() {
        let (flow, ou, m) = default_flow();
        let base = random_state(1.0, m, 8, 21);
        let dirv = random_state(1.0, m, 8, 22);
        let frame = TangentFrame {
            vectors: vec![dirv.clone()],
        };
        let mut w = VariationalWalker::new(&flow, &ou, base.clone(), &frame, 0).unwrap();
        let manual = tangent_step(&flow.params, &flow.dom, &base.segment, &dirv).unwrap();
        w.step();
        assert_eq!(&manual, &w.tangents()[0]);
    }

    #[test]
    fn finite_difference_jacobian_oracle() {
        let (flow, ou, m) = default_flow();
        let chi = random_state(1.0, m, 8, 4);
        for trial in 0..5u64 {
            let e = {
                let raw = random_state(1.0, m, 8, 10 + trial);
                raw.scaled(1.0 / h_norm(&raw))
            };
            let frame = TangentFrame {
                vectors: vec![e.clone()],
            };
            let mut w = VariationalWalker::new(&flow, &ou, chi.clone(), &frame, 0).unwrap();
            w.propagate(w.steps_per_unit());
            let de = w.tangents()[0].clone();
            let psi0 = flow.cocycle_psi(&ou, 1.0, &chi).unwrap();
            for (delta, tol) in [(1e-6, 1e-4), (1e-3, 1e-2)] {
                let chi_p = chi.add(&e.scaled(delta)).unwrap();
                let psi_p = flow.cocycle_psi(&ou, 1.0, &chi_p).unwrap();
                let fd = psi_p.sub(&psi0).unwrap().scaled(1.0 / delta);
                let rel = h_norm(&fd.sub(&de).unwrap()) / h_norm(&de);
                assert!(rel < tol, "delta {delta}: relative error {rel}");
            }
        }
    }

    #[test]
    fn diagonal_stretches_match_exponents() {
        // Delay-free linear case: after the trail profile equilibrates, the
        // per-unit stretch of head mode k is exp(-(k^2 + mu)).
        let (flow, ou, m) = flow_with(8, 32, 0.0, 0.0, &[], None);
        let base = ProductState::zeros(1.0, m, 8).unwrap();
        let frame = TangentFrame::head_modes(8, 1.0, m, 8);
        let mut w = VariationalWalker::new(&flow, &ou, base, &frame, 0).unwrap();
        w.unit().unwrap();
        w.unit().unwrap();
        let out = w.unit().unwrap();
        for (k, s) in out.stretches.iter().enumerate() {
            let expect = -(((k + 1) * (k + 1)) as f64 + 1.0);
            assert!(
                (s.ln() - expect).abs() < 1e-6,
                "mode {}: log stretch {} vs {expect}",
                k + 1,
                s.ln()
            );
        }
    }

    #[test]
    fn zero_duration_keeps_unit_stretches() {
        let (flow, ou, m) = default_flow();
        let base = random_state(1.0, m, 8, 5);
        let frame = TangentFrame::seeded(9, 3, 1.0, m, 8).unwrap();
        let mut w = VariationalWalker::new(&flow, &ou, base, &frame, 0).unwrap();
        w.propagate(0);
        let out = w.orthonormalize_frame().unwrap();
        for s in out.stretches {
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    fn newton_characteristic_root(alpha: f64, beta: f64, tau: f64) -> f64 {
        // Root of s = alpha + beta exp(-s tau).
        let mut s = -0.5;
        for _ in 0..100 {
            let f = s - alpha - beta * (-s * tau).exp();
            let fp = 1.0 + beta * tau * (-s * tau).exp();
            s -= f / fp;
        }
        s
    }

    #[test]
    fn delayed_scalar_dominant_exponent() {
        // u' = -u + 0.25 u(t-1): dominant exponent against the Newton root
        // of s = -1 + 0.25 exp(-s).
        let (flow, ou, m) = flow_with(1, 64, -0.25, 0.0, &[], Some(vec![0.0]));
        let base = ProductState::zeros(1.0, m, 1).unwrap();
        let frame = TangentFrame::seeded(3, 1, 1.0, m, 1).unwrap();
        let mut w = VariationalWalker::new(&flow, &ou, base, &frame, 0).unwrap();
        for _ in 0..8 {
            w.unit().unwrap();
        }
        let mut acc = 0.0;
        let k = 50;
        for _ in 0..k {
            acc += w.unit().unwrap().stretches[0].ln();
        }
        let measured = acc / k as f64;
        let root = newton_characteristic_root(-1.0, 0.25, 1.0);
        assert!(
            (measured - root).abs() < 2e-2,
            "measured {measured} vs root {root}"
        );
    }

    #[test]
    fn linear_spectrum_and_noise_independence() {
        // q_j = -sum_{i<=j} (k_i^2 + mu) for the delay-free linear case, and
        // additive noise does not alter the linearization at all.
        let run = |flow: &Flow, ou: &StationaryOu, m: usize| -> Vec<f64> {
            let base = ProductState::zeros(1.0, m, 8).unwrap();
            let frame = TangentFrame::head_modes(3, 1.0, m, 8);
            let mut w = VariationalWalker::new(flow, ou, base, &frame, 0).unwrap();
            w.unit().unwrap();
            w.unit().unwrap();
            let mut sums = vec![0.0; 3];
            for _ in 0..5 {
                let out = w.unit().unwrap();
                for (acc, s) in sums.iter_mut().zip(&out.stretches) {
                    *acc += s.ln() / 5.0;
                }
            }
            let mut q = vec![0.0; 3];
            let mut acc = 0.0;
            for j in 0..3 {
                acc += sums[j];
                q[j] = acc;
            }
            q
        };
        let (flow, ou, m) = flow_with(8, 32, 0.0, 0.0, &[], None);
        let q = run(&flow, &ou, m);
        for (j, expect) in [(0usize, -2.0), (1, -7.0), (2, -17.0)] {
            assert!((q[j] - expect).abs() < 1e-6, "q_{} = {}", j + 1, q[j]);
        }
        let (flow_n, ou_n, m) = flow_with(8, 32, 0.0, 0.0, &[(1, 0.3), (2, 0.1)], None);
        let qn = run(&flow_n, &ou_n, m);
        for j in 0..3 {
            assert_eq!(q[j].to_bits(), qn[j].to_bits());
        }
    }

    #[test]
    fn estimate_q_default_instance_decreases() {
        let (flow, ou, _) = default_flow();
        let cfg = LyapunovConfig {
            m: 4,
            intervals: 50,
            paths: 2,
            base_points: 2,
            warmup: 2,
            cloud_time: 10.0,
            cloud_radius: 8.0,
        };
        let stats = estimate_q(&flow, &ou, &cfg).unwrap();
        assert!(stats.q_mean[0] < 0.0, "q_1 = {}", stats.q_mean[0]);
        for j in 1..stats.m {
            assert!(
                stats.q_mean[j] < stats.q_mean[j - 1],
                "q not strictly decreasing: {:?}",
                stats.q_mean
            );
        }
        // Convergence diagnostic within 5%.
        for j in 0..stats.m {
            let rel = (stats.q_mean[j] - stats.q_mean_half[j]).abs() / stats.q_mean[j].abs();
            assert!(rel < 0.05, "half-time drift {rel} at j = {j}");
        }
    }

    #[test]
    fn dimension_bounds_cases() {
        // Linear diagonal case: d = 1 and the gamma formula degenerates to 0.
        let linear = LyapunovStats::from_per_path(vec![vec![-2.0, -7.0, -17.0]]);
        let rep = dimension_bounds(&linear);
        assert_eq!(rep.d_h_bound, Some(1));
        assert_eq!(rep.gamma_bound, Some(0.0));

        // Hand-evaluated example: q = (0.5, -0.5) gives d = 2 and
        // gamma = max(2 q1 - q2, 0) / (-q2) = 1.5 / 0.5 = 3.
        let hand = LyapunovStats::from_per_path(vec![vec![0.5, -0.5]]);
        let rep = dimension_bounds(&hand);
        assert_eq!(rep.d_h_bound, Some(2));
        assert_eq!(rep.gamma_bound, Some(3.0));

        // No negative q within the frame: bound not established.
        let positive = LyapunovStats::from_per_path(vec![vec![0.5, 0.2]]);
        let rep = dimension_bounds(&positive);
        assert_eq!(rep.d_h_bound, None);
        assert_eq!(rep.gamma_bound, None);
        assert!(!rep.diagnostics.is_empty());
    }

    #[test]
    fn trace_on_diagonal_frames() {
        let (flow, _, m) = flow_with(8, 32, 0.0, 0.0, &[], None);
        let base = HistorySegment::zeros(1.0, m, 8).unwrap();
        let dt = 1.0 / m as f64;

        // Empty frame.
        let empty = TangentFrame::head_modes(0, 1.0, m, 8);
        assert_eq!(trace_q(&flow.params, &flow.dom, &base, &empty).unwrap(), 0.0);

        // Head-spike frame: exact evaluation of the quadratic form. Head
        // consistency puts e_k on the boundary node, which adds the
        // transport boundary term 1/2 under the state's H-normalization.
        for frame_size in [2usize, 4] {
            let frame = TangentFrame::head_modes(frame_size, 1.0, m, 8);
            let tr = trace_q(&flow.params, &flow.dom, &base, &frame).unwrap();
            let expect: f64 = (1..=frame_size)
                .map(|k| (-((k * k) as f64) - 1.0 + 0.5) / (1.0 + 0.5 * dt))
                .sum();
            assert!((tr - expect).abs() < 1e-12, "trace {tr} vs {expect}");
        }

        // Equilibrated trail profiles: the trace reproduces the exponent sum
        // sum (lambda_k - mu) up to quadrature error.
        for frame_size in [1usize, 2, 3] {
            let frame = TangentFrame::trail_profiles(&flow.dom, 1.0, frame_size, 1.0, m);
            let tr = trace_q(&flow.params, &flow.dom, &base, &frame).unwrap();
            let expect: f64 = (1..=frame_size).map(|k| -((k * k) as f64) - 1.0).sum();
            let rel = (tr - expect).abs() / expect.abs();
            assert!(rel < 0.05, "profile trace {tr} vs {expect} (rel {rel})");
        }
    }

    #[test]
    fn trace_requires_orthonormal_frame() {
        let (flow, _, m) = flow_with(8, 32, 0.0, 0.0, &[], None);
        let base = HistorySegment::zeros(1.0, m, 8).unwrap();
        let mut frame = TangentFrame::head_modes(2, 1.0, m, 8);
        frame.vectors[1] = frame.vectors[0].clone();
        assert!(matches!(
            trace_q(&flow.params, &flow.dom, &base, &frame),
            Err(Error::NonOrthonormalFrame { .. })
        ));
    }

    #[test]
    fn liouville_identity_on_the_linear_case() {
        // Time-averaged trace against mean QR log-stretch sums, both from
        // the same run.
        let (flow, ou, m) = flow_with(8, 32, 0.0, 0.0, &[], None);
        let base = ProductState::zeros(1.0, m, 8).unwrap();
        let frame = TangentFrame::head_modes(3, 1.0, m, 8);
        let mut w = VariationalWalker::new(&flow, &ou, base, &frame, 0).unwrap();
        w.unit().unwrap();
        w.unit().unwrap();
        let k = 50;
        let mut log_sum = 0.0;
        let mut trace_sum = 0.0;
        let mut samples = 0usize;
        for _ in 0..k {
            for _ in 0..w.steps_per_unit() {
                let mut copy = w.frame();
                copy.orthonormalize().unwrap();
                trace_sum += trace_q(&flow.params, &flow.dom, &w.base().segment, &copy).unwrap();
                samples += 1;
                w.step();
            }
            let out = w.orthonormalize_frame().unwrap();
            log_sum += out.stretches.iter().map(|s| s.ln()).sum::<f64>();
        }
        let mean_logs = log_sum / k as f64;
        let mean_trace = trace_sum / samples as f64;
        let rel = (mean_trace - mean_logs).abs() / mean_logs.abs();
        assert!(
            rel < 0.05,
            "trace {mean_trace} vs log stretches {mean_logs} (rel {rel})"
        );
    }

    #[test]
    fn differentiability_orders() {
        // Affine case: the remainder vanishes to rounding.
        let (flow_lin, ou_lin, m) = flow_with(8, 32, 0.25, 0.0, &[(1, 0.3)], None);
        let chi = random_state(1.0, m, 8, 6);
        let dir = random_state(1.0, m, 8, 7);
        let frame = TangentFrame {
            vectors: vec![dir.scaled(1.0 / h_norm(&dir))],
        };
        let mut w = VariationalWalker::new(&flow_lin, &ou_lin, chi.clone(), &frame, 0).unwrap();
        w.propagate(w.steps_per_unit());
        let de = w.tangents()[0].clone();
        let psi0 = flow_lin.cocycle_psi(&ou_lin, 1.0, &chi).unwrap();
        let h = 1e-3;
        let chi_p = chi.add(&frame.vectors[0].scaled(h)).unwrap();
        let psi_p = flow_lin.cocycle_psi(&ou_lin, 1.0, &chi_p).unwrap();
        let r = h_norm(&psi_p.sub(&psi0).unwrap().sub(&de.scaled(h)).unwrap());
        assert!(r < 1e-12, "linear remainder {r}");

        // Default instance: remainder slope 2 within 0.1, K floored at 1.
        let (flow, ou, m) = default_flow();
        let chi = random_state(1.0, m, 8, 8);
        let scales: Vec<f64> = (0..7).map(|i| 1e-2 * 10f64.powf(-0.5 * i as f64)).collect();
        let rep = differentiability_check(&flow, &ou, &chi, &dir, &scales).unwrap();
        assert!(
            (rep.slope - 2.0).abs() <= 0.1,
            "remainder slope {}",
            rep.slope
        );
        assert!(rep.alpha_est >= 0.9);
        assert!(rep.k_est >= 1.0);
    }
}

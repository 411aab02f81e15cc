//! Reproducible two-sided Wiener increments and the stationary
//! Ornstein-Uhlenbeck conjugation process.
//!
//! Every Gaussian draw is a pure function of `(seed, stream, absolute grid
//! cell)` through a counter-based generator, so shifting a path (`theta_s`)
//! is plain index arithmetic and replaying any past noise window is exact.
//! The stationary OU values `z_j(theta_t omega_j)` are evaluated the same
//! way: each value is defined by a fixed burn-in recursion anchored at
//! absolute block boundaries, which makes the value at a cell independent of
//! the trajectory that asks for it. Two runs that look at the same cell
//! execute identical arithmetic, which is what makes the cocycle property of
//! the dynamics bitwise.

use crate::space::{ModalVector, SpectralDomain};
use crate::{Error, Result};

const GRID_ALIGN_TOL: f64 = 1e-9;

#[inline]
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Standard normal draw keyed by `(seed, stream, index)`.
///
/// Deterministic and stateless: the same key always returns the same value,
/// distinct keys are independent. Box-Muller on two mixed words.
pub fn keyed_normal(seed: u64, stream: u64, index: i64) -> f64 {
    let k1 = splitmix64(seed ^ splitmix64(stream.wrapping_add(0xA0761D6478BD642F)));
    let k2 = splitmix64(k1 ^ (index as u64));
    let k3 = splitmix64(k2 ^ 0xD1B54A32D192ED03);
    // u1 in (0, 1], u2 in [0, 1)
    let u1 = ((k2 >> 11) + 1) as f64 * (1.0 / 9007199254740992.0);
    let u2 = (k3 >> 11) as f64 * (1.0 / 9007199254740992.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform draw in `[0, 1)` keyed like [`keyed_normal`].
pub fn keyed_uniform(seed: u64, stream: u64, index: i64) -> f64 {
    let k1 = splitmix64(seed ^ splitmix64(stream.wrapping_add(0x9FB21C651E98DF25)));
    let k2 = splitmix64(k1 ^ (index as u64));
    (k2 >> 11) as f64 * (1.0 / 9007199254740992.0)
}

/// Derives an independent seed for a sub-stream (ensemble member, path id).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0xE7037ED1A0B428DB)))
}

/// Two-sided Wiener increment source on a uniform grid.
///
/// Cell `n` covers `[n h, (n+1) h)` in path-local time; `origin_shift`
/// realizes the Wiener shift `theta_s` for grid-aligned `s`. Immutable and
/// cheap to clone.
#[derive(Clone, Debug)]
pub struct NoisePath {
    seed: u64,
    step: f64,
    m: usize,
    origin_shift: i64,
}

impl NoisePath {
    pub fn new(seed: u64, step: f64, m: usize) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::Domain(format!("step must be positive, got {step}")));
        }
        Ok(NoisePath {
            seed,
            step,
            m,
            origin_shift: 0,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn components(&self) -> usize {
        self.m
    }

    pub fn origin_shift(&self) -> i64 {
        self.origin_shift
    }

    /// Converts a grid-aligned time to a cell count. The tolerance scales
    /// with the cell count so long accumulated times stay aligned.
    pub fn cells_of(&self, t: f64) -> Result<i64> {
        let x = t / self.step;
        if (x - x.round()).abs() > GRID_ALIGN_TOL * x.abs().max(1.0) {
            return Err(Error::MisalignedTime {
                time: t,
                step: self.step,
            });
        }
        Ok(x.round() as i64)
    }

    /// The shifted path `theta_s omega`; its cell `n` reads this path's cell
    /// `n + s/step`. Shifts compose additively.
    pub fn shifted(&self, s: f64) -> Result<NoisePath> {
        let cells = self.cells_of(s)?;
        Ok(NoisePath {
            origin_shift: self.origin_shift + cells,
            ..self.clone()
        })
    }

    #[inline]
    pub(crate) fn abs_cell(&self, n: i64) -> i64 {
        n + self.origin_shift
    }

    /// Standard normal for component `j`, cell `n` (unchecked component).
    #[inline]
    pub(crate) fn standard_normal(&self, j: usize, n: i64) -> f64 {
        keyed_normal(self.seed, j as u64, self.abs_cell(n))
    }

    /// Wiener increment of component `j` over cell `n`: `N(0, step)`.
    pub fn wiener_increment(&self, j: usize, n: i64) -> Result<f64> {
        if j >= self.m {
            return Err(Error::IndexOutOfRange {
                index: j,
                size: self.m,
            });
        }
        Ok(self.standard_normal(j, n) * self.step.sqrt())
    }
}

/// OU values `z_j` at a grid time.
#[derive(Clone, Debug, PartialEq)]
pub struct OUState {
    pub values: Vec<f64>,
    pub mu: f64,
    pub time: f64,
}

impl OUState {
    pub fn zeros(m: usize, mu: f64, time: f64) -> Self {
        OUState {
            values: vec![0.0; m],
            mu,
            time,
        }
    }

    /// Noise-free evolution: each value decays by exactly `exp(-mu dt)`.
    pub fn decay(&self, dt: f64) -> OUState {
        let factor = (-self.mu * dt).exp();
        OUState {
            values: self.values.iter().map(|z| z * factor).collect(),
            mu: self.mu,
            time: self.time + dt,
        }
    }
}

/// Standard deviation of the exact OU one-step innovation,
/// `sqrt((1 - e^{-2 mu h}) / (2 mu))`.
pub fn ou_noise_scale(mu: f64, h: f64) -> f64 {
    ((-(-2.0 * mu * h).exp_m1()) / (2.0 * mu)).sqrt()
}

/// One exact OU update over the grid cell starting at `z.time`.
///
/// The innovation is the cell's keyed draw rescaled to the exact conditional
/// variance, so the update is distributionally exact for any step size and
/// remains a pure function of the cell.
pub fn ou_step(z: &OUState, path: &NoisePath) -> Result<OUState> {
    let cell = path.cells_of(z.time)?;
    let h = path.step();
    let decay = (-z.mu * h).exp();
    let scale = ou_noise_scale(z.mu, h);
    let values = z
        .values
        .iter()
        .enumerate()
        .map(|(j, v)| decay * v + scale * path.standard_normal(j, cell))
        .collect();
    Ok(OUState {
        values,
        mu: z.mu,
        time: z.time + h,
    })
}

/// Approximates the stationary value `z(theta_t0 omega)` by integrating from
/// zero at `t0 - burn`; the truncation error is `exp(-mu burn)` times the
/// stationary scale.
pub fn ou_pullback_init(path: &NoisePath, mu: f64, t0: f64, burn: f64) -> Result<OUState> {
    if burn < 0.0 {
        return Err(Error::Domain(format!("burn must be nonnegative, got {burn}")));
    }
    let c0 = path.cells_of(t0)?;
    let steps = (burn / path.step()).round() as i64;
    let h = path.step();
    let decay = (-mu * h).exp();
    let scale = ou_noise_scale(mu, h);
    let mut values = vec![0.0; path.components()];
    for cell in (c0 - steps)..c0 {
        for (j, v) in values.iter_mut().enumerate() {
            *v = decay * *v + scale * path.standard_normal(j, cell);
        }
    }
    Ok(OUState {
        values,
        mu,
        time: t0,
    })
}

/// Stationary OU process sampled as a pure function of the absolute grid
/// cell.
///
/// The value at cell `n` is defined by the exact OU recursion started from
/// zero `burn_steps` cells before the enclosing anchor (anchors sit at
/// absolute multiples of `burn_steps`), then advanced to `n`. Sequential
/// scans pay an amortized two updates per cell; the definition never depends
/// on where a trajectory started, so replays under shifts are bitwise.
#[derive(Clone, Debug)]
pub struct StationaryOu {
    path: NoisePath,
    mu: f64,
    burn_steps: i64,
}

impl StationaryOu {
    pub fn new(path: NoisePath, mu: f64, burn: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::invalid_config(
                "mu > 0",
                format!("OU decay rate mu = {mu}"),
            ));
        }
        if !(burn > 0.0) {
            return Err(Error::Domain(format!("burn must be positive, got {burn}")));
        }
        let burn_steps = (burn / path.step()).ceil().max(1.0) as i64;
        Ok(StationaryOu {
            path,
            mu,
            burn_steps,
        })
    }

    pub fn path(&self) -> &NoisePath {
        &self.path
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn components(&self) -> usize {
        self.path.components()
    }

    pub fn step(&self) -> f64 {
        self.path.step()
    }

    pub fn shifted(&self, s: f64) -> Result<StationaryOu> {
        Ok(StationaryOu {
            path: self.path.shifted(s)?,
            ..self.clone()
        })
    }

    /// Same grid and OU parameters on an independent driving path.
    pub fn reseeded(&self, seed: u64) -> StationaryOu {
        StationaryOu {
            path: NoisePath {
                seed,
                origin_shift: 0,
                ..self.path.clone()
            },
            ..self.clone()
        }
    }

    #[inline]
    fn step_coeffs(&self) -> (f64, f64) {
        (
            (-self.mu * self.path.step()).exp(),
            ou_noise_scale(self.mu, self.path.step()),
        )
    }

    /// Values at path-local cell `n` (fresh anchored evaluation).
    pub fn values_at(&self, n: i64) -> Vec<f64> {
        self.cursor(n).values().to_vec()
    }

    /// Sequential cursor positioned at path-local cell `n`.
    pub fn cursor(&self, n: i64) -> OuCursor<'_> {
        let abs = self.path.abs_cell(n);
        let anchor = abs.div_euclid(self.burn_steps) * self.burn_steps;
        let (decay, scale) = self.step_coeffs();
        let mut state = vec![0.0; self.components()];
        for cell in (anchor - self.burn_steps)..abs {
            for (j, v) in state.iter_mut().enumerate() {
                *v = decay * *v
                    + scale * keyed_normal(self.path.seed(), j as u64, cell);
            }
        }
        OuCursor {
            ou: self,
            abs_cell: abs,
            decay,
            scale,
            state,
        }
    }
}

/// Rolling evaluator over consecutive cells of a [`StationaryOu`].
pub struct OuCursor<'a> {
    ou: &'a StationaryOu,
    abs_cell: i64,
    decay: f64,
    scale: f64,
    state: Vec<f64>,
}

impl<'a> OuCursor<'a> {
    /// OU values at the cursor's current cell.
    pub fn values(&self) -> &[f64] {
        &self.state
    }

    /// Moves to the next cell. Crossing an anchor re-runs the burn-in so the
    /// emitted values stay a pure function of the absolute cell.
    pub fn advance(&mut self) {
        let next = self.abs_cell + 1;
        if next.rem_euclid(self.ou.burn_steps) == 0 {
            for v in self.state.iter_mut() {
                *v = 0.0;
            }
            for cell in (next - self.ou.burn_steps)..next {
                for (j, v) in self.state.iter_mut().enumerate() {
                    *v = self.decay * *v
                        + self.scale * keyed_normal(self.ou.path.seed(), j as u64, cell);
                }
            }
        } else {
            for (j, v) in self.state.iter_mut().enumerate() {
                *v = self.decay * *v
                    + self.scale * keyed_normal(self.ou.path.seed(), j as u64, self.abs_cell);
            }
        }
        self.abs_cell = next;
    }
}

/// Noise shapes `g_j` with their images `A g_j`.
#[derive(Clone, Debug)]
pub struct NoiseShape {
    pub g: Vec<ModalVector>,
    pub ag: Vec<ModalVector>,
    n_modes: usize,
}

impl NoiseShape {
    /// Builds shapes from `(mode number, amplitude)` pairs per component;
    /// mode numbers are one-based.
    pub fn from_pairs(dom: &SpectralDomain, spec: &[Vec<(usize, f64)>]) -> Result<Self> {
        let n = dom.n_modes();
        let mut g = Vec::with_capacity(spec.len());
        for (j, pairs) in spec.iter().enumerate() {
            let mut v = ModalVector::zeros(n);
            for &(mode, amp) in pairs {
                if mode == 0 || mode > n {
                    return Err(Error::IndexOutOfRange {
                        index: mode,
                        size: n,
                    });
                }
                v.coeffs[mode - 1] += amp;
            }
            if pairs.is_empty() {
                return Err(Error::Domain(format!("noise shape {j} has no modes")));
            }
            g.push(v);
        }
        let ag = g.iter().map(|v| dom.apply_a(v)).collect();
        Ok(NoiseShape { g, ag, n_modes: n })
    }

    /// Noise-free instance: zero components on an `n_modes`-dimensional
    /// truncation.
    pub fn none(n_modes: usize) -> Self {
        NoiseShape {
            g: vec![],
            ag: vec![],
            n_modes,
        }
    }

    pub fn components(&self) -> usize {
        self.g.len()
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    /// `(sum_j z_j g_j, sum_j z_j A g_j)` from raw OU values.
    pub fn field_from_values(&self, z: &[f64]) -> (ModalVector, ModalVector) {
        let n = self.n_modes();
        let mut zf = ModalVector::zeros(n);
        let mut azf = ModalVector::zeros(n);
        for (j, &zj) in z.iter().enumerate() {
            zf.add_scaled(&self.g[j], zj);
            azf.add_scaled(&self.ag[j], zj);
        }
        (zf, azf)
    }
}

/// Combined noise field `z(theta_t omega)` and `A z(theta_t omega)` in modal
/// coordinates.
pub fn z_field(z: &OUState, shapes: &NoiseShape) -> Result<(ModalVector, ModalVector)> {
    if z.values.len() != shapes.components() {
        return Err(Error::DimensionMismatch(format!(
            "{} OU components vs {} noise shapes",
            z.values.len(),
            shapes.components()
        )));
    }
    Ok(shapes.field_from_values(&z.values))
}

/// Empirical tempered-radius diagnostics over `[-horizon, horizon]`.
#[derive(Clone, Debug)]
pub struct TemperedRadius {
    /// Window supremum of `sum_j z_j^2`.
    pub r_hat: f64,
    /// `sum_j z_j^2` at the window anchor `t = 0`.
    pub r_at_zero: f64,
    /// Violations of `sum_j z_j(theta_t)^2 <= exp(mu |t| / 2) r_hat`.
    pub violations: usize,
    /// Cells checked.
    pub checked: usize,
    /// Whether the delay-window bound
    /// `sup_{xi in [-tau,0]} sum_j z_j(theta_xi)^2 <= exp(mu tau / 2) r_hat`
    /// holds.
    pub delay_window_ok: bool,
    /// Smallest exponent `beta >= 0` with
    /// `sum_j z_j(theta_t)^2 <= exp(beta |t|) r(omega)` for all window times
    /// with `|t| >= tau`, where `r(omega)` is the supremum over the delay
    /// window `[-tau, 0]`. Reported as a diagnostic for the growth constant
    /// `mu/2`; a finite-window estimator need not sit below it.
    pub min_exponent: f64,
}

/// Scans the OU sum of squares over `[-horizon, horizon]` and reports the
/// tempered-radius checks. The window must cover at least twice the delay.
pub fn tempered_radius(ou: &StationaryOu, tau: f64, horizon: f64) -> Result<TemperedRadius> {
    if horizon < 2.0 * tau {
        return Err(Error::WindowTooShort(format!(
            "horizon {horizon} shorter than twice the delay {tau}"
        )));
    }
    let h = ou.step();
    let half = (horizon / h).floor() as i64;
    let mu = ou.mu();
    let mut cursor = ou.cursor(-half);
    let mut sums = Vec::with_capacity(2 * half as usize + 1);
    for _ in -half..=half {
        let s: f64 = cursor.values().iter().map(|z| z * z).sum();
        sums.push(s);
        cursor.advance();
    }
    let r_hat = sums.iter().cloned().fold(0.0, f64::max);
    let r_at_zero = sums[half as usize];
    let delay_cells = (tau / h).round() as i64;
    let mut delay_sup: f64 = 0.0;
    for (idx, &s) in sums.iter().enumerate() {
        if (-delay_cells..=0).contains(&(idx as i64 - half)) {
            delay_sup = delay_sup.max(s);
        }
    }
    let mut violations = 0;
    let mut min_exponent: f64 = 0.0;
    for (idx, &s) in sums.iter().enumerate() {
        let t = (idx as i64 - half) as f64 * h;
        if s > (0.5 * mu * t.abs()).exp() * r_hat * (1.0 + 1e-12) {
            violations += 1;
        }
        if t.abs() >= tau && delay_sup > 0.0 && s > delay_sup {
            min_exponent = min_exponent.max((s / delay_sup).ln() / t.abs());
        }
    }
    let delay_window_ok = delay_sup <= (0.5 * mu * tau).exp() * r_hat * (1.0 + 1e-12);
    Ok(TemperedRadius {
        r_hat,
        r_at_zero,
        violations,
        checked: sums.len(),
        delay_window_ok,
        min_exponent,
    })
}

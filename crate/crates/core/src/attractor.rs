//! Pullback sampling of the random attractor and its diagnostics.
//!
//! The attractor is approximated by clouds: `n` deterministic initial states
//! in a ball are evolved by the original-coordinate cocycle from pullback
//! time `-T` to `0` under the same noise path, for increasing `T`. The
//! absorbing-radius estimate assembles an explicit constant from the noise
//! shapes and the empirical tempered radius, measures the first time the
//! ensemble enters the asymptotic ball, and then checks that the analytic
//! radius dominates the ensemble from that time on. A box-counting estimator
//! on low-dimensional projections provides the cross-check used by the
//! dimension report.

use crate::dynamics::{Flow, Walker};
use crate::noise::{derive_seed, keyed_normal, keyed_uniform, tempered_radius, StationaryOu};
use crate::parallel::map_indexed;
use crate::segment::{h_norm, HistorySegment, ProductState};
use crate::space::ModalVector;
use crate::util::linfit_slope;
use crate::{Error, Result};
use serde::Serialize;
use std::collections::HashSet;

const INIT_STREAM: u64 = 0x7075_6c6c;

/// Pullback cloud at time zero.
#[derive(Clone, Debug)]
pub struct AttractorSample {
    pub states: Vec<ProductState>,
    pub pullback_time: f64,
    pub n_initials: usize,
}

/// History node count implied by the model delay and the path step.
pub fn history_nodes_for(flow: &Flow, ou: &StationaryOu) -> Result<usize> {
    let m = flow.params.tau / ou.step();
    if (m - m.round()).abs() > 1e-9 * m.abs().max(1.0) {
        return Err(Error::MisalignedTime {
            time: flow.params.tau,
            step: ou.step(),
        });
    }
    Ok(m.round() as usize)
}

/// Deterministic initial state for ensemble member `member`: a keyed
/// Gaussian draw on every history node, rescaled into the ball of the given
/// radius. The draw does not depend on the pullback time, so the same member
/// starts identically in every cloud.
pub fn seeded_ball_state(
    seed: u64,
    member: usize,
    tau: f64,
    history_nodes: usize,
    n_modes: usize,
    radius: f64,
) -> ProductState {
    let init_seed = derive_seed(seed, INIT_STREAM);
    let nodes = (0..=history_nodes)
        .map(|i| ModalVector {
            coeffs: (0..n_modes)
                .map(|k| keyed_normal(init_seed, member as u64, (i * n_modes + k) as i64))
                .collect(),
        })
        .collect();
    let state = ProductState::from_segment(
        HistorySegment::from_nodes(tau, nodes).expect("ball state grid"),
    );
    let norm = h_norm(&state);
    let target = radius * keyed_uniform(init_seed, member as u64, -1);
    if norm == 0.0 {
        state
    } else {
        state.scaled(target / norm)
    }
}

/// Evolves one ensemble member from pullback time `-t` to `0`.
pub fn evolve_pullback_member(
    flow: &Flow,
    ou: &StationaryOu,
    t: f64,
    member: usize,
    init_radius: f64,
) -> Result<ProductState> {
    let steps = ou.path().cells_of(t)?;
    if steps < 0 {
        return Err(Error::Domain(format!(
            "pullback time must be nonnegative, got {t}"
        )));
    }
    let shifted = ou.shifted(-t)?;
    let m = history_nodes_for(flow, ou)?;
    let init = seeded_ball_state(
        ou.path().seed(),
        member,
        flow.params.tau,
        m,
        flow.dom.n_modes(),
        init_radius,
    );
    let mut w = Walker::original(flow, &shifted, init, 0)?;
    w.run(steps as usize);
    Ok(w.into_state())
}

/// Evolves pullback clouds for each time in `t_list`. Members are
/// independent and run in parallel; output order is by `(time, member)`.
pub fn pullback_evolve(
    flow: &Flow,
    ou: &StationaryOu,
    t_list: &[f64],
    n: usize,
    init_radius: f64,
) -> Result<Vec<AttractorSample>> {
    flow.params.validate_dissipativity()?;
    if n == 0 {
        return Err(Error::Domain("ensemble size must be at least 1".into()));
    }
    for t in t_list {
        ou.path().cells_of(*t)?;
    }
    t_list
        .iter()
        .map(|&t| {
            let states: Result<Vec<ProductState>> =
                map_indexed(n, |i| evolve_pullback_member(flow, ou, t, i, init_radius))
                    .into_iter()
                    .collect();
            Ok(AttractorSample {
                states: states?,
                pullback_time: t,
                n_initials: n,
            })
        })
        .collect()
}

/// Hausdorff semidistance `sup_{a in A} inf_{b in B} ||a - b||_H`.
pub fn hausdorff_semidist(a: &[ProductState], b: &[ProductState]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet(
            "hausdorff semidistance of an empty set".into(),
        ));
    }
    let mut sup = 0.0f64;
    for x in a {
        let mut inf = f64::INFINITY;
        for y in b {
            inf = inf.min(h_norm(&x.sub(y)?));
        }
        sup = sup.max(inf);
    }
    Ok(sup)
}

/// Largest pairwise distance within a cloud.
pub fn cloud_diameter(states: &[ProductState]) -> f64 {
    let mut d = 0.0f64;
    for (i, x) in states.iter().enumerate() {
        for y in &states[i + 1..] {
            if let Ok(diff) = x.sub(y) {
                d = d.max(h_norm(&diff));
            }
        }
    }
    d
}

/// Absorbing-set estimate.
#[derive(Clone, Debug, Serialize)]
pub struct AbsorbingEstimate {
    /// Asymptotic part of the analytic radius (forcing, lift and memory
    /// terms built from the shape coefficient and the tempered radius).
    pub radius_asymptotic: f64,
    /// Full analytic radius: asymptotic part plus the transient evaluated at
    /// the measured absorption time.
    pub radius_analytic: f64,
    /// Largest ensemble norm observed at or after the absorption time.
    pub radius_empirical: f64,
    /// First scanned pullback time at which every ensemble norm is inside
    /// the asymptotic ball.
    pub t_absorb: Option<f64>,
    /// Shape coefficient `c`.
    pub c_coeff: f64,
    /// Empirical tempered radius used in the bound.
    pub r_hat: f64,
    /// Initial-family radius used for the transient term.
    pub init_radius: f64,
    /// Scan times violating `empirical <= radius_analytic` after absorption.
    pub violations: usize,
    /// `(pullback time, max ensemble norm)` per scanned time.
    pub scan: Vec<(f64, f64)>,
}

/// Scan configuration for [`absorbing_radius`].
#[derive(Clone, Copy, Debug)]
pub struct AbsorbingScan {
    /// Largest pullback time scanned.
    pub t_max: f64,
    /// Scan spacing (grid-aligned).
    pub t_step: f64,
    /// Ensemble size per scanned time.
    pub ensemble: usize,
    /// Initial-family radius as a multiple of the asymptotic radius.
    pub init_scale: f64,
}

impl Default for AbsorbingScan {
    fn default() -> Self {
        AbsorbingScan {
            t_max: 12.0,
            t_step: 0.25,
            ensemble: 64,
            init_scale: 4.0,
        }
    }
}

/// Shape coefficient `c = max_j (||A g_j|| + (mu + L_f) sqrt(tau)
/// exp(mu tau / 4) ||g_j||)` normalizing the forcing against the tempered
/// radius.
pub fn shape_coefficient(flow: &Flow) -> f64 {
    let p = &flow.params;
    let weight = (p.mu + p.l_f) * p.tau.sqrt() * (0.25 * p.mu * p.tau).exp();
    flow.shapes
        .g
        .iter()
        .zip(&flow.shapes.ag)
        .map(|(g, ag)| ag.norm() + weight * g.norm())
        .fold(0.0, f64::max)
}

fn radius_constants(flow: &Flow, r_hat: f64) -> (f64, f64, f64) {
    let p = &flow.params;
    let c = shape_coefficient(flow);
    // The forcing integral contributes 1/|rho + mu/2| when that margin is
    // below one; the memory term carries c L_f / |rho + L_f|.
    let f_int = (1.0f64).max(1.0 / (p.rho_op + 0.5 * p.mu).abs());
    let kappa = c * p.l_f / (p.rho_op + p.l_f).abs();
    let r_inf = c * r_hat * f_int + c * r_hat + kappa * f_int * r_hat;
    (c, kappa * f_int, r_inf)
}

/// Estimates the absorbing radius: the analytic constant from the shape
/// coefficient and tempered radius, the measured absorption time of a
/// pullback ensemble started in a ball `init_scale` times the asymptotic
/// radius, and the empirical check that the analytic radius dominates the
/// ensemble from the absorption time on.
pub fn absorbing_radius(
    flow: &Flow,
    ou: &StationaryOu,
    scan: &AbsorbingScan,
) -> Result<AbsorbingEstimate> {
    flow.params.validate_dissipativity()?;
    let p = &flow.params;
    let horizon = (2.0 * p.tau).max(scan.t_max);
    let r_hat = tempered_radius(ou, p.tau, horizon)?.r_hat;
    let (c, kappa_int, r_inf) = radius_constants(flow, r_hat);
    let b0 = scan.init_scale * if r_inf > 0.0 { r_inf } else { 1.0 };
    let transient = |t: f64| ((p.rho_op + p.l_f) * t).exp() * (b0 + kappa_int * r_hat);

    let n_times = (scan.t_max / scan.t_step).round() as usize;
    let times: Vec<f64> = (1..=n_times).map(|i| i as f64 * scan.t_step).collect();
    for t in &times {
        ou.path().cells_of(*t)?;
    }
    let maxima: Result<Vec<f64>> = map_indexed(times.len(), |i| {
        let t = times[i];
        let mut worst = 0.0f64;
        for member in 0..scan.ensemble {
            let st = evolve_pullback_member(flow, ou, t, member, b0)?;
            worst = worst.max(h_norm(&st));
        }
        Ok(worst)
    })
    .into_iter()
    .collect();
    let maxima = maxima?;

    // Entry into the asymptotic ball; for zero noise the ball degenerates
    // and any small threshold witnesses the contraction.
    let entry_level = if r_inf > 0.0 { r_inf } else { 1e-8 * b0 };
    let t_absorb = times
        .iter()
        .zip(&maxima)
        .find(|(_, &m)| m <= entry_level)
        .map(|(&t, _)| t);

    let radius_analytic = r_inf + t_absorb.map_or(transient(0.0), transient);
    let mut violations = 0;
    let mut radius_empirical = 0.0f64;
    if let Some(t0) = t_absorb {
        for (&t, &m) in times.iter().zip(&maxima) {
            if t >= t0 {
                radius_empirical = radius_empirical.max(m);
                if m > radius_analytic * (1.0 + 1e-12) {
                    violations += 1;
                }
            }
        }
    }
    Ok(AbsorbingEstimate {
        radius_asymptotic: r_inf,
        radius_analytic,
        radius_empirical,
        t_absorb,
        c_coeff: c,
        r_hat,
        init_radius: b0,
        violations,
        scan: times.into_iter().zip(maxima).collect(),
    })
}

/// Box-counting dimension estimate.
#[derive(Clone, Debug, Serialize)]
pub struct BoxCountReport {
    pub dimension: f64,
    /// Set when the cloud has no spread at the smallest scale.
    pub degenerate: bool,
    /// `(epsilon, occupied boxes)` pairs.
    pub counts: Vec<(f64, usize)>,
}

/// Box-counting slope on the `k` leading head coordinates of the cloud.
///
/// Counts occupied boxes per scale and returns the least-squares slope of
/// `log N` against `log(1/eps)`. A cloud with no spread returns dimension
/// zero with the degenerate flag set.
pub fn box_counting_dim(
    sample: &AttractorSample,
    k: usize,
    eps_list: &[f64],
) -> Result<BoxCountReport> {
    if sample.states.is_empty() {
        return Err(Error::EmptySet("box counting on an empty cloud".into()));
    }
    let n_modes = sample.states[0].n_modes();
    if k == 0 || k > n_modes {
        return Err(Error::IndexOutOfRange {
            index: k,
            size: n_modes,
        });
    }
    if eps_list.len() < 3 {
        return Err(Error::Domain("box counting needs at least 3 scales".into()));
    }
    for w in eps_list.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::Domain("scales must be strictly decreasing".into()));
        }
    }
    let mut counts = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut boxes: HashSet<Vec<i64>> = HashSet::new();
        for st in &sample.states {
            let key: Vec<i64> = st.head.coeffs[..k]
                .iter()
                .map(|c| (c / eps).floor() as i64)
                .collect();
            boxes.insert(key);
        }
        counts.push((eps, boxes.len()));
    }
    let degenerate = counts.iter().all(|&(_, n)| n == 1);
    let dimension = if degenerate {
        0.0
    } else {
        let x: Vec<f64> = counts.iter().map(|&(e, _)| (1.0 / e).ln()).collect();
        let y: Vec<f64> = counts.iter().map(|&(_, n)| (n as f64).ln()).collect();
        linfit_slope(&x, &y)
    };
    Ok(BoxCountReport {
        dimension,
        degenerate,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ModelParams, StepCoeffs};
    use crate::noise::{NoisePath, NoiseShape};
    use crate::space::SpectralDomain;

    fn flow_with(a: f64, b: f64, amps: &[(usize, f64)]) -> (Flow, StationaryOu) {
        let dom = SpectralDomain::dirichlet_laplacian(8);
        let params = ModelParams::new(1.0, a, b, 1.0, dom.spectral_bound()).unwrap();
        let spec: Vec<Vec<(usize, f64)>> = amps.iter().map(|&p| vec![p]).collect();
        let shapes = if amps.is_empty() {
            NoiseShape::none(8)
        } else {
            NoiseShape::from_pairs(&dom, &spec).unwrap()
        };
        let flow = Flow::new(params, dom, shapes).unwrap();
        let path = NoisePath::new(31, 1.0 / 32.0, amps.len()).unwrap();
        let ou = StationaryOu::new(path, 1.0, 40.0).unwrap();
        (flow, ou)
    }

    fn default_flow() -> (Flow, StationaryOu) {
        flow_with(0.25, 0.5, &[(1, 0.3), (2, 0.1)])
    }

    #[test]
    fn semidist_identity_singleton_asymmetry() {
        let (flow, ou) = default_flow();
        let m = history_nodes_for(&flow, &ou).unwrap();
        let x = seeded_ball_state(1, 0, 1.0, m, 8, 2.0);
        let y = seeded_ball_state(1, 1, 1.0, m, 8, 2.0);
        assert_eq!(
            hausdorff_semidist(std::slice::from_ref(&x), std::slice::from_ref(&x)).unwrap(),
            0.0
        );
        // Singleton pair at distance delta.
        let delta = h_norm(&x.sub(&y).unwrap());
        let d = hausdorff_semidist(std::slice::from_ref(&x), std::slice::from_ref(&y)).unwrap();
        assert!((d - delta).abs() < 1e-14);
        // Nested pair: dist(A, B) = 0 but dist(B, A) > 0.
        let a = vec![x.clone()];
        let b = vec![x, y];
        assert_eq!(hausdorff_semidist(&a, &b).unwrap(), 0.0);
        assert!(hausdorff_semidist(&b, &a).unwrap() > 0.0);
        assert!(hausdorff_semidist(&[], &a).is_err());
    }

    #[test]
    fn linear_noise_free_clouds_collapse_to_zero() {
        let (flow, ou) = flow_with(0.0, 0.0, &[]);
        let clouds = pullback_evolve(&flow, &ou, &[30.0], 8, 4.0).unwrap();
        let cloud = &clouds[0];
        assert!(cloud_diameter(&cloud.states) < 1e-10);
        for st in &cloud.states {
            assert!(h_norm(st) < 1e-10);
        }
    }

    #[test]
    fn affine_cloud_collapses_geometrically_to_closed_form() {
        // b = 0, a = 0 keeps every mode an independent affine recursion, so
        // the pullback limit has the closed form
        //   u*(n) = sum_{i >= 0} E^i [ (c lam - E) z(n-1-i) + z(n-i) ]
        // per mode, evaluated directly from the anchored noise values.
        let (flow, ou) = flow_with(0.0, 0.0, &[(1, 0.3), (2, 0.1)]);
        let t_list = [4.0, 8.0, 16.0, 80.0];
        let clouds = pullback_evolve(&flow, &ou, &t_list, 4, 4.0).unwrap();
        let diams: Vec<f64> = clouds.iter().map(|c| cloud_diameter(&c.states)).collect();
        assert!(diams[1] < diams[0] * 1e-2, "diameters {diams:?}");
        assert!(diams[2] < diams[1] * 1e-2 + 1e-300);
        assert!(diams[3] < 1e-8);

        let h = ou.step();
        let m = history_nodes_for(&flow, &ou).unwrap();
        let coeffs = StepCoeffs::new(&flow.dom, flow.params.mu, h);
        let horizon: i64 = 14 * 32; // geometric tail below 1e-12 for mode 1
        // Precompute the modal noise field over every cell the series touches.
        let cell_lo = -(m as i64) - 1 - horizon;
        let mut fields = Vec::new();
        let mut cursor = ou.cursor(cell_lo);
        for _ in cell_lo..=0 {
            let (zf, _) = flow.shapes.field_from_values(cursor.values());
            fields.push(zf);
            cursor.advance();
        }
        let zf = |cell: i64, k: usize| fields[(cell - cell_lo) as usize].coeffs[k];

        let mut oracle_nodes = Vec::with_capacity(m + 1);
        for node in 0..=m {
            let cell_end = node as i64 - m as i64;
            let mut acc = ModalVector::zeros(8);
            for (k, &lam) in flow.dom.eigenvalues().iter().enumerate() {
                let e = ((lam - flow.params.mu) * h).exp();
                let c = coeffs.c[k];
                // Horner over the truncated series, oldest term first:
                // after index i the sum is sum_{j >= i} E^{j-i} beta(n-1-j).
                let mut sum = 0.0;
                for i in (0..horizon).rev() {
                    let beta = (c * lam - e) * zf(cell_end - 1 - i, k) + zf(cell_end - i, k);
                    sum = e * sum + beta;
                }
                acc.coeffs[k] = sum;
            }
            oracle_nodes.push(acc);
        }
        let oracle =
            ProductState::from_segment(HistorySegment::from_nodes(1.0, oracle_nodes).unwrap());
        let collapsed = &clouds[3].states[0];
        let err = h_norm(&collapsed.sub(&oracle).unwrap());
        assert!(
            err < 1e-8 * (1.0 + h_norm(&oracle)),
            "closed-form mismatch {err}"
        );
    }

    #[test]
    fn default_semidistance_ladder_decreases() {
        let (flow, ou) = default_flow();
        let t_list = [5.0, 10.0, 20.0];
        let clouds = pullback_evolve(&flow, &ou, &t_list, 16, 8.0).unwrap();
        let d01 = hausdorff_semidist(&clouds[0].states, &clouds[1].states).unwrap();
        let d12 = hausdorff_semidist(&clouds[1].states, &clouds[2].states).unwrap();
        assert!(d12 <= d01, "ladder {d01} -> {d12}");
    }

    #[test]
    fn absorbing_zero_noise_reduces_to_transient() {
        let (flow, ou) = flow_with(0.0, 0.0, &[]);
        let est = absorbing_radius(&flow, &ou, &AbsorbingScan::default()).unwrap();
        assert_eq!(est.radius_asymptotic, 0.0);
        assert_eq!(est.c_coeff, 0.0);
        assert!(est.t_absorb.is_some(), "contraction should absorb");
        assert!(est.radius_analytic > 0.0);
        assert_eq!(est.violations, 0);
    }

    #[test]
    fn absorbing_default_instance_dominates_ensemble() {
        let (flow, ou) = default_flow();
        let scan = AbsorbingScan {
            ensemble: 32,
            ..AbsorbingScan::default()
        };
        let est = absorbing_radius(&flow, &ou, &scan).unwrap();
        assert!(est.t_absorb.is_some());
        assert_eq!(est.violations, 0);
        assert!(est.radius_empirical <= est.radius_analytic);
        assert!(est.r_hat > 0.0);
    }

    #[test]
    fn doubling_amplitudes_grows_the_radius() {
        let amps1 = [(1usize, 0.3), (2usize, 0.1)];
        let amps2 = [(1usize, 0.6), (2usize, 0.2)];
        let amps4 = [(1usize, 1.2), (2usize, 0.4)];
        let scan = AbsorbingScan {
            ensemble: 8,
            ..AbsorbingScan::default()
        };
        let mut radii = Vec::new();
        for amps in [&amps1[..], &amps2[..], &amps4[..]] {
            let (flow, ou) = flow_with(0.25, 0.5, amps);
            radii.push(absorbing_radius(&flow, &ou, &scan).unwrap().radius_analytic);
        }
        assert!(radii[0] < radii[1] && radii[1] < radii[2], "radii {radii:?}");
    }

    fn synthetic_cloud(points: Vec<Vec<f64>>) -> AttractorSample {
        let n = 8;
        let states: Vec<ProductState> = points
            .into_iter()
            .map(|p| {
                let mut v = ModalVector::zeros(n);
                v.coeffs[..p.len()].copy_from_slice(&p);
                ProductState::from_segment(HistorySegment::constant(1.0, 4, &v).unwrap())
            })
            .collect();
        AttractorSample {
            n_initials: states.len(),
            pullback_time: 0.0,
            states,
        }
    }

    #[test]
    fn box_counting_singleton_is_degenerate_zero() {
        let cloud = synthetic_cloud(vec![vec![0.3, -0.2]; 16]);
        let rep = box_counting_dim(&cloud, 2, &[0.4, 0.2, 0.1]).unwrap();
        assert!(rep.degenerate);
        assert_eq!(rep.dimension, 0.0);
    }

    #[test]
    fn box_counting_recovers_curve_dimension() {
        let n = 4096;
        let points = (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                let ang = 2.0 * std::f64::consts::PI * t;
                vec![1.2 * ang.cos(), 1.2 * ang.sin(), 0.4 * t]
            })
            .collect();
        let cloud = synthetic_cloud(points);
        let rep = box_counting_dim(&cloud, 3, &[0.4, 0.2, 0.1, 0.05]).unwrap();
        assert!(
            (rep.dimension - 1.0).abs() <= 0.15,
            "curve slope {}",
            rep.dimension
        );
    }

    #[test]
    fn box_counting_recovers_disc_dimension() {
        let n = 60000;
        let points = (0..n)
            .map(|i| {
                let u = keyed_uniform(5, 0, i as i64);
                let v = keyed_uniform(5, 1, i as i64);
                let r = 1.5 * u.sqrt();
                let ang = 2.0 * std::f64::consts::PI * v;
                vec![r * ang.cos(), r * ang.sin()]
            })
            .collect();
        let cloud = synthetic_cloud(points);
        let rep = box_counting_dim(&cloud, 2, &[0.3, 0.15, 0.075]).unwrap();
        assert!(
            (rep.dimension - 2.0).abs() <= 0.2,
            "disc slope {}",
            rep.dimension
        );
    }

    #[test]
    fn box_counting_validates_input() {
        let cloud = synthetic_cloud(vec![vec![0.0]; 4]);
        assert!(box_counting_dim(&cloud, 0, &[0.4, 0.2, 0.1]).is_err());
        assert!(box_counting_dim(&cloud, 2, &[0.4, 0.2]).is_err());
        assert!(box_counting_dim(&cloud, 2, &[0.1, 0.2, 0.4]).is_err());
    }
}

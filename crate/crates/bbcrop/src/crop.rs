//! Analytic efficiency bound, the constant angle γ between in-phase and
//! antiphase transverse magnetization, and the closed-loop integration of the
//! reduced dynamics that generates the optimal on-resonance controls.
//!
//! Reduced variables: r1 = (l1 cosψ1, l1 sinψ1, z1) is the in-phase vector,
//! r2 the antiphase vector whose transverse part sits at azimuth ψ1 + γ.
//! During free evolution the transverse parts exchange through the rotation
//! χJ·R(θ) with θ = atan2(J, −k_c) and decay at k_a.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liouville::{
    build_generator, hard_pulse, Basis, Channel, ControlSettings, LiouvilleState, PropagatorCache,
    SpinSystem,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConstants {
    pub eta: f64,
    pub gamma: f64,
    pub xi: f64,
    pub chi: f64,
    pub theta: f64,
    pub zeta: f64,
}

impl CropConstants {
    /// Residual of (1/η)cos(θ−γ) + η cos(θ+γ) = 2ξ/χ.
    pub fn residual(&self) -> f64 {
        (self.theta - self.gamma).cos() / self.eta + self.eta * (self.theta + self.gamma).cos()
            - 2.0 * self.xi / self.chi
    }
}

fn zeta_squared(sys: &SpinSystem) -> Result<f64> {
    let (ka, kc, j) = (sys.k_a(), sys.k_c(), sys.j);
    if ![ka, kc, j].iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("non-finite rates".into()));
    }
    if ka < kc.abs() {
        return Err(Error::Domain(format!("k_a = {ka} is smaller than |k_c| = {}", kc.abs())));
    }
    let den = j * j + kc * kc;
    if den == 0.0 {
        return Err(Error::Domain("J and k_c both vanish; no transfer mechanism".into()));
    }
    Ok((ka * ka - kc * kc) / den)
}

/// Largest reachable ⟨2IzSz⟩ starting from Iz: η = sqrt(1+ζ²) − ζ.
pub fn efficiency_bound(sys: &SpinSystem) -> Result<f64> {
    let z = zeta_squared(sys)?.sqrt();
    // same value as sqrt(1+ζ²) − ζ without cancellation for large ζ
    Ok(1.0 / ((1.0 + z * z).sqrt() + z))
}

/// Bound constants and the locked angle γ.
///
/// The defining relation is a tangency (the maximum over γ of the left side
/// equals 2ξ/χ), so the root is double and bracketing cannot find it. The
/// maximizer has the closed form tan γ = tan θ (1 − η²)/(1 + η²).
pub fn solve_gamma(sys: &SpinSystem) -> Result<CropConstants> {
    let eta = efficiency_bound(sys)?;
    let zeta = zeta_squared(sys)?.sqrt();
    let (ka, kc, j) = (sys.k_a(), sys.k_c(), sys.j);
    if j <= 0.0 {
        return Err(Error::Domain(format!("J must be positive, got {j}")));
    }
    let xi = ka / j;
    let chi = (1.0 + kc * kc / (j * j)).sqrt();
    let theta = j.atan2(-kc);
    let mut gamma = (theta.sin() * (1.0 / eta - eta)).atan2(theta.cos() * (1.0 / eta + eta));
    if gamma <= 0.0 {
        // only reached for k_c = −k_a where the relation degenerates to γ = 0;
        // the equivalent representative π is not a solution there
        gamma = gamma.max(0.0);
    }
    let c = CropConstants { eta, gamma, xi, chi, theta, zeta };
    let r = c.residual();
    if !(r.abs() <= 1e-9) {
        let curve: Vec<String> = (0..=8)
            .map(|i| {
                let g = PI * i as f64 / 8.0;
                let cc = CropConstants { gamma: g, ..c };
                format!("{:.3}:{:.3e}", g, cc.residual())
            })
            .collect();
        return Err(Error::Numeric(format!(
            "angle relation not satisfied (residual {r:.3e}); residual curve {}",
            curve.join(" ")
        )));
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    pub l1: f64,
    pub z1: f64,
    pub l2: f64,
    pub z2: f64,
    pub gamma: f64,
    pub psi1: f64,
}

impl ReducedState {
    /// Inner product r1·r2.
    pub fn overlap(&self) -> f64 {
        self.z1 * self.z2 + self.l1 * self.l2 * self.gamma.cos()
    }

    pub fn r1(&self) -> [f64; 3] {
        [self.l1 * self.psi1.cos(), self.l1 * self.psi1.sin(), self.z1]
    }

    pub fn r2(&self) -> [f64; 3] {
        let a = self.psi1 + self.gamma;
        [self.l2 * a.cos(), self.l2 * a.sin(), self.z2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub state: ReducedState,
    /// rf amplitude (Hz)
    pub a: f64,
    /// rf phase relative to l1 (rad)
    pub phi: f64,
}

impl TrajectorySample {
    /// Absolute rf phase in the rotating frame.
    pub fn rf_phase(&self) -> f64 {
        self.state.psi1 + self.phi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedTrajectory {
    pub samples: Vec<TrajectorySample>,
    /// Initial tilt of Iz toward the transverse plane (rad), applied as a
    /// hard pulse before the first sample.
    pub bootstrap: f64,
}

impl ReducedTrajectory {
    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t) - self.samples.first().map_or(0.0, |s| s.t)
    }

    pub fn final_state(&self) -> Option<ReducedState> {
        self.samples.last().map(|s| s.state)
    }

    /// Bootstrap tilt plus 2π∫A dt (trapezoidal).
    pub fn total_flip(&self) -> f64 {
        let mut f = self.bootstrap;
        for w in self.samples.windows(2) {
            f += PI * (w[0].a + w[1].a) * (w[1].t - w[0].t);
        }
        f
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::param("trajectory needs at least two samples"));
        }
        for w in self.samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(Error::param(format!("samples not time-ordered at t = {}", w[1].t)));
            }
        }
        if self.samples.iter().any(|s| !(s.a.is_finite() && s.phi.is_finite() && s.t.is_finite())) {
            return Err(Error::param("trajectory has non-finite controls"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropOptions {
    /// integration step (s)
    pub dt: f64,
    /// stop once ⟨2IzSz⟩ reaches this fraction of η
    pub stop: f64,
    /// bootstrap tilt (rad)
    pub bootstrap: f64,
    /// hard cap on duration in units of 1/J
    pub max_duration_j: f64,
}

impl CropOptions {
    pub fn for_system(sys: &SpinSystem) -> Self {
        CropOptions { dt: 1e-3 / sys.j.max(sys.k_a()), stop: 0.995, bootstrap: 1e-3, max_duration_j: 10.0 }
    }
}

struct Dynamics {
    c: CropConstants,
    j: f64,
    k: f64,
}

type Vec5 = [f64; 5];

impl Dynamics {
    fn new(c: CropConstants, j: f64) -> Self {
        let k = (c.theta - c.gamma).cos() - c.eta * c.eta * (c.theta + c.gamma).cos();
        Dynamics { c, j, k }
    }

    /// Controls (A ≥ 0, φ) that keep l2/l1 = η and dγ/dt = 0.
    fn controls(&self, s: &Vec5) -> Result<(f64, f64)> {
        let [z1, l1, z2, _l2, _] = *s;
        let (eta, g) = (self.c.eta, self.c.gamma);
        let phi = (eta * z1 - z2 * g.cos()).atan2(z2 * g.sin());
        let den = 2.0 * (z2 * (g - phi).sin() + eta * z1 * phi.sin());
        if !(den.abs() > 1e-300) || !den.is_finite() {
            return Err(Error::Numeric(format!(
                "no real control at z1={z1:.6e} l1={l1:.6e} z2={z2:.6e}: singular constraint"
            )));
        }
        let a = self.c.chi * self.j * l1 * self.k / den;
        if a < 0.0 {
            Ok((-a, phi + PI))
        } else {
            Ok((a, phi))
        }
    }

    fn rhs(&self, s: &Vec5) -> Result<Vec5> {
        let [z1, l1, z2, l2, _] = *s;
        let (a, phi) = self.controls(s)?;
        let c = &self.c;
        let g = c.gamma;
        let j = self.j;
        Ok([
            -2.0 * PI * a * l1 * phi.sin(),
            2.0 * PI * a * z1 * phi.sin() - PI * j * (c.xi * l1 - c.chi * l2 * (c.theta + g).cos()),
            2.0 * PI * a * l2 * (g - phi).sin(),
            -2.0 * PI * a * (g - phi).sin() * z2
                - PI * j * (c.xi * l2 - c.chi * l1 * (c.theta - g).cos()),
            -2.0 * PI * a * (z1 / l1) * phi.cos() + PI * c.chi * j * c.eta * (c.theta + g).sin(),
        ])
    }
}

fn axpy(s: &Vec5, h: f64, k: &Vec5) -> Vec5 {
    std::array::from_fn(|i| s[i] + h * k[i])
}

/// Integrate the closed-loop reduced dynamics with fixed-step RK4.
///
/// Starts from Iz tilted by a small angle toward +x with r2 already on the
/// constraint surface (l2 = η l1, r1 ⊥ r2), then re-projects l2 = η l1 after
/// every step.
///
/// As k_c → 0 the locked angle tends to π/2 and relaxation stops moving the
/// overlap z1·z2 + l1·l2·cos γ, so z2 can only grow out of its O(cos γ) seed.
/// The reduced integration still converges, but the open-loop replay becomes
/// ill-conditioned below k_c ≈ 1e-4 k_a; exact k_c = 0 is designed by the
/// dynamic program instead.
pub fn generate_crop(sys: &SpinSystem, opts: &CropOptions) -> Result<ReducedTrajectory> {
    let c = solve_gamma(sys)?;
    let rate = sys.j.max(sys.k_a());
    if !(opts.dt > 0.0) || opts.dt > 1.0 / (100.0 * rate) * (1.0 + 1e-12) {
        return Err(Error::param(format!(
            "dt = {} must be positive and at most 1/(100·max(J, k_a)) = {}",
            opts.dt,
            1.0 / (100.0 * rate)
        )));
    }
    if !(opts.stop > 0.0 && opts.stop < 1.0) {
        return Err(Error::param(format!("stop fraction {} outside (0, 1)", opts.stop)));
    }
    if !(opts.bootstrap > 0.0 && opts.bootstrap < 0.1) {
        return Err(Error::param(format!("bootstrap angle {} outside (0, 0.1)", opts.bootstrap)));
    }
    let dyn_ = Dynamics::new(c, sys.j);
    let eps = opts.bootstrap;
    let (z1, l1) = (eps.cos(), eps.sin());
    let l2 = c.eta * l1;
    let z2 = -l1 * l2 * c.gamma.cos() / z1;
    let mut s: Vec5 = [z1, l1, z2, l2, 0.0];
    let target = opts.stop * c.eta;
    let t_max = opts.max_duration_j / sys.j;
    let mut t = 0.0;
    let mut samples = Vec::new();
    let sample = |t: f64, s: &Vec5| -> Result<TrajectorySample> {
        let (a, phi) = dyn_.controls(s)?;
        Ok(TrajectorySample {
            t,
            state: ReducedState { z1: s[0], l1: s[1], z2: s[2], l2: s[3], gamma: c.gamma, psi1: s[4] },
            a,
            phi,
        })
    };
    samples.push(sample(t, &s)?);
    let h = opts.dt;
    let mut n = 0usize;
    while s[2] < target {
        if t > t_max {
            return Err(Error::Numeric(format!(
                "target {target:.6} not reached within {} /J; state z1={:.6e} l1={:.6e} z2={:.6e} l2={:.6e}",
                opts.max_duration_j, s[0], s[1], s[2], s[3]
            )));
        }
        let k1 = dyn_.rhs(&s)?;
        let k2 = dyn_.rhs(&axpy(&s, h / 2.0, &k1))?;
        let k3 = dyn_.rhs(&axpy(&s, h / 2.0, &k2))?;
        let k4 = dyn_.rhs(&axpy(&s, h, &k3))?;
        for i in 0..5 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        s[3] = c.eta * s[1];
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("integration diverged at t = {t:.6e}: {s:?}")));
        }
        n += 1;
        t = n as f64 * h;
        samples.push(sample(t, &s)?);
    }
    Ok(ReducedTrajectory { samples, bootstrap: eps })
}

/// Maximum |r1·r2| along the trajectory.
pub fn verify_orthogonality(traj: &ReducedTrajectory) -> f64 {
    traj.samples.iter().map(|s| s.state.overlap().abs()).fold(0.0, f64::max)
}

fn circular_mean(a: f64, b: f64) -> f64 {
    (a.sin() + b.sin()).atan2(a.cos() + b.cos())
}

/// Play the trajectory through the full simulator: bootstrap hard pulse,
/// then piecewise-constant midpoint controls on every step.
pub fn replay_trajectory(
    sys: &SpinSystem,
    traj: &ReducedTrajectory,
    offset_i: f64,
) -> Result<LiouvilleState> {
    traj.validate()?;
    let first = traj.samples[0];
    // tilt toward the initial l1 azimuth: rotation about the axis 90° ahead
    let mut rho = LiouvilleState::initial()
        .apply(&hard_pulse(Channel::I, traj.bootstrap, first.state.psi1 + PI / 2.0));
    let mut cache = PropagatorCache::new();
    for w in traj.samples.windows(2) {
        let ctl = ControlSettings {
            rf_amp_i: 0.5 * (w[0].a + w[1].a),
            rf_phase_i: circular_mean(w[0].rf_phase(), w[1].rf_phase()),
            offset_i,
            ..Default::default()
        };
        let g = build_generator(sys, &ctl)?;
        rho = rho.apply(&cache.get(&g, w[1].t - w[0].t)?);
    }
    Ok(rho)
}

/// ⟨2IzSz⟩ after replaying the trajectory on resonance.
pub fn replay_efficiency(sys: &SpinSystem, traj: &ReducedTrajectory) -> Result<f64> {
    Ok(replay_trajectory(sys, traj, 0.0)?.get(Basis::IzSz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sys(ka: f64, kc: f64) -> SpinSystem {
        SpinSystem::from_aggregates(1.0, ka, kc).unwrap()
    }

    #[test]
    fn bound_limits() {
        assert_abs_diff_eq!(efficiency_bound(&sys(1.0, 1.0)).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(efficiency_bound(&sys(1.0, 0.0)).unwrap(), 2f64.sqrt() - 1.0, epsilon = 1e-15);
        // ζ² = (1 − 0.5625)/(1 + 0.5625) = 0.28
        let z2: f64 = 0.4375 / 1.5625;
        let want = (1.0 + z2).sqrt() - z2.sqrt();
        assert_abs_diff_eq!(efficiency_bound(&sys(1.0, 0.75)).unwrap(), want, epsilon = 1e-14);
        assert_abs_diff_eq!(want, 0.6022205877, epsilon = 1e-9);
    }

    #[test]
    fn bound_domain_errors() {
        let bad = SpinSystem { j: 1.0, k_dd: 0.5, k_csa_i: 0.0, k_csa_s: 0.0, kc_i: 0.8, kc_s: 0.0 };
        assert!(matches!(efficiency_bound(&bad), Err(Error::Domain(_))));
        let none = SpinSystem { j: 0.0, k_dd: 1.0, k_csa_i: 0.0, k_csa_s: 0.0, kc_i: 0.0, kc_s: 0.0 };
        assert!(matches!(efficiency_bound(&none), Err(Error::Domain(_))));
    }

    #[test]
    fn gamma_special_cases() {
        let c = solve_gamma(&sys(1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(c.theta, PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.gamma, PI / 2.0, epsilon = 1e-12);
        let c = solve_gamma(&sys(1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(c.gamma, PI, epsilon = 1e-12);
        let c = solve_gamma(&sys(1.0, 0.75)).unwrap();
        assert_abs_diff_eq!(c.gamma, 2.5839938269, epsilon = 1e-9);
        assert_abs_diff_eq!(c.chi, 1.25, epsilon = 1e-15);
        assert!(c.residual().abs() <= 1e-12);
    }

    #[test]
    fn gamma_is_a_tangency() {
        // every other γ gives a strictly smaller left-hand side
        let c = solve_gamma(&sys(1.0, 0.75)).unwrap();
        for i in 1..200 {
            let g = PI * i as f64 / 200.0;
            if (g - c.gamma).abs() > 1e-3 {
                assert!(CropConstants { gamma: g, ..c }.residual() < 0.0);
            }
        }
    }

    #[test]
    fn rope_limit_profile() {
        let s = sys(1.0, 0.0);
        let tr = generate_crop(&s, &CropOptions { stop: 0.999, ..CropOptions::for_system(&s) }).unwrap();
        let fin = tr.final_state().unwrap();
        assert!(fin.z2 >= 0.999 * (2f64.sqrt() - 1.0));
        assert!(fin.z2 <= 2f64.sqrt() - 1.0);
        assert!(tr.samples.iter().all(|p| p.a.is_finite() && p.a >= 0.0));
    }

    #[test]
    fn constraints_hold() {
        let s = sys(1.0, 0.75);
        let tr = generate_crop(&s, &CropOptions::for_system(&s)).unwrap();
        let c = solve_gamma(&s).unwrap();
        for p in &tr.samples {
            assert!((p.state.l2 / p.state.l1 - c.eta).abs() <= 1e-6);
            assert_eq!(p.state.gamma, c.gamma);
        }
        assert!(verify_orthogonality(&tr) <= 1e-6);
        assert!(tr.final_state().unwrap().z2 >= 0.995 * c.eta);
    }

    #[test]
    fn orthogonality_detects_perturbation() {
        let s = sys(1.0, 0.75);
        let mut tr = generate_crop(&s, &CropOptions::for_system(&s)).unwrap();
        assert!(tr.samples[0].state.overlap().abs() < 1e-15);
        for p in &mut tr.samples {
            p.state.gamma += 0.1;
        }
        assert!(verify_orthogonality(&tr) > 1e-3);
    }

    #[test]
    fn option_validation() {
        let s = sys(1.0, 0.75);
        let base = CropOptions::for_system(&s);
        assert!(generate_crop(&s, &CropOptions { dt: 0.02, ..base }).is_err());
        assert!(generate_crop(&s, &CropOptions { stop: 1.0, ..base }).is_err());
        assert!(matches!(
            generate_crop(&s, &CropOptions { max_duration_j: 0.5, ..base }),
            Err(Error::Numeric(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gamma_residual_vanishes(ka in 0.01..5.0f64, f in -0.99..1.0f64, j in 0.1..10.0f64) {
            let s = SpinSystem::from_aggregates(j, ka, f * ka).unwrap();
            let c = solve_gamma(&s).unwrap();
            prop_assert!(c.residual().abs() <= 1e-9);
            prop_assert!(c.gamma > 0.0 && c.gamma <= PI);
            prop_assert!(c.eta > 0.0 && c.eta <= 1.0);
            prop_assert!((c.eta - ((1.0 + c.zeta * c.zeta).sqrt() - c.zeta)).abs() <= 1e-12);
        }

        #[test]
        fn bound_monotone(ka in 0.1..5.0f64, f in 0.0..0.95f64, d in 0.001..0.5f64) {
            let kc = f * ka;
            let e = efficiency_bound(&sys(ka, kc)).unwrap();
            prop_assert!(efficiency_bound(&sys(ka + d, kc)).unwrap() <= e + 1e-15);
            let kc2 = (kc + d).min(ka);
            prop_assert!(efficiency_bound(&sys(ka, kc2)).unwrap() >= e - 1e-15);
        }
    }
}

//! Hard-pulse discretization: direct DANTE sampling of a smooth trajectory,
//! and the dynamic program over (|r1|, |r2|) for the k_c = 0 case.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crop::ReducedTrajectory;
use crate::error::{Error, Result};
use crate::liouville::{wrap_2pi, SpinSystem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DanteStep {
    /// flip angle (rad), in [0, π]
    pub flip: f64,
    /// rf phase (rad)
    pub phase: f64,
    /// delay following the pulse (s)
    pub delay: f64,
}

/// Hard pulses alternating with delays. A zero delay is allowed (adjacent
/// pulses, or a trailing pulse with nothing after it).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DanteSequence {
    pub steps: Vec<DanteStep>,
}

impl DanteSequence {
    pub fn total_flip(&self) -> f64 {
        self.steps.iter().map(|s| s.flip).sum()
    }

    pub fn duration(&self) -> f64 {
        self.steps.iter().map(|s| s.delay).sum()
    }

    /// Number of nonzero delays, i.e. echo periods once refocusing is added.
    pub fn periods(&self) -> usize {
        self.steps.iter().filter(|s| s.delay > 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, s) in self.steps.iter().enumerate() {
            if !(s.flip.is_finite() && s.phase.is_finite() && s.delay.is_finite()) {
                return Err(Error::param(format!("step {k} has non-finite values")));
            }
            if s.flip < 0.0 || s.flip > PI + 1e-12 {
                return Err(Error::param(format!("step {k}: flip {} outside [0, π]", s.flip)));
            }
            if s.delay < 0.0 {
                return Err(Error::param(format!("step {k}: negative delay {}", s.delay)));
            }
        }
        Ok(())
    }
}

/// Rotation by a signed angle about the transverse axis at `phase`, written
/// with a flip in [0, π].
fn canonical_pulse(angle: f64, phase: f64) -> (f64, f64) {
    let mut a = angle.rem_euclid(2.0 * PI);
    let mut p = phase;
    if a > PI {
        a = 2.0 * PI - a;
        p += PI;
    }
    (a, wrap_2pi(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    EqualFlip,
    EqualDuration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    /// pulse at the start of its interval carrying the whole interval's flip
    Leading,
    /// pulse at the flip midpoint of its interval; delays run between pulse
    /// centers and the final delay is zero
    Centered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DanteOptions {
    pub partition: Partition,
    pub placement: Placement,
}

impl Default for DanteOptions {
    fn default() -> Self {
        DanteOptions { partition: Partition::EqualFlip, placement: Placement::Leading }
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = xs.partition_point(|v| *v <= x).saturating_sub(1).min(n - 2);
    let (x0, x1) = (xs[i], xs[i + 1]);
    if x1 == x0 {
        return ys[i];
    }
    ys[i] + (ys[i + 1] - ys[i]) * (x - x0) / (x1 - x0)
}

/// Time at which the (nondecreasing) cumulative flip reaches `c`.
fn inverse_cumulative(ts: &[f64], cum: &[f64], c: f64) -> f64 {
    let n = ts.len();
    if c <= cum[0] {
        return ts[0];
    }
    if c >= cum[n - 1] {
        return ts[n - 1];
    }
    let i = cum.partition_point(|v| *v < c).saturating_sub(1).min(n - 2);
    let (c0, c1) = (cum[i], cum[i + 1]);
    if c1 <= c0 {
        return ts[i];
    }
    ts[i] + (ts[i + 1] - ts[i]) * (c - c0) / (c1 - c0)
}

/// Replace the smooth profile by `n` hard pulses separated by delays.
///
/// Each pulse carries the flip of its interval (the bootstrap tilt belongs to
/// the first interval) and the absolute rf phase ψ1 + φ sampled at the pulse
/// position.
pub fn dante_discretize(traj: &ReducedTrajectory, n: usize, opts: DanteOptions) -> Result<DanteSequence> {
    traj.validate()?;
    if n < 2 {
        return Err(Error::param(format!("need at least 2 pulses, got {n}")));
    }
    if n > traj.samples.len() {
        return Err(Error::param(format!(
            "{n} pulses exceed the {} trajectory samples",
            traj.samples.len()
        )));
    }
    let ts: Vec<f64> = traj.samples.iter().map(|s| s.t).collect();
    let mut cum = Vec::with_capacity(ts.len());
    let mut c = traj.bootstrap;
    cum.push(c);
    for w in traj.samples.windows(2) {
        c += PI * (w[0].a + w[1].a) * (w[1].t - w[0].t);
        cum.push(c);
    }
    // unwrapped absolute phase
    let mut phase = Vec::with_capacity(ts.len());
    let mut prev = traj.samples[0].rf_phase();
    phase.push(prev);
    for s in &traj.samples[1..] {
        let p = s.rf_phase();
        let d = (p - prev + PI).rem_euclid(2.0 * PI) - PI;
        prev += d;
        phase.push(prev);
    }
    let (t0, t1) = (ts[0], ts[ts.len() - 1]);
    let total = cum[cum.len() - 1];
    // interval boundaries (time) and cumulative flip at them; the first
    // boundary sits just before the bootstrap so its tilt is counted
    let mut bt = Vec::with_capacity(n + 1);
    let mut bc = Vec::with_capacity(n + 1);
    match opts.partition {
        Partition::EqualFlip => {
            for k in 0..=n {
                let target = total * k as f64 / n as f64;
                bc.push(target);
                bt.push(inverse_cumulative(&ts, &cum, target));
            }
        }
        Partition::EqualDuration => {
            for k in 0..=n {
                let t = t0 + (t1 - t0) * k as f64 / n as f64;
                bt.push(t);
                bc.push(if k == 0 { 0.0 } else { interp(&ts, &cum, t) });
            }
        }
    }
    let mut steps = Vec::with_capacity(n);
    match opts.placement {
        Placement::Leading => {
            for k in 0..n {
                steps.push(DanteStep {
                    flip: bc[k + 1] - bc[k],
                    phase: wrap_2pi(interp(&ts, &phase, bt[k])),
                    delay: bt[k + 1] - bt[k],
                });
            }
        }
        Placement::Centered => {
            let centers: Vec<f64> = (0..n)
                .map(|k| match opts.partition {
                    Partition::EqualFlip => inverse_cumulative(&ts, &cum, 0.5 * (bc[k] + bc[k + 1])),
                    Partition::EqualDuration => 0.5 * (bt[k] + bt[k + 1]),
                })
                .collect();
            for k in 0..n {
                steps.push(DanteStep {
                    flip: bc[k + 1] - bc[k],
                    phase: wrap_2pi(interp(&ts, &phase, centers[k])),
                    delay: if k + 1 < n { centers[k + 1] - centers[k] } else { 0.0 },
                });
            }
        }
    }
    for s in &mut steps {
        if s.flip > PI {
            return Err(Error::param(format!("interval flip {} exceeds π; use more pulses", s.flip)));
        }
        s.flip = s.flip.max(0.0);
        s.delay = s.delay.max(0.0);
    }
    Ok(DanteSequence { steps })
}

// ---------------------------------------------------------------------------
// dynamic program (k_c = 0)

/// One period of the reduced k_c = 0 model: orient r1 at elevation β1 and r2
/// at elevation β2, then evolve freely for τ.
pub fn stage_map(r1: f64, r2: f64, beta1: f64, beta2: f64, tau: f64, sys: &SpinSystem) -> (f64, f64) {
    let e = (-PI * sys.k_a() * tau).exp();
    let (s, c) = (PI * sys.j * tau).sin_cos();
    stage_map_raw(r1, r2, beta1.cos(), beta1.sin(), beta2.cos(), beta2.sin(), e, c, s)
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn stage_map_raw(r1: f64, r2: f64, cb1: f64, sb1: f64, cb2: f64, sb2: f64, e: f64, c: f64, s: f64) -> (f64, f64) {
    let a = e * (r1 * cb1 * c - r2 * cb2 * s);
    let b = r1 * sb1;
    let u = e * (r2 * cb2 * c + r1 * cb1 * s);
    let v = r2 * sb2;
    ((a * a + b * b).sqrt(), (u * u + v * v).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub stages: usize,
    pub grid_n: usize,
    pub beta_n: usize,
    pub tau_n: usize,
}

impl DpConfig {
    pub fn new(stages: usize) -> Self {
        DpConfig { stages, grid_n: 100, beta_n: 91, tau_n: 128 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpControl {
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpPolicy {
    pub sys: SpinSystem,
    pub config: DpConfig,
    /// values[k][i * grid_n + j] = V_k(r1_i, r2_j) for k = 0..=stages
    pub values: Vec<Vec<f64>>,
    /// controls[k - 1][node] = optimal control at stage k
    pub controls: Vec<Vec<DpControl>>,
}

struct ControlSet {
    beta: Vec<(f64, f64, f64)>,
    tau: Vec<(f64, f64, f64, f64)>,
}

impl ControlSet {
    fn new(sys: &SpinSystem, cfg: &DpConfig) -> Self {
        let beta = (0..cfg.beta_n)
            .map(|m| {
                let b = FRAC_PI_2 * m as f64 / (cfg.beta_n - 1) as f64;
                (b, b.cos(), b.sin())
            })
            .collect();
        let tmax = 0.5 / sys.j;
        let tau = (0..cfg.tau_n)
            .map(|m| {
                let t = tmax * m as f64 / (cfg.tau_n - 1) as f64;
                let (s, c) = (PI * sys.j * t).sin_cos();
                (t, (-PI * sys.k_a() * t).exp(), c, s)
            })
            .collect();
        ControlSet { beta, tau }
    }

    /// Best control for `value`, with ties going to the smallest τ and then
    /// the smallest β.
    fn argmax(&self, r1: f64, r2: f64, value: impl Fn(f64, f64) -> f64) -> (f64, DpControl) {
        let mut best = f64::NEG_INFINITY;
        let mut arg = DpControl { beta1: 0.0, beta2: 0.0, tau: 0.0 };
        for &(t, e, c, s) in &self.tau {
            for &(b, cb, sb) in &self.beta {
                let (p, q) = stage_map_raw(r1, r2, cb, sb, 1.0, 0.0, e, c, s);
                let v = value(p, q);
                if v > best + 1e-12 {
                    best = v;
                    arg = DpControl { beta1: b, beta2: 0.0, tau: t };
                }
                let (p, q) = stage_map_raw(r1, r2, 1.0, 0.0, cb, sb, e, c, s);
                let v = value(p, q);
                if v > best + 1e-12 {
                    best = v;
                    arg = DpControl { beta1: 0.0, beta2: b, tau: t };
                }
            }
        }
        (best, arg)
    }
}

fn bilinear(v: &[f64], n: usize, r1: f64, r2: f64) -> f64 {
    let h = (n - 1) as f64;
    let x = (r1.clamp(0.0, 1.0)) * h;
    let y = (r2.clamp(0.0, 1.0)) * h;
    let i = (x.floor() as usize).min(n - 2);
    let j = (y.floor() as usize).min(n - 2);
    let fx = x - i as f64;
    let fy = y - j as f64;
    let v00 = v[i * n + j];
    let v01 = v[i * n + j + 1];
    let v10 = v[(i + 1) * n + j];
    let v11 = v[(i + 1) * n + j + 1];
    let r = v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy;
    r.clamp(0.0, 1.0)
}

impl DpPolicy {
    pub fn node(&self, i: usize) -> f64 {
        i as f64 / (self.config.grid_n - 1) as f64
    }

    /// Interpolated V_k(r1, r2).
    pub fn value(&self, k: usize, r1: f64, r2: f64) -> f64 {
        bilinear(&self.values[k], self.config.grid_n, r1, r2)
    }

    pub fn value_at_node(&self, k: usize, i: usize, j: usize) -> f64 {
        self.values[k][i * self.config.grid_n + j]
    }

    pub fn control_at_node(&self, k: usize, i: usize, j: usize) -> DpControl {
        self.controls[k - 1][i * self.config.grid_n + j]
    }
}

/// Backward recursion V_k(r) = max_u V_{k−1}(f(r, u)) with V_0 = r2.
pub fn value_iteration(sys: &SpinSystem, cfg: DpConfig) -> Result<DpPolicy> {
    sys.validate()?;
    if sys.k_c() != 0.0 {
        return Err(Error::param("the stage map is defined for k_c = 0 only"));
    }
    if !(sys.j > 0.0) {
        return Err(Error::param("J must be positive"));
    }
    if cfg.grid_n < 50 || cfg.beta_n < 2 || cfg.tau_n < 2 || cfg.stages < 1 {
        return Err(Error::param(format!("degenerate grid {cfg:?} (need grid_n >= 50)")));
    }
    let n = cfg.grid_n;
    let h = 1.0 / (n - 1) as f64;
    let set = ControlSet::new(sys, &cfg);
    let v0: Vec<f64> = (0..n * n).map(|idx| (idx % n) as f64 * h).collect();
    let mut values = vec![v0];
    let mut controls = Vec::with_capacity(cfg.stages);
    for _k in 1..=cfg.stages {
        let prev = values.last().unwrap();
        let out: Vec<(f64, DpControl)> = (0..n * n)
            .into_par_iter()
            .map(|idx| {
                let r1 = (idx / n) as f64 * h;
                let r2 = (idx % n) as f64 * h;
                let (v, u) = set.argmax(r1, r2, |p, q| bilinear(prev, n, p, q));
                (v.clamp(0.0, 1.0), u)
            })
            .collect();
        values.push(out.iter().map(|x| x.0).collect());
        controls.push(out.into_iter().map(|x| x.1).collect());
    }
    Ok(DpPolicy { sys: *sys, config: cfg, values, controls })
}

/// Forward pass of the stage map from (1, 0); returns the final |r2|.
pub fn stage_replay(sys: &SpinSystem, controls: &[DpControl]) -> f64 {
    let (mut r1, mut r2) = (1.0, 0.0);
    for u in controls {
        (r1, r2) = stage_map(r1, r2, u.beta1, u.beta2, u.tau, sys);
    }
    r2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub dante: DanteSequence,
    pub controls: Vec<DpControl>,
    /// stage-map prediction of the final ⟨2IzSz⟩
    pub predicted: f64,
    /// V_N(1, 0) from the value table
    pub value: f64,
}

fn free_evolution(sys: &SpinSystem, tau: f64, r1: &mut Vector3<f64>, r2: &mut Vector3<f64>) {
    let e = (-PI * sys.k_a() * tau).exp();
    let (s, c) = (PI * sys.j * tau).sin_cos();
    let (x1, y1, x2, y2) = (r1.x, r1.y, r2.x, r2.y);
    r1.x = e * (x1 * c - y2 * s);
    r2.y = e * (y2 * c + x1 * s);
    r1.y = e * (y1 * c + x2 * s);
    r2.x = e * (x2 * c - y1 * s);
}

fn frame(a: &Vector3<f64>, b: &Vector3<f64>, fallback: &Vector3<f64>) -> Matrix3<f64> {
    let e1 = a.normalize();
    let mut e2 = b - e1 * e1.dot(b);
    if e2.norm() < 1e-12 {
        e2 = fallback - e1 * e1.dot(fallback);
    }
    let e2 = e2.normalize();
    let e3 = e1.cross(&e2);
    Matrix3::from_columns(&[e1, e2, e3])
}

/// Orthonormal frame built from whichever of (r1, r2) is non-negligible.
fn pair_frame(r1: &Vector3<f64>, r2: &Vector3<f64>) -> Matrix3<f64> {
    if r1.norm() > 1e-12 {
        frame(r1, r2, &Vector3::y())
    } else {
        let f = frame(r2, &Vector3::x(), &Vector3::z());
        // keep the (r1-slot, r2-slot) ordering
        Matrix3::from_columns(&[f.column(1).into(), f.column(0).into(), -f.column(2)])
    }
}

/// Split a rotation into a z rotation followed by a transverse-axis rotation:
/// R = R_n(β)·Rz(ψ). Returns (β, azimuth of n, ψ).
fn transverse_then_z(r: &Rotation3<f64>) -> (f64, f64, f64) {
    let v = r * Vector3::z();
    let beta = v.z.clamp(-1.0, 1.0).acos();
    let axis = Vector3::z().cross(&v);
    let (rn, az) = if axis.norm() < 1e-14 {
        if v.z > 0.0 {
            (Rotation3::identity(), 0.0)
        } else {
            (Rotation3::from_axis_angle(&Vector3::x_axis(), PI), 0.0)
        }
    } else {
        let a = Unit::new_normalize(axis);
        (Rotation3::from_axis_angle(&a, beta), a.y.atan2(a.x))
    };
    let rz = rn.inverse() * r;
    let m = rz.matrix();
    let psi = m[(1, 0)].atan2(m[(0, 0)]);
    let beta = if axis.norm() < 1e-14 && v.z <= 0.0 { PI } else { beta };
    (beta, az, psi)
}

/// Forward pass from (r1, r2) = (1, 0) that turns the policy into pulses.
///
/// At every stage the best control is re-evaluated at the exact (off-grid)
/// state, the reorientation is realized as one transverse-axis pulse plus a
/// bookkeeping z rotation absorbed into later phases, and the delay follows.
/// A final pulse rotates r2 onto +z.
pub fn extract_sequence(policy: &DpPolicy) -> Result<Extraction> {
    let cfg = policy.config;
    if policy.values.len() != cfg.stages + 1
        || policy.controls.len() != cfg.stages
        || policy.values.iter().any(|v| v.len() != cfg.grid_n * cfg.grid_n)
    {
        return Err(Error::param("policy tables do not match the grid configuration"));
    }
    let sys = &policy.sys;
    let set = ControlSet::new(sys, &cfg);
    let mut r1 = Vector3::z();
    let mut r2 = Vector3::zeros();
    let mut frame_offset = 0.0;
    let mut steps: Vec<DanteStep> = Vec::new();
    let mut controls = Vec::with_capacity(cfg.stages);
    let push_pulse = |steps: &mut Vec<DanteStep>, beta: f64, phase: f64| {
        if beta.abs() > 1e-12 {
            let (flip, p) = canonical_pulse(beta, phase);
            steps.push(DanteStep { flip, phase: p, delay: 0.0 });
        }
    };
    for k in (1..=cfg.stages).rev() {
        let (m1, m2) = (r1.norm(), r2.norm());
        let (_, u) = set.argmax(m1, m2, |p, q| policy.value(k - 1, p, q));
        controls.push(u);
        let t1 = Vector3::new(u.beta1.cos(), 0.0, u.beta1.sin()) * m1;
        let t2 = Vector3::new(0.0, u.beta2.cos(), u.beta2.sin()) * m2;
        let from = pair_frame(&r1, &r2);
        let to = pair_frame(&t1, &t2);
        let rot = Rotation3::from_matrix_unchecked(to * from.transpose());
        let (beta, az, psi) = transverse_then_z(&rot);
        // the z part only relabels the frame: absorb it, then pulse
        frame_offset -= psi;
        push_pulse(&mut steps, beta, az + frame_offset);
        r1 = t1;
        r2 = t2;
        if u.tau > 0.0 {
            free_evolution(sys, u.tau, &mut r1, &mut r2);
            match steps.last_mut() {
                Some(s) => s.delay += u.tau,
                None => steps.push(DanteStep { flip: 0.0, phase: 0.0, delay: u.tau }),
            }
        }
    }
    // read out: r2 → +z
    if r2.norm() > 0.0 {
        let v = r2.normalize();
        let axis = v.cross(&Vector3::z());
        let beta = v.z.clamp(-1.0, 1.0).acos();
        if axis.norm() > 1e-14 {
            push_pulse(&mut steps, beta, axis.y.atan2(axis.x) + frame_offset);
        } else if v.z < 0.0 {
            push_pulse(&mut steps, PI, frame_offset);
        }
    }
    let predicted = stage_replay(sys, &controls);
    Ok(Extraction {
        dante: DanteSequence { steps },
        controls,
        predicted,
        value: policy.value(cfg.stages, 1.0, 0.0),
    })
}

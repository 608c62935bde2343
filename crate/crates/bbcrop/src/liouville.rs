//! Two-spin Liouville space: product-operator basis, generator of the
//! relaxing master equation, and piecewise-constant propagation.
//!
//! Conventions (fixed once, used everywhere):
//! * `H = 2π (J·IzSz + ν_I·Iz + ν_S·Sz + A_I(cosφ_I·Ix + sinφ_I·Iy) + A_S(…))`, all in Hz.
//! * Relaxation enters as `−π k [Q, [Q', ρ]]` so every auto term damps. With
//!   this sign the transverse (Ix, 2IxSz) block is `−π [[k_a, k_c], [k_c, k_a]]`,
//!   symmetric with off-diagonal `−π k_c`.
//! * A control with `H = 2π A·(n·I)` rotates the I vector positively about `n`
//!   (`dr/dt = 2πA n × r`), so a pulse of phase π/2 takes Iz to Ix.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::OnceLock;

use nalgebra::{Matrix4, SMatrix, SVector, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DIM: usize = 16;
pub type Superop = SMatrix<f64, DIM, DIM>;
pub type Coeffs = SVector<f64, DIM>;

type Op = Matrix4<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    E,
    Ix,
    Iy,
    Iz,
    Sx,
    Sy,
    Sz,
    IxSx,
    IxSy,
    IxSz,
    IySx,
    IySy,
    IySz,
    IzSx,
    IzSy,
    IzSz,
}

impl Basis {
    pub const ALL: [Basis; DIM] = [
        Basis::E,
        Basis::Ix,
        Basis::Iy,
        Basis::Iz,
        Basis::Sx,
        Basis::Sy,
        Basis::Sz,
        Basis::IxSx,
        Basis::IxSy,
        Basis::IxSz,
        Basis::IySx,
        Basis::IySy,
        Basis::IySz,
        Basis::IzSx,
        Basis::IzSy,
        Basis::IzSz,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Conventional product-operator label; bilinear terms carry the factor 2.
    pub fn name(self) -> &'static str {
        const NAMES: [&str; DIM] = [
            "E/2", "Ix", "Iy", "Iz", "Sx", "Sy", "Sz", "2IxSx", "2IxSy", "2IxSz", "2IySx",
            "2IySy", "2IySz", "2IzSx", "2IzSy", "2IzSz",
        ];
        NAMES[self.index()]
    }

    pub fn from_name(label: &str) -> Result<Basis> {
        let l = label.trim();
        let l = if l == "E" { "E/2" } else { l };
        Basis::ALL
            .iter()
            .copied()
            .find(|b| b.name() == l)
            .ok_or_else(|| Error::param(format!("unknown basis operator '{label}'")))
    }
}

/// Coupling constant and relaxation rates, all in Hz with rates a factor π
/// smaller than the conventional definitions (k_a = 1/(π T2)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinSystem {
    pub j: f64,
    pub k_dd: f64,
    pub k_csa_i: f64,
    pub k_csa_s: f64,
    pub kc_i: f64,
    pub kc_s: f64,
}

impl SpinSystem {
    pub fn new(j: f64, k_dd: f64, k_csa_i: f64, k_csa_s: f64, kc_i: f64, kc_s: f64) -> Result<Self> {
        let s = SpinSystem { j, k_dd, k_csa_i, k_csa_s, kc_i, kc_s };
        s.validate()?;
        Ok(s)
    }

    /// System with the given aggregates: all auto relaxation of I put in
    /// k_DD, all cross-correlation in kc_I, spin S unrelaxed apart from k_DD.
    pub fn from_aggregates(j: f64, k_a: f64, k_c: f64) -> Result<Self> {
        SpinSystem::new(j, k_a, 0.0, 0.0, k_c, 0.0)
    }

    pub fn k_a(&self) -> f64 {
        self.k_dd + self.k_csa_i
    }

    pub fn k_c(&self) -> f64 {
        self.kc_i
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.j, self.k_dd, self.k_csa_i, self.k_csa_s, self.kc_i, self.kc_s];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("spin system contains non-finite values"));
        }
        if self.k_dd < 0.0 || self.k_csa_i < 0.0 || self.k_csa_s < 0.0 {
            return Err(Error::param("auto-relaxation rates must be non-negative"));
        }
        let tol = 1e-12 * (1.0 + self.k_a().abs());
        if self.kc_i.abs() > self.k_dd + self.k_csa_i + tol {
            return Err(Error::param(format!(
                "|kc_I| = {} exceeds kDD + kCSA_I = {}",
                self.kc_i.abs(),
                self.k_dd + self.k_csa_i
            )));
        }
        if self.kc_s.abs() > self.k_dd + self.k_csa_s + tol {
            return Err(Error::param(format!(
                "|kc_S| = {} exceeds kDD + kCSA_S = {}",
                self.kc_s.abs(),
                self.k_dd + self.k_csa_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    I,
    S,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::I => "I",
            Channel::S => "S",
        }
    }
}

/// rf amplitudes (Hz) and phases (rad) per channel plus chemical-shift
/// offsets (Hz).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlSettings {
    pub rf_amp_i: f64,
    pub rf_phase_i: f64,
    pub rf_amp_s: f64,
    pub rf_phase_s: f64,
    pub offset_i: f64,
    pub offset_s: f64,
}

impl ControlSettings {
    pub fn offsets(offset_i: f64, offset_s: f64) -> Self {
        ControlSettings { offset_i, offset_s, ..Default::default() }
    }

    /// Phases reduced to [0, 2π).
    pub fn normalized(mut self) -> Self {
        self.rf_phase_i = wrap_2pi(self.rf_phase_i);
        self.rf_phase_s = wrap_2pi(self.rf_phase_s);
        self
    }

    fn validate(&self) -> Result<()> {
        let vals = [
            self.rf_amp_i,
            self.rf_phase_i,
            self.rf_amp_s,
            self.rf_phase_s,
            self.offset_i,
            self.offset_s,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("control settings contain non-finite values"));
        }
        if self.rf_amp_i < 0.0 || self.rf_amp_s < 0.0 {
            return Err(Error::param("rf amplitudes must be non-negative"));
        }
        Ok(())
    }
}

pub fn wrap_2pi(x: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let r = x.rem_euclid(t);
    if r >= t {
        0.0
    } else {
        r
    }
}

/// Density-operator coefficients over the orthonormal product basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiouvilleState {
    pub coeffs: Coeffs,
}

impl LiouvilleState {
    pub fn zero() -> Self {
        LiouvilleState { coeffs: Coeffs::zeros() }
    }

    pub fn basis(b: Basis) -> Self {
        let mut s = Self::zero();
        s.coeffs[b.index()] = 1.0;
        s
    }

    /// ρ(0) = Iz.
    pub fn initial() -> Self {
        Self::basis(Basis::Iz)
    }

    pub fn get(&self, b: Basis) -> f64 {
        self.coeffs[b.index()]
    }

    pub fn set(&mut self, b: Basis, v: f64) {
        self.coeffs[b.index()] = v;
    }

    /// In-phase vector (⟨Ix⟩, ⟨Iy⟩, ⟨Iz⟩).
    pub fn r1(&self) -> Vector3<f64> {
        Vector3::new(self.get(Basis::Ix), self.get(Basis::Iy), self.get(Basis::Iz))
    }

    /// Antiphase vector (⟨2IxSz⟩, ⟨2IySz⟩, ⟨2IzSz⟩).
    pub fn r2(&self) -> Vector3<f64> {
        Vector3::new(self.get(Basis::IxSz), self.get(Basis::IySz), self.get(Basis::IzSz))
    }

    pub fn apply(&self, u: &Superop) -> Self {
        LiouvilleState { coeffs: u * self.coeffs }
    }

    /// Norm of the 15 traceless coefficients.
    pub fn traceless_norm(&self) -> f64 {
        self.coeffs.rows(1, DIM - 1).norm()
    }
}

/// Trace{C ρ} for a normalized basis operator C.
pub fn expectation(state: &LiouvilleState, label: &str) -> Result<f64> {
    Ok(state.get(Basis::from_name(label)?))
}

// ---------------------------------------------------------------------------
// operator algebra

fn kron2(a: [[Complex64; 2]; 2], b: [[Complex64; 2]; 2]) -> Op {
    let mut m = Op::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    m[(2 * i + k, 2 * j + l)] = a[i][j] * b[k][l];
                }
            }
        }
    }
    m
}

fn spin_half() -> [[[Complex64; 2]; 2]; 4] {
    let z = Complex64::new(0.0, 0.0);
    let h = Complex64::new(0.5, 0.0);
    let ih = Complex64::new(0.0, 0.5);
    let one = Complex64::new(1.0, 0.0);
    [
        [[one, z], [z, one]],
        [[z, h], [h, z]],
        [[z, -ih], [ih, z]],
        [[h, z], [z, -h]],
    ]
}

struct Algebra {
    basis: [Op; DIM],
    iz: Op,
    sz: Op,
    ix: Op,
    iy: Op,
    sx: Op,
    sy: Op,
    izsz: Op,
}

fn algebra() -> &'static Algebra {
    static ALG: OnceLock<Algebra> = OnceLock::new();
    ALG.get_or_init(|| {
        let s = spin_half();
        let id = s[0];
        let ix = kron2(s[1], id);
        let iy = kron2(s[2], id);
        let iz = kron2(s[3], id);
        let sx = kron2(id, s[1]);
        let sy = kron2(id, s[2]);
        let sz = kron2(id, s[3]);
        let two = Complex64::new(2.0, 0.0);
        let e2 = kron2(id, id) * Complex64::new(0.5, 0.0);
        let i_ops = [ix, iy, iz];
        let s_ops = [sx, sy, sz];
        let mut basis = [Op::zeros(); DIM];
        basis[0] = e2;
        basis[1] = ix;
        basis[2] = iy;
        basis[3] = iz;
        basis[4] = sx;
        basis[5] = sy;
        basis[6] = sz;
        for a in 0..3 {
            for b in 0..3 {
                basis[7 + 3 * a + b] = (i_ops[a] * s_ops[b]) * two;
            }
        }
        Algebra { basis, iz, sz, ix, iy, sx, sy, izsz: iz * sz }
    })
}

fn comm(a: &Op, b: &Op) -> Op {
    a * b - b * a
}

/// Superoperator matrix of a linear map on operators, M_ij = Tr(B_i L(B_j)).
fn superop_of(f: impl Fn(&Op) -> Op) -> Superop {
    let alg = algebra();
    let mut m = Superop::zeros();
    for j in 0..DIM {
        let lj = f(&alg.basis[j]);
        for i in 0..DIM {
            m[(i, j)] = (alg.basis[i] * lj).trace().re;
        }
    }
    m
}

fn hamiltonian_gen(h: &Op) -> Superop {
    let mi = Complex64::new(0.0, -1.0);
    superop_of(|r| comm(h, r) * mi)
}

fn double_comm_gen(q: &Op, p: &Op) -> Superop {
    superop_of(|r| comm(q, &comm(p, r)) * Complex64::new(-std::f64::consts::PI, 0.0))
}

/// Unit generators; the generator is linear in every parameter.
struct Units {
    j: Superop,
    off_i: Superop,
    off_s: Superop,
    ix: Superop,
    iy: Superop,
    sx: Superop,
    sy: Superop,
    dd: Superop,
    csa_i: Superop,
    csa_s: Superop,
    cc_i: Superop,
    cc_s: Superop,
}

fn units() -> &'static Units {
    static U: OnceLock<Units> = OnceLock::new();
    U.get_or_init(|| {
        let a = algebra();
        let tp = Complex64::new(std::f64::consts::TAU, 0.0);
        let two_izsz = a.izsz * Complex64::new(2.0, 0.0);
        Units {
            j: hamiltonian_gen(&(a.izsz * tp)),
            off_i: hamiltonian_gen(&(a.iz * tp)),
            off_s: hamiltonian_gen(&(a.sz * tp)),
            ix: hamiltonian_gen(&(a.ix * tp)),
            iy: hamiltonian_gen(&(a.iy * tp)),
            sx: hamiltonian_gen(&(a.sx * tp)),
            sy: hamiltonian_gen(&(a.sy * tp)),
            dd: double_comm_gen(&two_izsz, &two_izsz),
            csa_i: double_comm_gen(&a.iz, &a.iz),
            csa_s: double_comm_gen(&a.sz, &a.sz),
            cc_i: double_comm_gen(&two_izsz, &a.iz),
            cc_s: double_comm_gen(&two_izsz, &a.sz),
        }
    })
}

/// Generator of the free (rf-off) dynamics without offsets.
fn relaxation_and_coupling(sys: &SpinSystem) -> Superop {
    let u = units();
    u.j * sys.j
        + u.dd * sys.k_dd
        + u.csa_i * sys.k_csa_i
        + u.csa_s * sys.k_csa_s
        + u.cc_i * sys.kc_i
        + u.cc_s * sys.kc_s
}

/// Generator of the master equation on the coefficient vector.
pub fn build_generator(sys: &SpinSystem, ctl: &ControlSettings) -> Result<Superop> {
    sys.validate()?;
    ctl.validate()?;
    let u = units();
    let mut g = relaxation_and_coupling(sys);
    g += u.off_i * ctl.offset_i + u.off_s * ctl.offset_s;
    if ctl.rf_amp_i != 0.0 {
        g += (u.ix * ctl.rf_phase_i.cos() + u.iy * ctl.rf_phase_i.sin()) * ctl.rf_amp_i;
    }
    if ctl.rf_amp_s != 0.0 {
        g += (u.sx * ctl.rf_phase_s.cos() + u.sy * ctl.rf_phase_s.sin()) * ctl.rf_amp_s;
    }
    Ok(g)
}

/// Generator of a unit-rate (1 rad per unit time) rotation of one spin about
/// `axis` (normalized internally).
pub fn rotation_generator(channel: Channel, axis: [f64; 3]) -> Result<Superop> {
    let n = Vector3::from(axis);
    let norm = n.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::Axis(format!("rotation axis {axis:?} is not a nonzero vector")));
    }
    let n = n / norm;
    let u = units();
    let (gx, gy, gz) = match channel {
        Channel::I => (&u.ix, &u.iy, &u.off_i),
        Channel::S => (&u.sx, &u.sy, &u.off_s),
    };
    Ok((gx * n.x + gy * n.y + gz * n.z) / std::f64::consts::TAU)
}

/// Instantaneous rotation superoperator by `angle` about `axis` on one spin.
pub fn rotation(channel: Channel, axis: [f64; 3], angle: f64) -> Result<Superop> {
    Ok(expm(&(rotation_generator(channel, axis)? * angle)))
}

/// Hard pulse: rotation by `flip` about the transverse axis at `phase`.
pub fn hard_pulse(channel: Channel, flip: f64, phase: f64) -> Superop {
    let g = rotation_generator(channel, [phase.cos(), phase.sin(), 0.0])
        .expect("transverse axis is always valid");
    expm(&(g * flip))
}

fn one_norm(a: &Superop) -> f64 {
    a.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
///
/// The scaled matrix has 1-norm ≤ 1/4 and 18 terms are kept, so the series
/// truncation error is below 1e-22 relative before squaring.
pub fn expm(a: &Superop) -> Superop {
    let norm = one_norm(a);
    let mut s = 0i32;
    if norm > 0.25 {
        s = (norm / 0.25).log2().ceil() as i32;
    }
    let scaled = a / 2f64.powi(s);
    let mut result = Superop::identity();
    let mut term = Superop::identity();
    for k in 1..=18 {
        term = term * scaled / k as f64;
        result += term;
    }
    for _ in 0..s {
        result = result * result;
    }
    result
}

/// Advance a state by exp(gen·dt).
pub fn propagate(state: &LiouvilleState, gen: &Superop, dt: f64) -> Result<LiouvilleState> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::param(format!("time step must be finite and >= 0, got {dt}")));
    }
    if gen.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("generator has non-finite entries".into()));
    }
    if dt == 0.0 {
        return Ok(*state);
    }
    Ok(state.apply(&expm(&(gen * dt))))
}

/// Memo of exp(gen·dt) keyed by the exact bit pattern of (gen, dt).
#[derive(Default)]
pub struct PropagatorCache {
    map: HashMap<u64, Vec<(Box<Superop>, u64, Box<Superop>)>>,
    hits: usize,
    misses: usize,
}

impl PropagatorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, gen: &Superop, dt: f64) -> Result<Superop> {
        if !(dt >= 0.0) || !dt.is_finite() {
            return Err(Error::param(format!("time step must be finite and >= 0, got {dt}")));
        }
        if gen.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("generator has non-finite entries".into()));
        }
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for x in gen.iter() {
            x.to_bits().hash(&mut h);
        }
        dt.to_bits().hash(&mut h);
        let key = h.finish();
        let bucket = self.map.entry(key).or_default();
        if let Some((_, _, u)) = bucket.iter().find(|(g, d, _)| *d == dt.to_bits() && **g == *gen) {
            self.hits += 1;
            return Ok(**u);
        }
        self.misses += 1;
        let u = expm(&(gen * dt));
        bucket.push((Box::new(*gen), dt.to_bits(), Box::new(u)));
        Ok(u)
    }

    pub fn stats(&self) -> (usize, usize) {
        (self.hits, self.misses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn pure_j(j: f64) -> SpinSystem {
        SpinSystem::new(j, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap()
    }

    fn idx(b: Basis) -> usize {
        b.index()
    }

    #[test]
    fn basis_is_orthonormal() {
        let a = algebra();
        for i in 0..DIM {
            for j in 0..DIM {
                let t = (a.basis[i] * a.basis[j]).trace();
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(t.re, want, epsilon = 1e-14);
                assert_abs_diff_eq!(t.im, 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn names_round_trip() {
        for b in Basis::ALL {
            assert_eq!(Basis::from_name(b.name()).unwrap(), b);
        }
        assert!(Basis::from_name("Iw").is_err());
        assert!(expectation(&LiouvilleState::initial(), "2IqSz").is_err());
    }

    #[test]
    fn pure_j_couples_inphase_and_antiphase() {
        let g = build_generator(&pure_j(1.0), &ControlSettings::default()).unwrap();
        assert_abs_diff_eq!(g[(idx(Basis::IySz), idx(Basis::Ix))], PI, epsilon = 1e-12);
        assert_abs_diff_eq!(g[(idx(Basis::Ix), idx(Basis::IySz))], -PI, epsilon = 1e-12);
        assert_abs_diff_eq!(g[(idx(Basis::IxSz), idx(Basis::Iy))], -PI, epsilon = 1e-12);
        assert_abs_diff_eq!(g[(idx(Basis::Iy), idx(Basis::IxSz))], PI, epsilon = 1e-12);
        for j in 0..DIM {
            assert_eq!(g[(idx(Basis::Iz), j)], 0.0);
        }
    }

    #[test]
    fn csa_damps_transverse_only() {
        let sys = SpinSystem::new(0.0, 0.0, 2.0, 0.0, 0.0, 0.0).unwrap();
        let g = build_generator(&sys, &ControlSettings::default()).unwrap();
        assert_abs_diff_eq!(g[(idx(Basis::Ix), idx(Basis::Ix))], -2.0 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(g[(idx(Basis::Iy), idx(Basis::Iy))], -2.0 * PI, epsilon = 1e-12);
        for j in 0..DIM {
            assert_eq!(g[(idx(Basis::Iz), j)], 0.0);
        }
    }

    #[test]
    fn transverse_block_matches_hand_expansion() {
        // [2IzSz,[2IzSz,Ix]] = Ix, [2IzSz,[Iz,Ix]] = 2IxSz and vice versa,
        // so the (Ix, 2IxSz) block is -π[[k_a, k_c], [k_c, k_a]].
        let (ka, kc) = (1.0, 0.75);
        let sys = SpinSystem::from_aggregates(1.0, ka, kc).unwrap();
        let g = build_generator(&sys, &ControlSettings::default()).unwrap();
        let (x, a) = (idx(Basis::Ix), idx(Basis::IxSz));
        assert_abs_diff_eq!(g[(x, x)], -PI * ka, epsilon = 1e-12);
        assert_abs_diff_eq!(g[(a, a)], -PI * ka, epsilon = 1e-12);
        assert_abs_diff_eq!(g[(x, a)], -PI * kc, epsilon = 1e-12);
        assert_abs_diff_eq!(g[(a, x)], -PI * kc, epsilon = 1e-12);
    }

    #[test]
    fn identity_row_and_column_vanish() {
        let sys = SpinSystem::new(3.0, 1.0, 0.5, 0.2, 0.7, 0.1).unwrap();
        let ctl = ControlSettings {
            rf_amp_i: 5.0,
            rf_phase_i: 0.3,
            rf_amp_s: 2.0,
            rf_phase_s: 1.1,
            offset_i: 0.7,
            offset_s: -0.4,
        };
        let g = build_generator(&sys, &ctl).unwrap();
        for k in 0..DIM {
            assert_eq!(g[(0, k)], 0.0);
            assert_eq!(g[(k, 0)], 0.0);
        }
    }

    #[test]
    fn invalid_rates_rejected() {
        assert!(SpinSystem::new(1.0, -0.1, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(SpinSystem::new(1.0, 1.0, 0.0, 0.0, 1.5, 0.0).is_err());
        assert!(SpinSystem::new(1.0, 1.0, 0.0, 0.0, 0.0, 1.5).is_err());
        let bad = SpinSystem { j: 1.0, k_dd: 1.0, k_csa_i: 0.0, k_csa_s: 0.0, kc_i: 2.0, kc_s: 0.0 };
        assert!(build_generator(&bad, &ControlSettings::default()).is_err());
    }

    #[test]
    fn zero_step_is_identity() {
        let g = build_generator(&pure_j(1.0), &ControlSettings::default()).unwrap();
        let s = LiouvilleState::basis(Basis::Ix);
        assert_eq!(propagate(&s, &g, 0.0).unwrap(), s);
        assert!(propagate(&s, &g, -1.0).is_err());
        let mut nan = g;
        nan[(1, 1)] = f64::NAN;
        assert!(propagate(&s, &nan, 1.0).is_err());
    }

    #[test]
    fn antiphase_evolution() {
        let j = 193.6;
        let g = build_generator(&pure_j(j), &ControlSettings::default()).unwrap();
        let s = propagate(&LiouvilleState::basis(Basis::Ix), &g, 1.0 / (2.0 * j)).unwrap();
        assert_abs_diff_eq!(s.get(Basis::IySz), 1.0, epsilon = 1e-9);
        for b in Basis::ALL.iter().filter(|b| **b != Basis::IySz) {
            assert!(s.get(*b).abs() <= 1e-9, "{:?} = {}", b, s.get(*b));
        }
        let q = propagate(&LiouvilleState::basis(Basis::Ix), &g, 1.0 / (4.0 * j)).unwrap();
        assert_abs_diff_eq!(expectation(&q, "Ix").unwrap(), (PI / 4.0).cos(), epsilon = 1e-12);
    }

    #[test]
    fn scalar_decay() {
        let ka = 2.5;
        let sys = SpinSystem::from_aggregates(0.0, ka, 0.0).unwrap();
        let g = build_generator(&sys, &ControlSettings::default()).unwrap();
        let t = 0.137;
        let s = propagate(&LiouvilleState::basis(Basis::Ix), &g, t).unwrap();
        assert_abs_diff_eq!(s.get(Basis::Ix), (-PI * ka * t).exp(), epsilon = 1e-12);
    }

    #[test]
    fn initial_state_expectations() {
        let s = LiouvilleState::initial();
        assert_eq!(expectation(&s, "Iz").unwrap(), 1.0);
        assert_eq!(expectation(&s, "2IzSz").unwrap(), 0.0);
    }

    #[test]
    fn pulse_convention() {
        // phase π/2 (about +y) takes Iz to +Ix; phase 0 (about +x) takes Iz to -Iy
        let s = LiouvilleState::initial().apply(&hard_pulse(Channel::I, PI / 2.0, PI / 2.0));
        assert_abs_diff_eq!(s.get(Basis::Ix), 1.0, epsilon = 1e-12);
        let s = LiouvilleState::initial().apply(&hard_pulse(Channel::I, PI / 2.0, 0.0));
        assert_abs_diff_eq!(s.get(Basis::Iy), -1.0, epsilon = 1e-12);
        // a pulse at the same rate through the generator agrees
        let ctl = ControlSettings { rf_amp_i: 1000.0, rf_phase_i: PI / 2.0, ..Default::default() };
        let g = build_generator(&pure_j(0.0), &ctl).unwrap();
        let s = propagate(&LiouvilleState::initial(), &g, 0.25e-3).unwrap();
        assert_abs_diff_eq!(s.get(Basis::Ix), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn expm_matches_pade_reference() {
        let sys = SpinSystem::new(193.6, 150.0, 43.6, 20.0, 120.0, 10.0).unwrap();
        let ctl = ControlSettings {
            rf_amp_i: 13000.0,
            rf_phase_i: 0.4,
            rf_amp_s: 8000.0,
            rf_phase_s: 2.0,
            offset_i: 900.0,
            offset_s: -300.0,
        };
        let g = build_generator(&sys, &ctl).unwrap() * 3.7e-5;
        let ours = expm(&g);
        let reference = g.exp();
        assert!((ours - reference).amax() < 1e-11);
    }

    #[test]
    fn cache_returns_identical_propagators() {
        let g = build_generator(&pure_j(10.0), &ControlSettings::default()).unwrap();
        let mut c = PropagatorCache::new();
        let a = c.get(&g, 1e-3).unwrap();
        let b = c.get(&g, 1e-3).unwrap();
        assert_eq!(a, b);
        assert_eq!(c.stats(), (1, 1));
        let _ = c.get(&g, 2e-3).unwrap();
        assert_eq!(c.stats(), (1, 2));
    }

    fn arb_system() -> impl Strategy<Value = SpinSystem> {
        (0.0..300.0f64, 0.0..200.0f64, 0.0..100.0f64, 0.0..100.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_map(|(j, dd, ci, cs, fi, fs)| {
                SpinSystem::new(j, dd, ci, cs, fi * (dd + ci), fs * (dd + cs)).unwrap()
            })
    }

    fn arb_controls() -> impl Strategy<Value = ControlSettings> {
        (0.0..2e4f64, -7.0..7.0f64, 0.0..2e4f64, -7.0..7.0f64, -2e3..2e3f64, -2e3..2e3f64).prop_map(
            |(a, p, b, q, oi, os)| ControlSettings {
                rf_amp_i: a,
                rf_phase_i: p,
                rf_amp_s: b,
                rf_phase_s: q,
                offset_i: oi,
                offset_s: os,
            },
        )
    }

    fn arb_state() -> impl Strategy<Value = LiouvilleState> {
        proptest::collection::vec(-1.0..1.0f64, DIM).prop_map(|v| LiouvilleState {
            coeffs: Coeffs::from_iterator(v),
        })
    }

    /// Brute-force series with many terms on a step small enough to converge
    /// without squaring.
    fn taylor_reference(a: &Superop) -> Superop {
        let mut r = Superop::identity();
        let mut t = Superop::identity();
        for k in 1..60 {
            t = t * a / k as f64;
            r += t;
        }
        r
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn trace_is_preserved(sys in arb_system(), ctl in arb_controls(), s in arb_state(), dt in 0.0..2e-3f64) {
            let g = build_generator(&sys, &ctl).unwrap();
            let out = propagate(&s, &g, dt).unwrap();
            prop_assert!((out.get(Basis::E) - s.get(Basis::E)).abs() <= 1e-12);
            prop_assert!(out.coeffs.iter().all(|x| x.is_finite()));
        }

        #[test]
        fn free_evolution_is_dissipative(sys in arb_system(), oi in -2e3..2e3f64, os in -2e3..2e3f64, s in arb_state(), dt in 0.0..5e-3f64) {
            let g = build_generator(&sys, &ControlSettings::offsets(oi, os)).unwrap();
            let out = propagate(&s, &g, dt).unwrap();
            prop_assert!(out.traceless_norm() <= s.traceless_norm() * (1.0 + 1e-12) + 1e-14);
        }

        #[test]
        fn propagators_compose(sys in arb_system(), ctl in arb_controls(), s in arb_state(), t1 in 0.0..1e-3f64, t2 in 0.0..1e-3f64) {
            let g = build_generator(&sys, &ctl).unwrap();
            let once = propagate(&s, &g, t1 + t2).unwrap();
            let twice = propagate(&propagate(&s, &g, t1).unwrap(), &g, t2).unwrap();
            prop_assert!((once.coeffs - twice.coeffs).amax() <= 1e-10);
        }

        #[test]
        fn expm_matches_series(sys in arb_system(), ctl in arb_controls(), dt in 1e-7..2e-5f64) {
            let g = build_generator(&sys, &ctl).unwrap() * dt;
            prop_assert!((expm(&g) - taylor_reference(&g)).amax() <= 1e-9);
        }
    }
}

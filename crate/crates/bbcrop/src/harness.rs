//! Full-simulator evaluation of pulse sequences: single runs with buildup
//! traces, offset sweeps, rf-inhomogeneity averages, and the conventional
//! INEPT / CRIPT transfer baselines.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{DMatrix, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liouville::{
    build_generator, hard_pulse, rotation, Basis, Channel, ControlSettings, LiouvilleState, PropagatorCache,
    Superop, SpinSystem,
};
use crate::star::{Mode, PulseEvent, PulseSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// chemical-shift offsets (Hz)
    pub offset_i: f64,
    pub offset_s: f64,
    /// multiplicative rf amplitude errors per channel
    pub rf_scale_i: f64,
    pub rf_scale_s: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { offset_i: 0.0, offset_s: 0.0, rf_scale_i: 1.0, rf_scale_s: 1.0 }
    }
}

impl SimOptions {
    pub fn at_offset(offset_i: f64) -> Self {
        SimOptions { offset_i, ..Default::default() }
    }

    fn scale(&self, ch: Channel) -> f64 {
        match ch {
            Channel::I => self.rf_scale_i,
            Channel::S => self.rf_scale_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    /// index of the sequence entry that just finished
    pub entry: usize,
    pub r1: [f64; 3],
    pub r2: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// final ⟨2IzSz⟩
    pub efficiency: f64,
    /// (t, |r2|) after every entry, starting with (0, 0)
    pub trace: Vec<(f64, f64)>,
    pub samples: Vec<Sample>,
}

/// Per-channel rf/offset settings of one constant segment.
#[derive(Clone, Copy, Default)]
struct Drive {
    amp: f64,
    phase: f64,
    detune: f64,
}

struct Player<'a> {
    sys: &'a SpinSystem,
    opts: &'a SimOptions,
    cache: PropagatorCache,
}

impl<'a> Player<'a> {
    fn segment(&mut self, i: Drive, s: Drive, dt: f64) -> Result<Superop> {
        let ctl = ControlSettings {
            rf_amp_i: i.amp * self.opts.rf_scale_i,
            rf_phase_i: i.phase,
            rf_amp_s: s.amp * self.opts.rf_scale_s,
            rf_phase_s: s.phase,
            offset_i: self.opts.offset_i - i.detune,
            offset_s: self.opts.offset_s - s.detune,
        };
        let g = build_generator(self.sys, &ctl)?;
        self.cache.get(&g, dt)
    }

    fn instantaneous(&self, e: &PulseEvent) -> Result<Superop> {
        match e {
            PulseEvent::HardPulse { channel, flip, phase, nu1: None } => {
                Ok(hard_pulse(*channel, flip * self.opts.scale(*channel), *phase))
            }
            PulseEvent::Rotation { channel, axis, angle } => rotation(*channel, *axis, angle * self.opts.scale(*channel)),
            _ => Err(Error::param("event is not instantaneous")),
        }
    }

    /// (channel, drive, duration) of a finite pulse.
    fn finite(e: &PulseEvent) -> Result<(Channel, Drive, f64)> {
        match e {
            PulseEvent::HardPulse { channel, flip, phase, nu1: Some(n) } => {
                Ok((*channel, Drive { amp: *n, phase: *phase, detune: 0.0 }, flip / (TAU * n)))
            }
            PulseEvent::OffResonancePulse { channel, nu1, nu_off, duration, phase } => {
                Ok((*channel, Drive { amp: *nu1, phase: *phase, detune: *nu_off }, *duration))
            }
            _ => Err(Error::param("event is not a finite pulse")),
        }
    }

    /// Frame correction after an off-resonance pulse: the transmitter frame
    /// is ahead of the carrier frame by 2π ν_off τ about z.
    fn frame_shift(ch: Channel, d: &Drive, dur: f64) -> Result<Option<Superop>> {
        if d.detune == 0.0 {
            return Ok(None);
        }
        Ok(Some(rotation(ch, [0.0, 0.0, 1.0], TAU * d.detune * dur)?))
    }

    fn event(&mut self, e: &PulseEvent, rho: LiouvilleState) -> Result<LiouvilleState> {
        match e {
            PulseEvent::Delay { duration } => {
                let u = self.segment(Drive::default(), Drive::default(), *duration)?;
                Ok(rho.apply(&u))
            }
            PulseEvent::HardPulse { nu1: None, .. } | PulseEvent::Rotation { .. } => Ok(rho.apply(&self.instantaneous(e)?)),
            PulseEvent::HardPulse { .. } | PulseEvent::OffResonancePulse { .. } => {
                let (ch, d, dur) = Self::finite(e)?;
                let (i, s) = match ch {
                    Channel::I => (d, Drive::default()),
                    Channel::S => (Drive::default(), d),
                };
                let mut out = rho.apply(&self.segment(i, s, dur)?);
                if let Some(z) = Self::frame_shift(ch, &d, dur)? {
                    out = out.apply(&z);
                }
                Ok(out)
            }
            PulseEvent::Simultaneous(ev) => {
                if ev.iter().all(|x| x.duration() == 0.0) {
                    let mut out = rho;
                    for x in ev {
                        out = out.apply(&self.instantaneous(x)?);
                    }
                    return Ok(out);
                }
                let parts: Vec<(Channel, Drive, f64)> = ev.iter().map(Self::finite).collect::<Result<_>>()?;
                let total = parts.iter().map(|p| p.2).fold(0.0, f64::max);
                let mut cuts = vec![0.0, total];
                for p in &parts {
                    cuts.push(0.5 * (total - p.2));
                    cuts.push(0.5 * (total + p.2));
                }
                cuts.sort_by(f64::total_cmp);
                cuts.dedup_by(|a, b| (*a - *b).abs() <= 1e-15);
                let mut out = rho;
                for w in cuts.windows(2) {
                    let mid = 0.5 * (w[0] + w[1]);
                    let (mut di, mut ds) = (Drive::default(), Drive::default());
                    for p in &parts {
                        if (mid - 0.5 * total).abs() < 0.5 * p.2 {
                            match p.0 {
                                Channel::I => di = p.1,
                                Channel::S => ds = p.1,
                            }
                        }
                    }
                    out = out.apply(&self.segment(di, ds, w[1] - w[0])?);
                }
                // z rotations commute with everything but rf on their own
                // channel, which has ended by now
                for p in &parts {
                    if let Some(z) = Self::frame_shift(p.0, &p.1, p.2)? {
                        out = out.apply(&z);
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Play a sequence from `start`; optionally record a sample after each entry.
pub fn play(
    sys: &SpinSystem,
    seq: &PulseSequence,
    opts: &SimOptions,
    start: LiouvilleState,
    mut record: Option<&mut Vec<Sample>>,
) -> Result<LiouvilleState> {
    seq.validate()?;
    if !(opts.rf_scale_i > 0.0 && opts.rf_scale_s > 0.0) {
        return Err(Error::param("rf scale factors must be positive"));
    }
    let mut p = Player { sys, opts, cache: PropagatorCache::new() };
    let mut rho = start;
    let mut t = 0.0;
    for (k, entry) in seq.entries.iter().enumerate() {
        rho = p.event(&entry.event, rho)?;
        t += entry.event.duration();
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Sample { t, entry: k, r1: rho.r1().into(), r2: rho.r2().into() });
        }
    }
    if rho.coeffs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("simulation produced non-finite coefficients".into()));
    }
    Ok(rho)
}

/// Start from Iz, play the sequence, report ⟨2IzSz⟩ and the |r2| buildup.
pub fn run_sequence(sys: &SpinSystem, seq: &PulseSequence, opts: &SimOptions) -> Result<RunResult> {
    let mut samples = Vec::with_capacity(seq.entries.len());
    let rho = play(sys, seq, opts, LiouvilleState::initial(), Some(&mut samples))?;
    let mut trace = vec![(0.0, 0.0)];
    trace.extend(samples.iter().map(|s| (s.t, Vector3::from(s.r2).norm())));
    Ok(RunResult { efficiency: rho.get(Basis::IzSz), trace, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetProfile {
    /// offsets of spin I (Hz)
    pub offsets: Vec<f64>,
    pub efficiency: Vec<f64>,
    pub traces: Option<Vec<Vec<(f64, f64)>>>,
}

impl OffsetProfile {
    pub fn min(&self) -> f64 {
        self.efficiency.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets.len() != self.efficiency.len() || self.offsets.is_empty() {
            return Err(Error::param("profile needs matching, nonempty offset and efficiency lists"));
        }
        if self.offsets.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("offsets must be strictly increasing"));
        }
        if self.efficiency.iter().any(|e| !(e.abs() <= 1.0 + 1e-9)) {
            return Err(Error::param("efficiencies must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// `n` evenly spaced offsets in ±span·J.
pub fn offset_grid(sys: &SpinSystem, n: usize, span: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|k| sys.j * span * (2.0 * k as f64 / (n - 1) as f64 - 1.0)).collect()
}

fn check_offsets(offsets: &[f64]) -> Result<()> {
    if offsets.is_empty() {
        return Err(Error::param("offset grid is empty"));
    }
    if offsets.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::param("offsets must be strictly increasing"));
    }
    Ok(())
}

/// Efficiency at each offset of spin I (parallel over offsets, ordered output).
pub fn offset_profile(sys: &SpinSystem, seq: &PulseSequence, offsets: &[f64], base: &SimOptions, traces: bool) -> Result<OffsetProfile> {
    check_offsets(offsets)?;
    let runs: Vec<RunResult> = offsets
        .par_iter()
        .map(|&o| run_sequence(sys, seq, &SimOptions { offset_i: o, ..*base }))
        .collect::<Result<_>>()?;
    Ok(OffsetProfile {
        offsets: offsets.to_vec(),
        efficiency: runs.iter().map(|r| r.efficiency).collect(),
        traces: traces.then(|| runs.into_iter().map(|r| r.trace).collect()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfDistribution {
    /// full width at half maximum, as a fraction of the nominal amplitude
    pub fwhm: f64,
    pub samples: usize,
    /// (scale, weight) pairs, weights summing to one
    pub nodes: Vec<(f64, f64)>,
    /// scale the S channel by the same factor
    pub correlated: bool,
}

impl RfDistribution {
    /// Gaussian scale factors integrated with Gauss–Hermite quadrature.
    pub fn gaussian(fwhm: f64, samples: usize) -> Result<Self> {
        if !(fwhm >= 0.0 && fwhm.is_finite()) || samples == 0 {
            return Err(Error::param(format!("invalid rf distribution (fwhm {fwhm}, {samples} samples)")));
        }
        let nodes = if fwhm == 0.0 {
            vec![(1.0, 1.0)]
        } else {
            let sigma = fwhm / (2.0 * (2.0 * 2f64.ln()).sqrt());
            gauss_hermite(samples).into_iter().map(|(x, w)| (1.0 + sigma * 2f64.sqrt() * x, w)).collect::<Vec<_>>()
        };
        if nodes.iter().any(|n| n.0 <= 0.0) {
            return Err(Error::param("rf distribution reaches non-positive amplitudes"));
        }
        Ok(RfDistribution { fwhm, samples, nodes, correlated: true })
    }
}

/// Nodes and normalized weights for ∫ e^{−x²} f(x) dx / √π (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> Vec<(f64, f64)> {
    let mut m = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        m[(k, k - 1)] = b;
        m[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(m);
    let mut out: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = out.iter().map(|x| x.1).sum();
    out.iter_mut().for_each(|x| x.1 /= total);
    out
}

/// Offset profile averaged over rf amplitude scale factors.
pub fn rf_inhom_average(sys: &SpinSystem, seq: &PulseSequence, offsets: &[f64], dist: &RfDistribution) -> Result<OffsetProfile> {
    check_offsets(offsets)?;
    let cells: Vec<(usize, f64, f64)> = (0..offsets.len())
        .flat_map(|i| dist.nodes.iter().map(move |&(s, w)| (i, s, w)))
        .collect();
    let vals: Vec<f64> = cells
        .par_iter()
        .map(|&(i, s, w)| {
            let opts = SimOptions {
                offset_i: offsets[i],
                offset_s: 0.0,
                rf_scale_i: s,
                rf_scale_s: if dist.correlated { s } else { 1.0 },
            };
            run_sequence(sys, seq, &opts).map(|r| w * r.efficiency)
        })
        .collect::<Result<_>>()?;
    let mut eff = vec![0.0; offsets.len()];
    for (c, v) in cells.iter().zip(vals) {
        eff[c.0] += v;
    }
    Ok(OffsetProfile { offsets: offsets.to_vec(), efficiency: eff, traces: None })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCurve {
    /// total transfer delay (s)
    pub grid: Vec<f64>,
    pub efficiency: Vec<f64>,
    pub best: f64,
    pub best_at: f64,
}

fn best_of(grid: Vec<f64>, efficiency: Vec<f64>) -> BaselineCurve {
    let (mut best, mut best_at) = (f64::NEG_INFINITY, 0.0);
    for (t, e) in grid.iter().zip(&efficiency) {
        if *e > best {
            best = *e;
            best_at = *t;
        }
    }
    BaselineCurve { grid, efficiency, best, best_at }
}

/// 90°(I) – τ/2 – 180°(I,S) – τ/2 – 90°(I) read-out, ideal pulses.
pub fn inept_sequence(tau: f64) -> PulseSequence {
    let mut seq = PulseSequence::new(Mode::Ideal, None);
    seq.push("90I", PulseEvent::HardPulse { channel: Channel::I, flip: FRAC_PI_2, phase: FRAC_PI_2, nu1: None });
    seq.push("tau/2", PulseEvent::Delay { duration: 0.5 * tau });
    seq.push(
        "180IS",
        PulseEvent::Simultaneous(vec![
            PulseEvent::HardPulse { channel: Channel::I, flip: PI, phase: 0.0, nu1: None },
            PulseEvent::HardPulse { channel: Channel::S, flip: PI, phase: 0.0, nu1: None },
        ]),
    );
    seq.push("tau/2", PulseEvent::Delay { duration: 0.5 * tau });
    // 2IySz → 2IzSz
    seq.push("90I", PulseEvent::HardPulse { channel: Channel::I, flip: FRAC_PI_2, phase: 0.0, nu1: None });
    seq
}

/// 90°(I) – T/2 – 180°(I) – T/2 – 90°(I) read-out, ideal pulses.
pub fn cript_sequence(t: f64, kc_sign: f64) -> PulseSequence {
    let mut seq = PulseSequence::new(Mode::Ideal, None);
    seq.push("90I", PulseEvent::HardPulse { channel: Channel::I, flip: FRAC_PI_2, phase: FRAC_PI_2, nu1: None });
    seq.push("T/2", PulseEvent::Delay { duration: 0.5 * t });
    seq.push("180I", PulseEvent::HardPulse { channel: Channel::I, flip: PI, phase: 0.0, nu1: None });
    seq.push("T/2", PulseEvent::Delay { duration: 0.5 * t });
    // ∓2IxSz → 2IzSz
    let phase = if kc_sign >= 0.0 { FRAC_PI_2 } else { -FRAC_PI_2 };
    seq.push("90I", PulseEvent::HardPulse { channel: Channel::I, flip: FRAC_PI_2, phase, nu1: None });
    seq
}

/// Echoed INEPT over a grid of total delays τ in (0, 1/J].
pub fn inept_reference(sys: &SpinSystem, taus: &[f64], opts: &SimOptions) -> Result<BaselineCurve> {
    if taus.is_empty() || taus.iter().any(|&t| !(t > 0.0 && t <= 1.0 / sys.j * (1.0 + 1e-12))) {
        return Err(Error::param("INEPT delays must lie in (0, 1/J]"));
    }
    let eff: Vec<f64> = taus
        .par_iter()
        .map(|&t| run_sequence(sys, &inept_sequence(t), opts).map(|r| r.efficiency))
        .collect::<Result<_>>()?;
    Ok(best_of(taus.to_vec(), eff))
}

/// CRIPT (J refocused) over a grid of total delays T in (0, 4/k_c].
pub fn cript_reference(sys: &SpinSystem, ts: &[f64], opts: &SimOptions) -> Result<BaselineCurve> {
    let kc = sys.k_c();
    if kc == 0.0 {
        return Ok(best_of(ts.to_vec(), vec![0.0; ts.len()]));
    }
    if ts.is_empty() || ts.iter().any(|&t| !(t > 0.0 && t <= 4.0 / kc.abs() * (1.0 + 1e-12))) {
        return Err(Error::param("CRIPT delays must lie in (0, 4/|k_c|]"));
    }
    let eff: Vec<f64> = ts
        .par_iter()
        .map(|&t| run_sequence(sys, &cript_sequence(t, kc.signum()), opts).map(|r| r.efficiency))
        .collect::<Result<_>>()?;
    Ok(best_of(ts.to_vec(), eff))
}

/// Angle from l1 to l2 and |l2|/|l1| at a recorded sample.
pub fn transverse_geometry(s: &Sample) -> (f64, f64) {
    let (x1, y1, x2, y2) = (s.r1[0], s.r1[1], s.r2[0], s.r2[1]);
    let gamma = (x1 * y2 - y1 * x2).atan2(x1 * x2 + y1 * y2);
    let l1 = x1.hypot(y1);
    let ratio = if l1 > 0.0 { x2.hypot(y2) / l1 } else { f64::INFINITY };
    (gamma, ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGeometry {
    pub t: f64,
    pub gamma: f64,
    pub ratio: f64,
    pub r2: f64,
}

/// Geometry just before every excitation pulse after the first (labels
/// starting with "alpha"), plus the final state.
pub fn period_boundaries(seq: &PulseSequence, run: &RunResult) -> Vec<BoundaryGeometry> {
    let mut out = Vec::new();
    let mut push = |s: &Sample| {
        let (gamma, ratio) = transverse_geometry(s);
        out.push(BoundaryGeometry { t: s.t, gamma, ratio, r2: Vector3::from(s.r2).norm() });
    };
    for (k, e) in seq.entries.iter().enumerate().skip(1) {
        if e.label.starts_with("alpha") {
            push(&run.samples[k - 1]);
        }
    }
    if let Some(last) = run.samples.last() {
        push(last);
    }
    out
}

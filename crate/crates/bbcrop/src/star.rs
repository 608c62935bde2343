//! Pulse-sequence events and broadband assembly: moving frames along the
//! discretized trajectory, tilted-axis 180° pulses, echo cycles inserted in
//! every delay, and the phase bookkeeping that off-resonance pulses need.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dp::DanteSequence;
use crate::error::{Error, Result};
use crate::liouville::{
    build_generator, hard_pulse, Channel, ControlSettings, LiouvilleState, PropagatorCache, SpinSystem,
};

/// Largest realizable axis tilt out of the transverse plane.
pub const AXIS_LIMIT: f64 = FRAC_PI_2 - 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PulseEvent {
    /// Rotation by `flip` about the transverse axis at `phase`. With `nu1`
    /// set it lasts flip/(2π ν1); without it the rotation is instantaneous.
    HardPulse { channel: Channel, flip: f64, phase: f64, nu1: Option<f64> },
    Delay { duration: f64 },
    /// Constant-amplitude pulse with the transmitter shifted by `nu_off`.
    OffResonancePulse { channel: Channel, nu1: f64, nu_off: f64, duration: f64, phase: f64 },
    /// Instantaneous rotation about an arbitrary axis.
    Rotation { channel: Channel, axis: [f64; 3], angle: f64 },
    /// Pulses on different channels, centered on each other.
    Simultaneous(Vec<PulseEvent>),
}

impl PulseEvent {
    pub fn duration(&self) -> f64 {
        match self {
            PulseEvent::HardPulse { flip, nu1: Some(n), .. } => flip / (TAU * n),
            PulseEvent::HardPulse { nu1: None, .. } | PulseEvent::Rotation { .. } => 0.0,
            PulseEvent::Delay { duration } | PulseEvent::OffResonancePulse { duration, .. } => *duration,
            PulseEvent::Simultaneous(ev) => ev.iter().map(|e| e.duration()).fold(0.0, f64::max),
        }
    }

    /// Phase acquired on its channel, 2π ν_off τ, for off-resonance pulses.
    pub fn phase_offset(&self) -> Option<(Channel, f64)> {
        match self {
            PulseEvent::OffResonancePulse { channel, nu_off, duration, .. } => Some((*channel, TAU * nu_off * duration)),
            _ => None,
        }
    }

    /// Checks a single (non-group) event.
    pub fn validate_standalone(&self) -> Result<()> {
        self.validate(true)
    }

    fn validate(&self, nested: bool) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match self {
            PulseEvent::HardPulse { flip, phase, nu1, .. } => {
                if !finite(&[*flip, *phase]) || *flip < 0.0 {
                    return Err(Error::param("hard pulse needs a finite non-negative flip"));
                }
                if let Some(n) = nu1 {
                    if !(n.is_finite() && *n > 0.0) {
                        return Err(Error::param(format!("rf amplitude {n} must be positive")));
                    }
                }
            }
            PulseEvent::Delay { duration } => {
                if !(duration.is_finite() && *duration >= 0.0) {
                    return Err(Error::param(format!("delay {duration} must be >= 0")));
                }
            }
            PulseEvent::OffResonancePulse { nu1, nu_off, duration, phase, .. } => {
                if !finite(&[*nu1, *nu_off, *duration, *phase]) || *nu1 <= 0.0 || *duration <= 0.0 {
                    return Err(Error::param("off-resonance pulse needs positive nu1 and duration"));
                }
            }
            PulseEvent::Rotation { axis, angle, .. } => {
                let n = Vector3::from(*axis).norm();
                if !finite(axis) || !angle.is_finite() || !(n > 0.0) {
                    return Err(Error::Axis(format!("invalid rotation axis {axis:?}")));
                }
            }
            PulseEvent::Simultaneous(ev) => {
                if nested {
                    return Err(Error::param("simultaneous groups cannot nest"));
                }
                let mut seen = Vec::new();
                for e in ev {
                    e.validate(true)?;
                    let ch = match e {
                        PulseEvent::HardPulse { channel, .. }
                        | PulseEvent::OffResonancePulse { channel, .. }
                        | PulseEvent::Rotation { channel, .. } => *channel,
                        _ => return Err(Error::param("only pulses can be simultaneous")),
                    };
                    if seen.contains(&ch) {
                        return Err(Error::param("simultaneous group uses a channel twice"));
                    }
                    seen.push(ch);
                }
                let inst = ev.iter().filter(|e| e.duration() == 0.0).count();
                if inst != 0 && inst != ev.len() {
                    return Err(Error::param("cannot mix instantaneous and finite pulses in one group"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub label: String,
    pub event: PulseEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Ideal,
    FiniteRf,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseLedger {
    pub i: f64,
    pub s: f64,
}

impl PhaseLedger {
    pub fn get(&self, ch: Channel) -> f64 {
        match ch {
            Channel::I => self.i,
            Channel::S => self.s,
        }
    }

    fn add(&mut self, ch: Channel, v: f64) {
        match ch {
            Channel::I => self.i += v,
            Channel::S => self.s += v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub mode: Mode,
    pub system: Option<SpinSystem>,
    pub entries: Vec<SequenceEntry>,
    /// accumulated 2π ν_off τ per channel over all off-resonance pulses
    pub ledger: PhaseLedger,
    /// whether later phases already include the accumulated offsets
    pub phase_corrected: bool,
}

impl PulseSequence {
    pub fn new(mode: Mode, system: Option<SpinSystem>) -> Self {
        PulseSequence { mode, system, entries: Vec::new(), ledger: PhaseLedger::default(), phase_corrected: false }
    }

    pub fn push(&mut self, label: impl Into<String>, event: PulseEvent) {
        let mut acc = |e: &PulseEvent| {
            if let Some((ch, p)) = e.phase_offset() {
                self.ledger.add(ch, p);
            }
        };
        match &event {
            PulseEvent::Simultaneous(ev) => ev.iter().for_each(&mut acc),
            e => acc(e),
        }
        self.entries.push(SequenceEntry { label: label.into(), event });
    }

    pub fn duration(&self) -> f64 {
        self.entries.iter().map(|e| e.event.duration()).sum()
    }

    /// Ledger recomputed from the events.
    pub fn accumulated_phase(&self) -> PhaseLedger {
        let mut l = PhaseLedger::default();
        for e in &self.entries {
            match &e.event {
                PulseEvent::Simultaneous(ev) => ev.iter().filter_map(|x| x.phase_offset()).for_each(|(c, p)| l.add(c, p)),
                x => {
                    if let Some((c, p)) = x.phase_offset() {
                        l.add(c, p)
                    }
                }
            }
        }
        l
    }

    pub fn validate(&self) -> Result<()> {
        for (k, e) in self.entries.iter().enumerate() {
            e.event
                .validate(false)
                .map_err(|err| Error::param(format!("entry {k} ({}): {err}", e.label)))?;
        }
        let l = self.accumulated_phase();
        if (l.i - self.ledger.i).abs() > 1e-9 * (1.0 + l.i.abs()) || (l.s - self.ledger.s).abs() > 1e-9 * (1.0 + l.s.abs()) {
            return Err(Error::param("phase ledger disagrees with the off-resonance pulses"));
        }
        Ok(())
    }
}

fn shift_phase(e: &mut PulseEvent, acc: &PhaseLedger) {
    match e {
        PulseEvent::HardPulse { channel, phase, .. } | PulseEvent::OffResonancePulse { channel, phase, .. } => {
            *phase = (*phase + acc.get(*channel)).rem_euclid(TAU);
        }
        PulseEvent::Rotation { channel, axis, .. } => {
            let p = acc.get(*channel);
            let (s, c) = p.sin_cos();
            *axis = [c * axis[0] - s * axis[1], s * axis[0] + c * axis[1], axis[2]];
        }
        _ => {}
    }
}

/// Add to every pulse phase the offset phase acquired during all earlier
/// off-resonance pulses on the same channel.
pub fn apply_phase_bookkeeping(seq: &PulseSequence) -> PulseSequence {
    let mut out = seq.clone();
    if seq.phase_corrected {
        return out;
    }
    let mut acc = PhaseLedger::default();
    for entry in &mut out.entries {
        let mut acquired = Vec::new();
        match &mut entry.event {
            PulseEvent::Simultaneous(ev) => {
                for e in ev.iter_mut() {
                    shift_phase(e, &acc);
                    acquired.extend(e.phase_offset());
                }
            }
            e => {
                shift_phase(e, &acc);
                acquired.extend(e.phase_offset());
            }
        }
        for (c, p) in acquired {
            acc.add(c, p);
        }
    }
    out.phase_corrected = true;
    out
}

// ---------------------------------------------------------------------------
// tilted pulses

/// Duration of a 180° pulse with amplitude ν1 and offset ν_off.
pub fn tilted_duration(nu1: f64, nu_off: f64) -> f64 {
    0.5 / (nu1 * nu1 + nu_off * nu_off).sqrt()
}

/// 180° rotation about `axis`.
///
/// Finite mode: an off-resonance pulse with ν_off = ν1·tanθ (θ the tilt of
/// the axis out of the transverse plane) and τ = 1/(2ν_eff). Its effective
/// field points along −axis, hence the rf phase is the axis azimuth + π; a
/// 180° rotation does not depend on the sign of its axis.
pub fn synth_tilted_180(axis: [f64; 3], nu1: Option<f64>, channel: Channel) -> Result<PulseEvent> {
    let n = Vector3::from(axis);
    let norm = n.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::Axis(format!("axis {axis:?} is not a nonzero vector")));
    }
    let n = n / norm;
    let theta = n.z.clamp(-1.0, 1.0).asin();
    if theta.abs() >= AXIS_LIMIT {
        return Err(Error::Axis(format!(
            "axis tilt {:.6} rad is too close to z for an off-resonance pulse",
            theta
        )));
    }
    match nu1 {
        None => Ok(PulseEvent::Rotation { channel, axis: [n.x, n.y, n.z], angle: PI }),
        Some(nu1) => {
            if !(nu1 > 0.0 && nu1.is_finite()) {
                return Err(Error::param(format!("rf amplitude {nu1} must be positive")));
            }
            let nu_off = nu1 * theta.tan();
            let azimuth = n.y.atan2(n.x);
            Ok(PulseEvent::OffResonancePulse {
                channel,
                nu1,
                nu_off,
                duration: tilted_duration(nu1, nu_off),
                phase: (azimuth + PI).rem_euclid(TAU),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// moving frames

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovingFrame {
    pub t: f64,
    pub e1: [f64; 3],
    pub e2: [f64; 3],
    pub e3: [f64; 3],
    /// z = a e1 + b e2 + c e3
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl MovingFrame {
    /// e1 ∥ r1, e2 the part of r2 orthogonal to e1, e3 = e1 × e2.
    pub fn from_vectors(t: f64, r1: Vector3<f64>, r2: Vector3<f64>) -> Result<MovingFrame> {
        if r1.norm() < 1e-6 || r2.norm() < 1e-6 {
            return Err(Error::DegenerateFrame {
                t,
                detail: format!("|r1| = {:.3e}, |r2| = {:.3e}", r1.norm(), r2.norm()),
            });
        }
        let e1 = r1.normalize();
        let p = r2 - e1 * e1.dot(&r2);
        if p.norm() < 1e-6 {
            return Err(Error::DegenerateFrame { t, detail: "r2 parallel to r1".into() });
        }
        let e2 = p.normalize();
        let e3 = e1.cross(&e2);
        Ok(MovingFrame { t, e1: e1.into(), e2: e2.into(), e3: e3.into(), a: e1.z, b: e2.z, c: e3.z })
    }

    pub fn lab() -> MovingFrame {
        MovingFrame { t: 0.0, e1: [1.0, 0.0, 0.0], e2: [0.0, 1.0, 0.0], e3: [0.0, 0.0, 1.0], a: 0.0, b: 0.0, c: 1.0 }
    }
}

/// Frames for the three refocusing pulses of one delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodFrames {
    /// index of the DANTE step whose delay is refocused
    pub step: usize,
    pub frames: [MovingFrame; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameSampling {
    /// a frame at each quarter boundary, i.e. at each refocusing pulse
    QuarterBoundaries,
    /// one frame at the middle of the delay, used for all three pulses
    PeriodMidpoint,
}

/// In-phase and antiphase vectors at the requested times along an ideal,
/// on-resonance replay of the DANTE sequence (t = 0 at the first pulse).
/// A time that coincides with a pulse is taken just after it.
pub fn dante_vectors_at(dante: &DanteSequence, sys: &SpinSystem, times: &[f64]) -> Result<Vec<(Vector3<f64>, Vector3<f64>)>> {
    let g = build_generator(sys, &ControlSettings::default())?;
    let mut cache = PropagatorCache::new();
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = vec![(Vector3::zeros(), Vector3::zeros()); times.len()];
    let mut rho = LiouvilleState::initial();
    let mut t = 0.0;
    let mut q = 0;
    for step in &dante.steps {
        rho = rho.apply(&hard_pulse(Channel::I, step.flip, step.phase));
        let end = t + step.delay;
        while q < order.len() && times[order[q]] <= end + 1e-15 {
            let dt = (times[order[q]] - t).max(0.0);
            let s = rho.apply(&cache.get(&g, dt)?);
            out[order[q]] = (s.r1(), s.r2());
            q += 1;
        }
        rho = rho.apply(&cache.get(&g, step.delay)?);
        t = end;
    }
    if q < order.len() {
        return Err(Error::param(format!("time {} lies beyond the sequence", times[order[q]])));
    }
    Ok(out)
}

/// Moving frames at arbitrary times of the on-resonance replay.
pub fn frames_at(dante: &DanteSequence, sys: &SpinSystem, times: &[f64]) -> Result<Vec<MovingFrame>> {
    dante_vectors_at(dante, sys, times)?
        .into_iter()
        .zip(times)
        .map(|((r1, r2), &t)| MovingFrame::from_vectors(t, r1, r2))
        .collect()
}

/// Frames for every nonzero delay of the sequence.
pub fn compute_frames(dante: &DanteSequence, sys: &SpinSystem, sampling: FrameSampling) -> Result<Vec<PeriodFrames>> {
    dante.validate()?;
    let mut starts = Vec::new();
    let mut t = 0.0;
    for (k, s) in dante.steps.iter().enumerate() {
        if s.delay > 0.0 {
            starts.push((k, t, s.delay));
        }
        t += s.delay;
    }
    let times: Vec<f64> = starts
        .iter()
        .flat_map(|&(_, t0, d)| match sampling {
            FrameSampling::QuarterBoundaries => [t0 + 0.25 * d, t0 + 0.5 * d, t0 + 0.75 * d],
            FrameSampling::PeriodMidpoint => [t0 + 0.5 * d; 3],
        })
        .collect();
    let frames = frames_at(dante, sys, &times)?;
    Ok(starts
        .iter()
        .enumerate()
        .map(|(p, &(step, _, _))| PeriodFrames { step, frames: [frames[3 * p], frames[3 * p + 1], frames[3 * p + 2]] })
        .collect())
}

// ---------------------------------------------------------------------------
// assembly

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EchoPattern {
    R3R1R3,
    R3R2R3,
    R2R1R2,
}

impl EchoPattern {
    fn axes(self) -> [usize; 3] {
        match self {
            EchoPattern::R3R1R3 => [3, 1, 3],
            EchoPattern::R3R2R3 => [3, 2, 3],
            EchoPattern::R2R1R2 => [2, 1, 2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EchoPattern::R3R1R3 => "R3R1R3",
            EchoPattern::R3R2R3 => "R3R2R3",
            EchoPattern::R2R1R2 => "R2R1R2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "R3R1R3" => Ok(EchoPattern::R3R1R3),
            "R3R2R3" => Ok(EchoPattern::R3R2R3),
            "R2R1R2" => Ok(EchoPattern::R2R1R2),
            _ => Err(Error::param(format!("unknown echo pattern '{s}'"))),
        }
    }
}

/// Phase cycle of the 180°(S) pulses that accompany R1/R2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SCycle {
    Xy4,
    Xy8,
}

impl SCycle {
    pub fn phase(self, k: usize) -> f64 {
        const XY4: [f64; 4] = [0.0, FRAC_PI_2, 0.0, FRAC_PI_2];
        const XY8: [f64; 8] = [0.0, FRAC_PI_2, 0.0, FRAC_PI_2, FRAC_PI_2, 0.0, FRAC_PI_2, 0.0];
        match self {
            SCycle::Xy4 => XY4[k % 4],
            SCycle::Xy8 => XY8[k % 8],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SCycle::Xy4 => "XY-4",
            SCycle::Xy8 => "XY-8",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "XY-4" | "XY4" => Ok(SCycle::Xy4),
            "XY-8" | "XY8" => Ok(SCycle::Xy8),
            _ => Err(Error::param(format!("unknown phase cycle '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssemblyOptions {
    pub mode: Mode,
    /// rf amplitudes (Hz), used in finite-rf mode
    pub nu1_i: f64,
    pub nu1_s: f64,
    pub pattern: EchoPattern,
    pub s_cycle: SCycle,
}

impl AssemblyOptions {
    pub fn ideal() -> Self {
        AssemblyOptions { mode: Mode::Ideal, nu1_i: 0.0, nu1_s: 0.0, pattern: EchoPattern::R3R1R3, s_cycle: SCycle::Xy4 }
    }

    pub fn finite(nu1_i: f64, nu1_s: f64) -> Self {
        AssemblyOptions { mode: Mode::FiniteRf, nu1_i, nu1_s, ..Self::ideal() }
    }

    fn amplitudes(&self) -> Result<(Option<f64>, Option<f64>)> {
        match self.mode {
            Mode::Ideal => Ok((None, None)),
            Mode::FiniteRf => {
                if !(self.nu1_i > 0.0 && self.nu1_s > 0.0 && self.nu1_i.is_finite() && self.nu1_s.is_finite()) {
                    return Err(Error::param(format!(
                        "rf limits must be positive (nu1_I = {}, nu1_S = {})",
                        self.nu1_i, self.nu1_s
                    )));
                }
                Ok((Some(self.nu1_i), Some(self.nu1_s)))
            }
        }
    }
}

fn excitation(k: usize, step: &crate::dp::DanteStep, nu1: Option<f64>) -> (String, PulseEvent) {
    (format!("alpha{k}"), PulseEvent::HardPulse { channel: Channel::I, flip: step.flip, phase: step.phase, nu1 })
}

/// The DANTE sequence as events, without refocusing.
pub fn dante_to_sequence(dante: &DanteSequence, mode: Mode, nu1_i: f64, sys: Option<SpinSystem>) -> Result<PulseSequence> {
    dante.validate()?;
    let nu1 = match mode {
        Mode::Ideal => None,
        Mode::FiniteRf => {
            if !(nu1_i > 0.0) {
                return Err(Error::param("rf limit must be positive"));
            }
            Some(nu1_i)
        }
    };
    let mut seq = PulseSequence::new(mode, sys);
    for (k, s) in dante.steps.iter().enumerate() {
        let (l, e) = excitation(k, s, nu1);
        seq.push(l, e);
        if s.delay > 0.0 {
            seq.push(format!("D{k}"), PulseEvent::Delay { duration: s.delay });
        }
    }
    Ok(seq)
}

/// Insert Δ/4·Ra·Δ/4·Rb·Δ/4·Ra·Δ/4 into every delay. R1 and R2 carry a
/// simultaneous 180°(S); R3 acts on I alone.
pub fn assemble_bbcrop(
    dante: &DanteSequence,
    frames: &[PeriodFrames],
    opts: &AssemblyOptions,
    sys: Option<SpinSystem>,
) -> Result<PulseSequence> {
    dante.validate()?;
    let (nu_i, nu_s) = opts.amplitudes().map_err(|e| Error::Assembly { period: 0, source: Box::new(e) })?;
    let mut seq = PulseSequence::new(opts.mode, sys);
    let mut s_count = 0usize;
    let mut period = 0usize;
    for (k, step) in dante.steps.iter().enumerate() {
        let (l, e) = excitation(k, step, nu_i);
        seq.push(l, e);
        if step.delay <= 0.0 {
            continue;
        }
        let pf = frames.get(period).filter(|f| f.step == k).ok_or_else(|| Error::Assembly {
            period,
            source: Box::new(Error::param(format!("no frames for the delay after pulse {k}"))),
        })?;
        let quarter = 0.25 * step.delay;
        for (slot, &which) in opts.pattern.axes().iter().enumerate() {
            seq.push(format!("D{k}/4"), PulseEvent::Delay { duration: quarter });
            let f = &pf.frames[slot];
            let axis = match which {
                1 => f.e1,
                2 => f.e2,
                _ => f.e3,
            };
            let ev = synth_tilted_180(axis, nu_i, Channel::I)
                .map_err(|e| Error::Assembly { period, source: Box::new(e) })?;
            if which == 3 {
                seq.push("R3", ev);
            } else {
                let s = PulseEvent::HardPulse { channel: Channel::S, flip: PI, phase: opts.s_cycle.phase(s_count), nu1: nu_s };
                s_count += 1;
                seq.push(format!("R{which}"), PulseEvent::Simultaneous(vec![ev, s]));
            }
        }
        seq.push(format!("D{k}/4"), PulseEvent::Delay { duration: quarter });
        period += 1;
    }
    if period != frames.len() {
        return Err(Error::Assembly {
            period,
            source: Box::new(Error::param(format!("{} frame sets for {} delays", frames.len(), period))),
        });
    }
    Ok(match opts.mode {
        Mode::Ideal => seq,
        Mode::FiniteRf => apply_phase_bookkeeping(&seq),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefocusVariant {
    /// 180°(I) and 180°(S) together: keeps J transfer, removes cross-correlation
    JPreserving,
    /// 180°(I) only: keeps cross-correlated transfer, removes J
    KcPreserving,
}

/// Conventional echo in the middle of every delay.
pub fn conventional_refocus(dante: &DanteSequence, variant: RefocusVariant, mode: Mode, nu1_i: f64, nu1_s: f64, sys: Option<SpinSystem>) -> Result<PulseSequence> {
    dante.validate()?;
    let opts = AssemblyOptions { mode, nu1_i, nu1_s, ..AssemblyOptions::ideal() };
    let (nu_i, nu_s) = opts.amplitudes()?;
    let mut seq = PulseSequence::new(mode, sys);
    for (k, step) in dante.steps.iter().enumerate() {
        let (l, e) = excitation(k, step, nu_i);
        seq.push(l, e);
        if step.delay <= 0.0 {
            continue;
        }
        let i180 = PulseEvent::HardPulse { channel: Channel::I, flip: PI, phase: 0.0, nu1: nu_i };
        seq.push(format!("D{k}/2"), PulseEvent::Delay { duration: 0.5 * step.delay });
        match variant {
            RefocusVariant::JPreserving => {
                let s180 = PulseEvent::HardPulse { channel: Channel::S, flip: PI, phase: 0.0, nu1: nu_s };
                seq.push("180IS", PulseEvent::Simultaneous(vec![i180, s180]));
            }
            RefocusVariant::KcPreserving => seq.push("180I", i180),
        }
        seq.push(format!("D{k}/2"), PulseEvent::Delay { duration: 0.5 * step.delay });
    }
    Ok(seq)
}

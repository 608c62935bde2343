//! Config ingestion and every on-disk format: run config (TOML), the
//! line-oriented sequence file, a human-readable pulse table, and delimited
//! exports for trajectories, DANTE trains, offset profiles and buildups.
//!
//! Machine formats use SI units and radians with shortest round-trip float
//! formatting, so `parse(serialize(x)) == x` holds bit for bit. Human tables
//! use µs, kHz and degrees.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::crop::{ReducedState, ReducedTrajectory, TrajectorySample};
use crate::dp::{DanteSequence, DanteStep};
use crate::error::{Error, Result};
use crate::harness::OffsetProfile;
use crate::liouville::{Channel, SpinSystem};
use crate::star::{EchoPattern, Mode, PulseEvent, PulseSequence, SCycle};

pub const CONFIG_SCHEMA: &str = "bbcrop-run/1";
pub const SEQUENCE_HEADER: &str = "bbcrop-sequence v1";
pub const TRAJECTORY_HEADER: &str = "t_s,A_hz,phi_rad,l1,z1,l2,z2,gamma_rad,psi1_rad";
pub const DANTE_HEADER: &str = "flip_rad,phase_rad,delay_s";
pub const PROFILE_HEADER: &str = "offset_hz,efficiency";
pub const BUILDUP_HEADER: &str = "offset_hz,t_s,r2_norm";

// ---------------------------------------------------------------------------
// run config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub system: SystemBlock,
    #[serde(default)]
    pub design: DesignBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

/// Coupling and the five relaxation rates, all in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub j_hz: f64,
    #[serde(default)]
    pub k_dd_hz: f64,
    #[serde(default)]
    pub k_csa_i_hz: f64,
    #[serde(default)]
    pub k_csa_s_hz: f64,
    #[serde(default)]
    pub kc_i_hz: f64,
    #[serde(default)]
    pub kc_s_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignBlock {
    /// "ideal" or "finite"
    pub mode: String,
    pub periods: usize,
    pub nu1_i_hz: f64,
    pub nu1_s_hz: f64,
    pub pattern: String,
    pub s_cycle: String,
    /// grid points per axis for the dynamic-programming path (k_c = 0)
    pub dp_grid: usize,
}

impl Default for DesignBlock {
    fn default() -> Self {
        DesignBlock {
            mode: "ideal".into(),
            periods: 12,
            nu1_i_hz: 13e3,
            nu1_s_hz: 13e3,
            pattern: EchoPattern::R3R1R3.name().into(),
            s_cycle: SCycle::Xy4.name().into(),
            dp_grid: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    pub offsets: usize,
    /// grid spans ±span_j·J
    pub span_j: f64,
    /// fractional FWHM of the rf scale distribution; 0 disables it
    pub rf_fwhm: f64,
    pub rf_samples: usize,
    /// offsets whose |r2| buildup is written out
    pub buildup_offsets_hz: Vec<f64>,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock { offsets: 11, span_j: 5.0, rf_fwhm: 0.0, rf_samples: 7, buildup_offsets_hz: vec![0.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub dir: PathBuf,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: PathBuf::from("bbcrop-out") }
    }
}

impl RunConfig {
    /// Config for a system given by its aggregates, everything else default.
    pub fn for_system(sys: &SpinSystem) -> Self {
        RunConfig {
            schema: CONFIG_SCHEMA.into(),
            system: SystemBlock {
                j_hz: sys.j,
                k_dd_hz: sys.k_dd,
                k_csa_i_hz: sys.k_csa_i,
                k_csa_s_hz: sys.k_csa_s,
                kc_i_hz: sys.kc_i,
                kc_s_hz: sys.kc_s,
            },
            design: DesignBlock::default(),
            sweep: SweepBlock::default(),
            output: OutputBlock::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0);
            Error::Parse { line, msg: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::param(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::param(format!("unsupported schema {:?}, expected {CONFIG_SCHEMA:?}", self.schema)));
        }
        let s = &self.system;
        let d = &self.design;
        let w = &self.sweep;
        let nums = [s.j_hz, s.k_dd_hz, s.k_csa_i_hz, s.k_csa_s_hz, s.kc_i_hz, s.kc_s_hz, d.nu1_i_hz, d.nu1_s_hz, w.span_j, w.rf_fwhm];
        if nums.iter().chain(&w.buildup_offsets_hz).any(|x| !x.is_finite()) {
            return Err(Error::param("config contains non-finite numbers"));
        }
        self.mode()?;
        EchoPattern::parse(&d.pattern)?;
        SCycle::parse(&d.s_cycle)?;
        if d.nu1_i_hz <= 0.0 || d.nu1_s_hz <= 0.0 {
            return Err(Error::param("rf limits must be positive"));
        }
        if w.offsets == 0 || w.span_j < 0.0 || w.rf_fwhm < 0.0 || w.rf_samples == 0 {
            return Err(Error::param("sweep needs at least one offset, span >= 0, fwhm >= 0 and one rf sample"));
        }
        if d.dp_grid < 2 {
            return Err(Error::param("dp_grid must be at least 2"));
        }
        Ok(())
    }

    pub fn spin_system(&self) -> Result<SpinSystem> {
        let s = &self.system;
        SpinSystem::new(s.j_hz, s.k_dd_hz, s.k_csa_i_hz, s.k_csa_s_hz, s.kc_i_hz, s.kc_s_hz)
    }

    pub fn mode(&self) -> Result<Mode> {
        match self.design.mode.to_ascii_lowercase().as_str() {
            "ideal" => Ok(Mode::Ideal),
            "finite" | "finite-rf" => Ok(Mode::FiniteRf),
            m => Err(Error::param(format!("unknown mode {m:?} (ideal|finite)"))),
        }
    }
}

// ---------------------------------------------------------------------------
// sequence file

fn channel_name(c: Channel) -> &'static str {
    match c {
        Channel::I => "I",
        Channel::S => "S",
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Ideal => "ideal",
        Mode::FiniteRf => "finite",
    }
}

fn event_line(out: &mut String, prefix: &str, label: &str, ev: &PulseEvent) {
    let _ = match ev {
        PulseEvent::HardPulse { channel, flip, phase, nu1 } => {
            let _ = write!(out, "{prefix}pulse {label} ch={} flip_rad={flip} phase_rad={phase}", channel_name(*channel));
            match nu1 {
                Some(n) => writeln!(out, " nu1_hz={n}"),
                None => writeln!(out),
            }
        }
        PulseEvent::Delay { duration } => writeln!(out, "{prefix}delay {label} dur_s={duration}"),
        PulseEvent::OffResonancePulse { channel, nu1, nu_off, duration, phase } => writeln!(
            out,
            "{prefix}offres {label} ch={} nu1_hz={nu1} nu_off_hz={nu_off} dur_s={duration} phase_rad={phase}",
            channel_name(*channel)
        ),
        PulseEvent::Rotation { channel, axis, angle } => writeln!(
            out,
            "{prefix}rot {label} ch={} axis={},{},{} angle_rad={angle}",
            channel_name(*channel),
            axis[0],
            axis[1],
            axis[2]
        ),
        PulseEvent::Simultaneous(_) => unreachable!("groups are written by the caller"),
    };
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() || label.chars().any(|c| c.is_whitespace()) || label.starts_with('&') || label.starts_with('#') {
        return Err(Error::param(format!("label {label:?} must be non-empty without whitespace or a leading & or #")));
    }
    Ok(())
}

/// Serialize a sequence to the line-oriented text format.
///
/// ```text
/// bbcrop-sequence v1
/// mode finite
/// corrected true
/// system j_hz=193.6 k_dd_hz=193.6 k_csa_i_hz=0 k_csa_s_hz=0 kc_i_hz=145.2 kc_s_hz=0
/// pulse alpha1 ch=I flip_rad=0.3 phase_rad=1.57 nu1_hz=13000
/// delay D1/4 dur_s=0.0001
/// group R1
/// &offres R1 ch=I nu1_hz=13000 nu_off_hz=-4770 dur_s=3.6e-5 phase_rad=2.1
/// &pulse R1 ch=S flip_rad=3.14 phase_rad=0 nu1_hz=13000
/// ```
pub fn write_sequence(seq: &PulseSequence) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "{SEQUENCE_HEADER}");
    let _ = writeln!(out, "mode {}", mode_name(seq.mode));
    let _ = writeln!(out, "corrected {}", seq.phase_corrected);
    if let Some(s) = &seq.system {
        let _ = writeln!(
            out,
            "system j_hz={} k_dd_hz={} k_csa_i_hz={} k_csa_s_hz={} kc_i_hz={} kc_s_hz={}",
            s.j, s.k_dd, s.k_csa_i, s.k_csa_s, s.kc_i, s.kc_s
        );
    }
    for e in &seq.entries {
        check_label(&e.label)?;
        match &e.event {
            PulseEvent::Simultaneous(ev) => {
                let _ = writeln!(out, "group {}", e.label);
                for m in ev {
                    if matches!(m, PulseEvent::Simultaneous(_)) {
                        return Err(Error::param("simultaneous groups cannot nest"));
                    }
                    event_line(&mut out, "&", &e.label, m);
                }
            }
            ev => event_line(&mut out, "", &e.label, ev),
        }
    }
    Ok(out)
}

struct Fields<'a> {
    line: usize,
    kv: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn new(line: usize, toks: &[&'a str]) -> Result<Self> {
        let mut kv = Vec::new();
        for t in toks {
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::Parse { line, msg: format!("expected key=value, got {t:?}") })?;
            if kv.iter().any(|(x, _)| *x == k) {
                return Err(Error::Parse { line, msg: format!("duplicate key {k:?}") });
            }
            kv.push((k, v));
        }
        Ok(Fields { line, kv })
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.kv.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn num(&self, key: &str) -> Result<f64> {
        let v = self.raw(key).ok_or_else(|| Error::Parse { line: self.line, msg: format!("missing {key}") })?;
        parse_f64(self.line, v)
    }

    fn opt_num(&self, key: &str) -> Result<Option<f64>> {
        self.raw(key).map(|v| parse_f64(self.line, v)).transpose()
    }

    fn channel(&self) -> Result<Channel> {
        match self.raw("ch") {
            Some("I") => Ok(Channel::I),
            Some("S") => Ok(Channel::S),
            other => Err(Error::Parse { line: self.line, msg: format!("bad channel {other:?}") }),
        }
    }

    /// Reject keys outside `allowed`.
    fn only(&self, allowed: &[&str]) -> Result<()> {
        match self.kv.iter().find(|(k, _)| !allowed.contains(k)) {
            Some((k, _)) => Err(Error::Parse { line: self.line, msg: format!("unexpected key {k:?}") }),
            None => Ok(()),
        }
    }
}

fn parse_f64(line: usize, v: &str) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| Error::Parse { line, msg: format!("not a number: {v:?}") })?;
    if !x.is_finite() {
        return Err(Error::Parse { line, msg: format!("non-finite number {v:?}") });
    }
    Ok(x)
}

fn parse_event(line: usize, kind: &str, toks: &[&str]) -> Result<PulseEvent> {
    let f = Fields::new(line, toks)?;
    let ev = match kind {
        "pulse" => {
            f.only(&["ch", "flip_rad", "phase_rad", "nu1_hz"])?;
            PulseEvent::HardPulse {
                channel: f.channel()?,
                flip: f.num("flip_rad")?,
                phase: f.num("phase_rad")?,
                nu1: f.opt_num("nu1_hz")?,
            }
        }
        "delay" => {
            f.only(&["dur_s"])?;
            PulseEvent::Delay { duration: f.num("dur_s")? }
        }
        "offres" => {
            f.only(&["ch", "nu1_hz", "nu_off_hz", "dur_s", "phase_rad"])?;
            PulseEvent::OffResonancePulse {
                channel: f.channel()?,
                nu1: f.num("nu1_hz")?,
                nu_off: f.num("nu_off_hz")?,
                duration: f.num("dur_s")?,
                phase: f.num("phase_rad")?,
            }
        }
        "rot" => {
            f.only(&["ch", "axis", "angle_rad"])?;
            let raw = f.raw("axis").ok_or_else(|| Error::Parse { line, msg: "missing axis".into() })?;
            let parts: Vec<f64> = raw.split(',').map(|v| parse_f64(line, v)).collect::<Result<_>>()?;
            let axis: [f64; 3] = parts
                .try_into()
                .map_err(|_| Error::Parse { line, msg: format!("axis needs three components, got {raw:?}") })?;
            PulseEvent::Rotation { channel: f.channel()?, axis, angle: f.num("angle_rad")? }
        }
        other => return Err(Error::Parse { line, msg: format!("unknown event type {other:?}") }),
    };
    ev.validate_standalone().map_err(|e| Error::Parse { line, msg: e.to_string() })?;
    Ok(ev)
}

/// Parse the text format produced by [`write_sequence`].
pub fn parse_sequence(text: &str) -> Result<PulseSequence> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
    match lines.next() {
        Some((_, l)) if l == SEQUENCE_HEADER => {}
        Some((n, l)) => return Err(perr(n, &format!("expected header {SEQUENCE_HEADER:?}, got {l:?}"))),
        None => return Err(perr(0, "empty sequence file")),
    }
    let mut mode = None;
    let mut corrected = None;
    let mut system = None;
    // group label, first line, members
    let mut group: Option<(String, usize, Vec<PulseEvent>)> = None;
    let mut entries: Vec<(String, PulseEvent)> = Vec::new();
    let mut body = false;

    let close = |group: &mut Option<(String, usize, Vec<PulseEvent>)>, entries: &mut Vec<(String, PulseEvent)>| -> Result<()> {
        if let Some((label, line, members)) = group.take() {
            if members.is_empty() {
                return Err(Error::Parse { line, msg: "empty simultaneous group".into() });
            }
            entries.push((label, PulseEvent::Simultaneous(members)));
        }
        Ok(())
    };

    for (n, l) in lines {
        let toks: Vec<&str> = l.split_whitespace().collect();
        let kind = toks[0];
        if !body {
            match kind {
                "mode" => {
                    mode = Some(match toks.get(1).copied() {
                        Some("ideal") if toks.len() == 2 => Mode::Ideal,
                        Some("finite") if toks.len() == 2 => Mode::FiniteRf,
                        _ => return Err(perr(n, "mode must be ideal or finite")),
                    });
                    continue;
                }
                "corrected" => {
                    corrected = Some(match toks.get(1).copied() {
                        Some("true") if toks.len() == 2 => true,
                        Some("false") if toks.len() == 2 => false,
                        _ => return Err(perr(n, "corrected must be true or false")),
                    });
                    continue;
                }
                "system" => {
                    let f = Fields::new(n, &toks[1..])?;
                    f.only(&["j_hz", "k_dd_hz", "k_csa_i_hz", "k_csa_s_hz", "kc_i_hz", "kc_s_hz"])?;
                    let s = SpinSystem::new(
                        f.num("j_hz")?,
                        f.num("k_dd_hz")?,
                        f.num("k_csa_i_hz")?,
                        f.num("k_csa_s_hz")?,
                        f.num("kc_i_hz")?,
                        f.num("kc_s_hz")?,
                    )
                    .map_err(|e| perr(n, &e.to_string()))?;
                    system = Some(s);
                    continue;
                }
                _ => body = true,
            }
        }
        if let Some(member) = kind.strip_prefix('&') {
            let (label, _, members) = group.as_mut().ok_or_else(|| perr(n, "group member outside a group"))?;
            if toks.get(1) != Some(&label.as_str()) {
                return Err(perr(n, "group member label differs from its group"));
            }
            members.push(parse_event(n, member, &toks[2..])?);
            continue;
        }
        close(&mut group, &mut entries)?;
        let label = toks.get(1).ok_or_else(|| perr(n, "missing label"))?.to_string();
        if kind == "group" {
            if toks.len() != 2 {
                return Err(perr(n, "group line takes only a label"));
            }
            group = Some((label, n, Vec::new()));
        } else {
            entries.push((label, parse_event(n, kind, &toks[2..])?));
        }
    }
    close(&mut group, &mut entries)?;

    let mode = mode.ok_or_else(|| perr(0, "missing mode line"))?;
    let mut seq = PulseSequence::new(mode, system);
    for (label, ev) in entries {
        seq.push(label, ev);
    }
    seq.phase_corrected = corrected.ok_or_else(|| perr(0, "missing corrected line"))?;
    seq.validate()?;
    Ok(seq)
}

pub fn read_sequence(path: &Path) -> Result<PulseSequence> {
    parse_sequence(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// human-readable table

/// Pulse table with durations in µs, transmitter offsets in kHz and phases
/// and flips in degrees. Group members are prefixed with `&`.
pub fn render_table(seq: &PulseSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>4}  {:<10} {:<3} {:>10} {:>11} {:>10} {:>9}",
        "#", "element", "ch", "dur (us)", "off (kHz)", "phase (°)", "flip (°)"
    );
    let mut row = 0usize;
    let line = |out: &mut String, row: usize, label: &str, ev: &PulseEvent, member: bool| {
        let idx = if member { "&".to_string() } else { row.to_string() };
        let (ch, off, phase, flip) = match ev {
            PulseEvent::HardPulse { channel, flip, phase, .. } => (channel_name(*channel), 0.0, phase.to_degrees(), flip.to_degrees()),
            PulseEvent::OffResonancePulse { channel, nu1, nu_off, duration, phase } => {
                let flip = 360.0 * nu1.hypot(*nu_off) * duration;
                (channel_name(*channel), nu_off / 1e3, phase.to_degrees(), flip)
            }
            PulseEvent::Rotation { channel, axis, angle } => {
                (channel_name(*channel), 0.0, axis[1].atan2(axis[0]).to_degrees(), angle.to_degrees())
            }
            PulseEvent::Delay { .. } => ("-", 0.0, 0.0, 0.0),
            PulseEvent::Simultaneous(_) => unreachable!(),
        };
        let _ = if matches!(ev, PulseEvent::Delay { .. }) {
            writeln!(out, "{:>4}  {:<10} {:<3} {:>10.3} {:>11} {:>10} {:>9}", idx, label, ch, ev.duration() * 1e6, "", "", "")
        } else {
            writeln!(
                out,
                "{:>4}  {:<10} {:<3} {:>10.3} {:>11.3} {:>10.1} {:>9.1}",
                idx,
                label,
                ch,
                ev.duration() * 1e6,
                off + 0.0,
                phase.rem_euclid(360.0),
                flip
            )
        };
    };
    for e in &seq.entries {
        row += 1;
        match &e.event {
            PulseEvent::Simultaneous(ev) => {
                let _ = writeln!(out, "{:>4}  {:<10} {:<3} {:>10.3}", row, e.label, "IS", e.event.duration() * 1e6);
                for m in ev {
                    line(&mut out, row, &e.label, m, true);
                }
            }
            ev => line(&mut out, row, &e.label, ev, false),
        }
    }
    let _ = writeln!(out, "total duration: {:.3} us", seq.duration() * 1e6);
    out
}

// ---------------------------------------------------------------------------
// delimited exports

#[derive(Serialize, Deserialize)]
struct TrajectoryRow {
    t_s: f64,
    #[serde(rename = "A_hz")]
    a_hz: f64,
    phi_rad: f64,
    l1: f64,
    z1: f64,
    l2: f64,
    z2: f64,
    gamma_rad: f64,
    psi1_rad: f64,
}

#[derive(Serialize, Deserialize)]
struct DanteRow {
    flip_rad: f64,
    phase_rad: f64,
    delay_s: f64,
}

#[derive(Serialize, Deserialize)]
struct ProfileRow {
    offset_hz: f64,
    efficiency: f64,
}

#[derive(Serialize, Deserialize)]
struct BuildupRow {
    offset_hz: f64,
    t_s: f64,
    r2_norm: f64,
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse { line, msg: format!("{kind:?}") },
    }
}

fn write_rows<T: Serialize>(prefix: &str, rows: impl IntoIterator<Item = T>, header: &str) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8");
    format!("{prefix}{header}\n{body}")
}

fn read_rows<T: DeserializeOwned>(text: &str, header: &str) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let got = r.headers().map_err(csv_error)?.iter().collect::<Vec<_>>().join(",");
    if got != header {
        let line = text.lines().position(|l| !l.trim_start().starts_with('#')).map_or(0, |k| k + 1);
        return Err(Error::Parse { line, msg: format!("expected header {header:?}, got {got:?}") });
    }
    let rows: Vec<T> = r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_error)?;
    Ok(rows)
}

/// Trajectory CSV; the bootstrap flip is kept in a leading comment.
pub fn write_trajectory_csv(traj: &ReducedTrajectory) -> String {
    let rows = traj.samples.iter().map(|s| TrajectoryRow {
        t_s: s.t,
        a_hz: s.a,
        phi_rad: s.phi,
        l1: s.state.l1,
        z1: s.state.z1,
        l2: s.state.l2,
        z2: s.state.z2,
        gamma_rad: s.state.gamma,
        psi1_rad: s.state.psi1,
    });
    write_rows(&format!("# bootstrap_rad={}\n", traj.bootstrap), rows, TRAJECTORY_HEADER)
}

pub fn parse_trajectory_csv(text: &str) -> Result<ReducedTrajectory> {
    let bootstrap = text
        .lines()
        .enumerate()
        .find_map(|(k, l)| l.trim().strip_prefix("# bootstrap_rad=").map(|v| parse_f64(k + 1, v.trim())))
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing bootstrap_rad comment".into() })??;
    let samples = read_rows::<TrajectoryRow>(text, TRAJECTORY_HEADER)?
        .into_iter()
        .map(|r| TrajectorySample {
            t: r.t_s,
            a: r.a_hz,
            phi: r.phi_rad,
            state: ReducedState { l1: r.l1, z1: r.z1, l2: r.l2, z2: r.z2, gamma: r.gamma_rad, psi1: r.psi1_rad },
        })
        .collect();
    Ok(ReducedTrajectory { samples, bootstrap })
}

pub fn write_dante_csv(d: &DanteSequence) -> String {
    let rows = d.steps.iter().map(|s| DanteRow { flip_rad: s.flip, phase_rad: s.phase, delay_s: s.delay });
    write_rows("", rows, DANTE_HEADER)
}

pub fn parse_dante_csv(text: &str) -> Result<DanteSequence> {
    let steps = read_rows::<DanteRow>(text, DANTE_HEADER)?
        .into_iter()
        .map(|r| DanteStep { flip: r.flip_rad, phase: r.phase_rad, delay: r.delay_s })
        .collect();
    let d = DanteSequence { steps };
    d.validate()?;
    Ok(d)
}

/// Offset profile CSV (traces are not part of this format).
pub fn write_profile_csv(p: &OffsetProfile) -> String {
    let rows = p.offsets.iter().zip(&p.efficiency).map(|(&offset_hz, &efficiency)| ProfileRow { offset_hz, efficiency });
    write_rows("", rows, PROFILE_HEADER)
}

pub fn parse_profile_csv(text: &str) -> Result<OffsetProfile> {
    let rows = read_rows::<ProfileRow>(text, PROFILE_HEADER)?;
    Ok(OffsetProfile {
        offsets: rows.iter().map(|r| r.offset_hz).collect(),
        efficiency: rows.iter().map(|r| r.efficiency).collect(),
        traces: None,
    })
}

/// Long-format |r2| buildup: one row per (offset, time) pair.
pub fn write_buildup_csv(offsets: &[f64], traces: &[Vec<(f64, f64)>]) -> String {
    let rows = offsets
        .iter()
        .zip(traces)
        .flat_map(|(&o, tr)| tr.iter().map(move |&(t_s, r2_norm)| BuildupRow { offset_hz: o, t_s, r2_norm }));
    write_rows("", rows, BUILDUP_HEADER)
}

pub fn parse_buildup_csv(text: &str) -> Result<Vec<(f64, Vec<(f64, f64)>)>> {
    let mut out: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for r in read_rows::<BuildupRow>(text, BUILDUP_HEADER)? {
        match out.last_mut() {
            Some((o, tr)) if o.to_bits() == r.offset_hz.to_bits() => tr.push((r.t_s, r.r2_norm)),
            _ => out.push((r.offset_hz, vec![(r.t_s, r.r2_norm)])),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// json and plots

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::param(format!("json: {e}")))
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })
}

/// Minimal SVG line plot of efficiency against offset (kHz), with the bound
/// drawn as a dashed reference when given.
pub fn profile_svg(p: &OffsetProfile, bound: Option<f64>) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let xs: Vec<f64> = p.offsets.iter().map(|o| o / 1e3).collect();
    let (x0, x1) = match (xs.first(), xs.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 1.0, a + 1.0),
        _ => (-1.0, 1.0),
    };
    let top = p.efficiency.iter().copied().chain(bound).fold(0.0f64, f64::max).max(1e-3) * 1.1;
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - y / top * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{:.2},{:.2} H{:.2} M{:.2},{:.2} V{:.2}" stroke="black" fill="none"/>"#,
        m,
        h - m,
        w - m,
        m,
        h - m,
        m
    );
    if let Some(b) = bound {
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="6,4"/>"#,
            m,
            py(b),
            w - m,
            py(b)
        );
    }
    let pts: Vec<String> = xs.iter().zip(&p.efficiency).map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
    let _ = writeln!(s, r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#, pts.join(" "));
    for (x, y) in xs.iter().zip(&p.efficiency) {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, px(*x), py(*y));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">offset (kHz)</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12">{:.2}</text>"#, px(x0) - 10.0, h - m + 16.0, x0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12">{:.2}</text>"#, px(x1) - 20.0, h - m + 16.0, x1);
    let _ = writeln!(s, r#"<text x="8" y="{:.2}" font-size="12">{:.3}</text>"#, py(top) + 4.0, top);
    let _ = writeln!(s, r#"<text x="8" y="{:.2}" font-size="12">⟨2IzSz⟩</text>"#, h / 2.0);
    s.push_str("</svg>\n");
    s
}

/// Write `contents` to `dir/name`, creating `dir` as needed.
pub fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::star::synth_tilted_180;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sample_sequence() -> PulseSequence {
        let sys = SpinSystem::from_aggregates(193.6, 193.6, 145.2).unwrap();
        let mut seq = PulseSequence::new(Mode::FiniteRf, Some(sys));
        seq.push("alpha1", PulseEvent::HardPulse { channel: Channel::I, flip: 0.1, phase: 1.0 / 3.0, nu1: Some(13e3) });
        seq.push("D1/4", PulseEvent::Delay { duration: 1.234e-4 });
        let r = synth_tilted_180([0.2, 0.4, -0.3], Some(13e3), Channel::I).unwrap();
        seq.push(
            "R1",
            PulseEvent::Simultaneous(vec![r, PulseEvent::HardPulse { channel: Channel::S, flip: PI, phase: 0.0, nu1: Some(13e3) }]),
        );
        seq.push("R3", PulseEvent::Rotation { channel: Channel::I, axis: [0.1, -0.2, 0.97], angle: PI });
        seq.push("alpha2", PulseEvent::HardPulse { channel: Channel::I, flip: 0.2, phase: -0.7, nu1: None });
        seq
    }

    #[test]
    fn sequence_round_trip() {
        let seq = sample_sequence();
        let text = write_sequence(&seq).unwrap();
        let back = parse_sequence(&text).unwrap();
        assert_eq!(back, seq);
        assert_eq!(write_sequence(&back).unwrap(), text);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = write_sequence(&sample_sequence()).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[5] = "warp alpha ch=I";
        match parse_sequence(&lines.join("\n")) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 6);
                assert!(msg.contains("unknown event type"));
            }
            other => panic!("{other:?}"),
        }
        let bad = text.replace("dur_s=0.0001234", "dur_s=abc");
        assert!(matches!(parse_sequence(&bad), Err(Error::Parse { line: 6, .. })));
        assert!(matches!(parse_sequence("nonsense"), Err(Error::Parse { line: 1, .. })));
        let orphan = format!("{SEQUENCE_HEADER}\nmode ideal\ncorrected false\n&pulse x ch=I flip_rad=1 phase_rad=0\n");
        assert!(matches!(parse_sequence(&orphan), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn labels_with_whitespace_rejected() {
        let mut seq = PulseSequence::new(Mode::Ideal, None);
        seq.push("bad label", PulseEvent::Delay { duration: 1.0 });
        assert!(write_sequence(&seq).is_err());
    }

    #[test]
    fn config_round_trip_and_validation() {
        let sys = SpinSystem::from_aggregates(193.6, 193.6, 145.2).unwrap();
        let cfg = RunConfig::for_system(&sys);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.spin_system().unwrap(), sys);
        let minimal = format!("schema = \"{CONFIG_SCHEMA}\"\n[system]\nj_hz = 100.0\n");
        let c = RunConfig::from_toml(&minimal).unwrap();
        assert_eq!(c.design.periods, 12);
        assert!(RunConfig::from_toml("schema = \"other\"\n[system]\nj_hz = 1.0\n").is_err());
        let r = RunConfig::from_toml(&format!("schema = \"{CONFIG_SCHEMA}\"\n[system]\nj_hz = 1.0\nbogus = 2\n"));
        assert!(matches!(r, Err(Error::Parse { line: 4, .. })), "{r:?}");
        let bad_mode = minimal.clone() + "[design]\nmode = \"fast\"\n";
        assert!(RunConfig::from_toml(&bad_mode).is_err());
    }

    #[test]
    fn table_uses_human_units() {
        let t = render_table(&sample_sequence());
        assert!(t.contains("D1/4") && t.contains("123.400"));
        // Table-style tilted pulse: 180° flip
        assert!(t.lines().any(|l| l.contains("R1") && l.trim_end().ends_with("180.0")));
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let text = format!("{DANTE_HEADER}\n0.1,0.2,0.3\n0.1,x,0.3\n");
        assert!(matches!(parse_dante_csv(&text), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_dante_csv("a,b,c\n1,2,3\n"), Err(Error::Parse { line: 1, .. })));
        let short = format!("{PROFILE_HEADER}\n1,2\n3\n");
        assert!(matches!(parse_profile_csv(&short), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn svg_is_well_formed() {
        let p = OffsetProfile { offsets: vec![-1e3, 0.0, 1e3], efficiency: vec![0.5, 0.6, 0.5], traces: None };
        let s = profile_svg(&p, Some(0.6022));
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<circle").count(), 3);
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![-1e6..1e6f64, -1.0..1.0f64, Just(0.0), Just(-0.0)]
    }

    proptest! {
        #[test]
        fn dante_csv_round_trip(steps in prop::collection::vec((0.0..3.1f64, finite(), 0.0..1e-2f64), 1..20)) {
            let d = DanteSequence { steps: steps.iter().map(|&(flip, phase, delay)| DanteStep { flip, phase, delay }).collect() };
            let back = parse_dante_csv(&write_dante_csv(&d)).unwrap();
            prop_assert_eq!(back, d);
        }

        #[test]
        fn trajectory_csv_round_trip(rows in prop::collection::vec(prop::array::uniform9(finite()), 0..15), boot in finite()) {
            let samples = rows.iter().map(|v| TrajectorySample {
                t: v[0], a: v[1], phi: v[2],
                state: ReducedState { l1: v[3], z1: v[4], l2: v[5], z2: v[6], gamma: v[7], psi1: v[8] },
            }).collect();
            let tr = ReducedTrajectory { samples, bootstrap: boot };
            let back = parse_trajectory_csv(&write_trajectory_csv(&tr)).unwrap();
            prop_assert_eq!(back, tr);
        }

        #[test]
        fn profile_and_buildup_round_trip(eff in prop::collection::vec(finite(), 1..12)) {
            let offsets: Vec<f64> = (0..eff.len()).map(|k| k as f64 * 33.3 - 100.0).collect();
            let p = OffsetProfile { offsets: offsets.clone(), efficiency: eff.clone(), traces: None };
            prop_assert_eq!(parse_profile_csv(&write_profile_csv(&p)).unwrap(), p);
            let traces: Vec<Vec<(f64, f64)>> = eff.iter().map(|&e| vec![(0.0, 0.0), (1e-3, e)]).collect();
            let back = parse_buildup_csv(&write_buildup_csv(&offsets, &traces)).unwrap();
            prop_assert_eq!(back, offsets.into_iter().zip(traces).collect::<Vec<_>>());
        }

        #[test]
        fn sequence_text_round_trip(
            flips in prop::collection::vec((0.0..7.0f64, finite(), 0.0..1e-3f64, prop::bool::ANY), 1..12)
        ) {
            let mut seq = PulseSequence::new(Mode::Ideal, None);
            for (k, &(flip, phase, delay, s)) in flips.iter().enumerate() {
                let channel = if s { Channel::S } else { Channel::I };
                seq.push(format!("p{k}"), PulseEvent::HardPulse { channel, flip, phase, nu1: None });
                seq.push(format!("d{k}"), PulseEvent::Delay { duration: delay });
            }
            let back = parse_sequence(&write_sequence(&seq).unwrap()).unwrap();
            prop_assert_eq!(back, seq);
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bbcrop::crop::{replay_efficiency, solve_gamma, CropOptions};
use bbcrop::harness::{
    cript_reference, inept_reference, offset_grid, offset_profile, rf_inhom_average, run_sequence, RfDistribution,
    SimOptions,
};
use bbcrop::io::{self, RunConfig, CONFIG_SCHEMA};
use bbcrop::pipeline::{design, DesignOptions, Source};
use bbcrop::star::{AssemblyOptions, EchoPattern, SCycle};
use bbcrop::{Error, SpinSystem};

/// Environment variable that overrides the configured output directory.
const OUT_ENV: &str = "BBCROP_OUT_DIR";

#[derive(Parser)]
#[command(name = "bbcrop", version, about = "Broadband relaxation-optimized polarization transfer: design and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the efficiency bound and the locked-angle constants
    Bound(Common),
    /// Design a sequence and write trajectory, DANTE and sequence files
    Design {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        design: DesignFlags,
    },
    /// Simulate a sequence file over the configured offset grid
    Simulate {
        #[command(flatten)]
        common: Common,
        /// sequence file written by `design`
        #[arg(long)]
        sequence: PathBuf,
        #[command(flatten)]
        sweep: SweepFlags,
    },
    /// Simulate the INEPT and CRIPT references and compare with the bound
    Baseline(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// scalar coupling J (Hz)
    #[arg(long)]
    j: Option<f64>,
    /// total auto relaxation of I (Hz); sets k_DD and clears k_CSA,I
    #[arg(long)]
    ka: Option<f64>,
    /// cross-correlated relaxation of I (Hz)
    #[arg(long)]
    kc: Option<f64>,
    /// output directory (overrides the config and the environment)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DesignFlags {
    /// number of echo periods
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    periods: Option<u32>,
    /// ideal | finite
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    nu1_i: Option<f64>,
    #[arg(long)]
    nu1_s: Option<f64>,
    /// R3R1R3 | R3R2R3 | R2R1R2
    #[arg(long)]
    pattern: Option<String>,
    /// xy4 | xy8
    #[arg(long)]
    s_cycle: Option<String>,
    /// grid points per axis for the k_c = 0 path
    #[arg(long)]
    dp_grid: Option<usize>,
}

#[derive(Args)]
struct SweepFlags {
    #[arg(long)]
    offsets: Option<usize>,
    /// offsets span ±span_j·J
    #[arg(long)]
    span_j: Option<f64>,
    /// fractional FWHM of the rf amplitude distribution
    #[arg(long)]
    rf_fwhm: Option<f64>,
}

enum Failure {
    Usage(String),
    Run(Error),
    /// malformed input file
    Input(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn load_config(c: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let j = c.j.ok_or_else(|| Failure::Usage("either --config or --j is required".into()))?;
            let mut cfg = RunConfig::for_system(&SpinSystem { j, k_dd: 0.0, k_csa_i: 0.0, k_csa_s: 0.0, kc_i: 0.0, kc_s: 0.0 });
            cfg.schema = CONFIG_SCHEMA.into();
            cfg
        }
    };
    if let Some(j) = c.j {
        cfg.system.j_hz = j;
    }
    if let Some(ka) = c.ka {
        cfg.system.k_dd_hz = ka;
        cfg.system.k_csa_i_hz = 0.0;
    }
    if let Some(kc) = c.kc {
        cfg.system.kc_i_hz = kc;
    }
    if let Ok(dir) = std::env::var(OUT_ENV) {
        if !dir.is_empty() {
            cfg.output.dir = PathBuf::from(dir);
        }
    }
    if let Some(out) = &c.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: &str) -> std::result::Result<(), Failure> {
    let p = io::write_artifact(dir, name, contents)?;
    println!("wrote {}", p.display());
    Ok(())
}

fn cmd_bound(c: &Common) -> CmdResult {
    let cfg = load_config(c)?;
    let sys = cfg.spin_system()?;
    let k = solve_gamma(&sys)?;
    println!("eta   = {:.10}", k.eta);
    println!("zeta  = {:.10}", k.zeta);
    println!("gamma = {:.10} rad", k.gamma);
    println!("theta = {:.10} rad", k.theta);
    println!("xi    = {:.10}", k.xi);
    println!("chi   = {:.10}", k.chi);
    Ok(())
}

fn cmd_design(c: &Common, f: &DesignFlags) -> CmdResult {
    let mut cfg = load_config(c)?;
    let d = &mut cfg.design;
    if let Some(n) = f.periods {
        d.periods = n as usize;
    }
    if let Some(m) = &f.mode {
        d.mode = m.clone();
    }
    if let Some(v) = f.nu1_i {
        d.nu1_i_hz = v;
    }
    if let Some(v) = f.nu1_s {
        d.nu1_s_hz = v;
    }
    if let Some(p) = &f.pattern {
        d.pattern = p.clone();
    }
    if let Some(s) = &f.s_cycle {
        d.s_cycle = s.clone();
    }
    if let Some(g) = f.dp_grid {
        d.dp_grid = g;
    }
    if cfg.design.periods == 0 {
        return Err(Failure::Usage("periods must be at least 1".into()));
    }
    cfg.validate()?;
    let sys = cfg.spin_system()?;
    let d = &cfg.design;
    let assembly = AssemblyOptions {
        mode: cfg.mode()?,
        nu1_i: d.nu1_i_hz,
        nu1_s: d.nu1_s_hz,
        pattern: EchoPattern::parse(&d.pattern)?,
        s_cycle: SCycle::parse(&d.s_cycle)?,
    };
    let opts = DesignOptions { dp_grid: d.dp_grid, ..DesignOptions::new(d.periods, assembly) };
    let out = design(&sys, &opts)?;
    let dir = &cfg.output.dir;
    match &out.source {
        Source::Crop { constants, trajectory } => {
            println!("path: optimal trajectory (eta = {:.6})", constants.eta);
            write(dir, "trajectory.csv", &io::write_trajectory_csv(trajectory))?;
        }
        Source::Dp { value, predicted } => {
            println!("path: dynamic program (V = {value:.6}, replay {predicted:.6})");
        }
    }
    write(dir, "dante.csv", &io::write_dante_csv(&out.dante))?;
    write(dir, "sequence.txt", &io::write_sequence(&out.sequence)?)?;
    write(dir, "sequence_plain.txt", &io::write_sequence(&out.plain)?)?;
    write(dir, "sequence_table.txt", &io::render_table(&out.sequence))?;
    write(dir, "design.json", &io::to_json(&out)?)?;
    write(dir, "config.toml", &cfg.to_toml()?)?;
    let e = run_sequence(&sys, &out.sequence, &SimOptions::default())?.efficiency;
    println!("on-resonance efficiency = {e:.6}");
    Ok(())
}

fn cmd_simulate(c: &Common, seq_path: &Path, f: &SweepFlags) -> CmdResult {
    let mut cfg = load_config(c)?;
    if let Some(n) = f.offsets {
        cfg.sweep.offsets = n;
    }
    if let Some(s) = f.span_j {
        cfg.sweep.span_j = s;
    }
    if let Some(w) = f.rf_fwhm {
        cfg.sweep.rf_fwhm = w;
    }
    cfg.validate()?;
    let seq = match io::read_sequence(seq_path) {
        Ok(s) => s,
        Err(e @ Error::Io(_)) => return Err(Failure::Run(e)),
        Err(e) => return Err(Failure::Input(e)),
    };
    let sys = cfg.spin_system()?;
    let eta = bbcrop::crop::efficiency_bound(&sys)?;
    let offsets = offset_grid(&sys, cfg.sweep.offsets, cfg.sweep.span_j);
    let profile = offset_profile(&sys, &seq, &offsets, &SimOptions::default(), false)?;
    let dir = &cfg.output.dir;
    write(dir, "profile.csv", &io::write_profile_csv(&profile))?;
    write(dir, "profile.svg", &io::profile_svg(&profile, Some(eta)))?;
    if !cfg.sweep.buildup_offsets_hz.is_empty() {
        let mut b = cfg.sweep.buildup_offsets_hz.clone();
        b.sort_by(f64::total_cmp);
        b.dedup();
        let runs = offset_profile(&sys, &seq, &b, &SimOptions::default(), true)?;
        write(dir, "buildup.csv", &io::write_buildup_csv(&b, runs.traces.as_deref().unwrap_or_default()))?;
    }
    if cfg.sweep.rf_fwhm > 0.0 {
        let dist = RfDistribution::gaussian(cfg.sweep.rf_fwhm, cfg.sweep.rf_samples)?;
        let avg = rf_inhom_average(&sys, &seq, &offsets, &dist)?;
        write(dir, "profile_rf.csv", &io::write_profile_csv(&avg))?;
        println!("rf-averaged minimum = {:.6} ({:.4} eta)", avg.min(), avg.min() / eta);
    }
    println!("profile minimum = {:.6} ({:.4} eta)", profile.min(), profile.min() / eta);
    Ok(())
}

fn cmd_baseline(c: &Common) -> CmdResult {
    let cfg = load_config(c)?;
    let sys = cfg.spin_system()?;
    let n = 2000;
    let taus: Vec<f64> = (1..=n).map(|k| k as f64 / n as f64 / sys.j).collect();
    let inept = inept_reference(&sys, &taus, &SimOptions::default())?;
    let kc = sys.k_c().abs();
    let ts: Vec<f64> = if kc > 0.0 { (1..=n).map(|k| 4.0 * k as f64 / n as f64 / kc).collect() } else { taus.clone() };
    let cript = cript_reference(&sys, &ts, &SimOptions::default())?;
    let eta = bbcrop::crop::efficiency_bound(&sys)?;
    let mut csv = String::from("kind,delay_s,efficiency\n");
    for (name, curve) in [("inept", &inept), ("cript", &cript)] {
        for (t, e) in curve.grid.iter().zip(&curve.efficiency) {
            csv.push_str(&format!("{name},{t},{e}\n"));
        }
    }
    write(&cfg.output.dir, "baseline.csv", &csv)?;
    println!("bound  eta = {eta:.6}");
    if sys.k_c() != 0.0 {
        let traj = bbcrop::crop::generate_crop(&sys, &CropOptions::for_system(&sys))?;
        println!("crop   replay = {:.6}", replay_efficiency(&sys, &traj)?);
    }
    println!("inept  max = {:.6} at {:.6e} s", inept.best, inept.best_at);
    println!("cript  max = {:.6} at {:.6e} s", cript.best, cript.best_at);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::Bound(c) => cmd_bound(c),
        Command::Design { common, design } => cmd_design(common, design),
        Command::Simulate { common, sequence, sweep } => cmd_simulate(common, sequence, sweep),
        Command::Baseline(c) => cmd_baseline(c),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: malformed input: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            match e.root() {
                Error::Io(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

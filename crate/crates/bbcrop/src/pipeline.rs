//! The design pipeline: trajectory (or dynamic program when k_c = 0) →
//! DANTE train → moving frames → broadband assembly.

use serde::{Deserialize, Serialize};

use crate::crop::{generate_crop, solve_gamma, CropConstants, CropOptions, ReducedTrajectory};
use crate::dp::{dante_discretize, extract_sequence, value_iteration, DanteOptions, DanteSequence, DpConfig, Partition, Placement};
use crate::error::{Error, Result};
use crate::liouville::SpinSystem;
use crate::star::{assemble_bbcrop, compute_frames, dante_to_sequence, AssemblyOptions, FrameSampling, PeriodFrames, PulseSequence};

/// |k_c| below this (relative to k_a) takes the dynamic-programming path.
const KC_ZERO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    /// number of delays (echo periods) in the train
    pub periods: usize,
    pub assembly: AssemblyOptions,
    pub sampling: FrameSampling,
    pub dante: DanteOptions,
    /// grid points per axis for the k_c = 0 path
    pub dp_grid: usize,
}

impl DesignOptions {
    pub fn new(periods: usize, assembly: AssemblyOptions) -> Self {
        DesignOptions {
            periods,
            assembly,
            sampling: FrameSampling::QuarterBoundaries,
            dante: DanteOptions { partition: Partition::EqualFlip, placement: Placement::Centered },
            dp_grid: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Source {
    Crop { constants: CropConstants, trajectory: ReducedTrajectory },
    /// optimal value V_N(1, 0) of the dynamic program and its forward replay
    Dp { value: f64, predicted: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub source: Source,
    pub dante: DanteSequence,
    pub frames: Vec<PeriodFrames>,
    /// the DANTE train without refocusing
    pub plain: PulseSequence,
    pub sequence: PulseSequence,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: name, source: Box::new(e) })
}

/// Run the whole design for `sys`.
pub fn design(sys: &SpinSystem, opts: &DesignOptions) -> Result<Design> {
    if opts.periods == 0 {
        return Err(Error::Parameter("number of periods must be at least 1".into()));
    }
    sys.validate()?;
    let (source, dante) = if sys.k_c().abs() <= KC_ZERO * sys.k_a().max(1.0) {
        let policy = stage("dp", value_iteration(sys, DpConfig { grid_n: opts.dp_grid, ..DpConfig::new(opts.periods) }))?;
        let ex = stage("dp", extract_sequence(&policy))?;
        (Source::Dp { value: ex.value, predicted: ex.predicted }, ex.dante)
    } else {
        let constants = stage("bound", solve_gamma(sys))?;
        let trajectory = stage("trajectory", generate_crop(sys, &CropOptions::for_system(sys)))?;
        let pulses = match opts.dante.placement {
            Placement::Centered => opts.periods + 1,
            Placement::Leading => opts.periods,
        };
        let dante = stage("dante", dante_discretize(&trajectory, pulses, opts.dante))?;
        (Source::Crop { constants, trajectory }, dante)
    };
    let frames = stage("frames", compute_frames(&dante, sys, opts.sampling))?;
    let a = &opts.assembly;
    let plain = stage("assembly", dante_to_sequence(&dante, a.mode, a.nu1_i, Some(*sys)))?;
    let sequence = stage("assembly", assemble_bbcrop(&dante, &frames, a, Some(*sys)))?;
    Ok(Design { source, dante, frames, plain, sequence })
}

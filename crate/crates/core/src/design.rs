//! The design pipeline: controller kernel, decoupling, feedback gains and
//! observer on one grid.

use nalgebra::DMatrix;

use crate::decoupling::{compute_feedback_gains, solve_decoupling, DecouplingError, DecouplingSolution, FeedbackGains};
use crate::kernel::{compute_g, extract_a0, solve_controller_kernel, KernelError, KernelField, KernelStats};
use crate::model::{DesignParams, Grid, ModelError, PlantSpec, SampledPlant, SpatialMatrixFunction};
use crate::observer::{design_observer, ObserverDesign, ObserverError};
use crate::placement::{place_poles, PlacementError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DesignError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("controller kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("controller pole placement: {0}")]
    Placement(#[from] PlacementError),
    #[error("decoupling: {0}")]
    Decoupling(#[from] DecouplingError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error("closed-loop analysis: {0}")]
    Analysis(#[from] crate::analysis::AnalysisError),
}

impl DesignError {
    /// Pipeline stage that failed.
    pub fn stage(&self) -> &'static str {
        match self {
            DesignError::Model(_) => "validation",
            DesignError::Kernel(_) => "controller kernel",
            DesignError::Placement(_) => "placement",
            DesignError::Decoupling(_) => "decoupling",
            DesignError::Observer(ObserverError::Unobservable) => "observability",
            DesignError::Observer(ObserverError::Placement(_)) => "observer placement",
            DesignError::Observer(_) => "observer",
            DesignError::Analysis(_) => "analysis",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Design {
    pub grid: Grid,
    pub sp: SampledPlant,
    pub kernel: KernelField,
    pub kernel_stats: KernelStats,
    pub a0: SpatialMatrixFunction,
    pub g: SpatialMatrixFunction,
    /// ODE gain K of the decoupled target system.
    pub k: DMatrix<f64>,
    pub decoupling: DecouplingSolution,
    pub gains: FeedbackGains,
    pub observer: ObserverDesign,
}

/// Controller side only.
pub fn design_controller(
    spec: &PlantSpec,
    params: &DesignParams,
) -> Result<(Grid, SampledPlant, KernelField, KernelStats, DecouplingSolution, FeedbackGains), DesignError> {
    spec.check_dimensions()?;
    params.check(spec)?;
    let grid = params.grid()?;
    let sp = spec.sample(&grid);
    let (kernel, stats) = solve_controller_kernel(spec, params)?;
    let a0 = extract_a0(&kernel, &sp, &spec.q0, spec.p);
    let g = compute_g(&kernel, &sp, &spec.c2, spec.p);
    let k = place_poles(&spec.f, &spec.b, &params.controller_poles, params.seed)?;
    let dec = solve_decoupling(spec, &sp, &k, &a0, &g)?;
    let gains = compute_feedback_gains(&kernel, &dec.p1row, &dec.n_i, spec.p);
    Ok((grid, sp, kernel, stats, dec, gains))
}

pub fn run_design(spec: &PlantSpec, params: &DesignParams) -> Result<Design, DesignError> {
    let (grid, sp, kernel, kernel_stats, decoupling, gains) = design_controller(spec, params)?;
    let a0 = extract_a0(&kernel, &sp, &spec.q0, spec.p);
    let g = compute_g(&kernel, &sp, &spec.c2, spec.p);
    let observer = design_observer(spec, &sp, params)?;
    Ok(Design {
        grid,
        sp,
        kernel,
        kernel_stats,
        a0,
        g,
        k: decoupling.k.clone(),
        decoupling,
        gains,
        observer,
    })
}

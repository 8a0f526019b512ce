//! The two evaluation pipelines: optimize-then-differentiate versus
//! differentiate-then-optimize. Both run the identical pass pipeline and
//! the identical AD engine; only the ordering differs.

use crate::autodiff::{self, GradRequest, SynthError};
use crate::ir::IrModule;
use crate::opt::{run_passes, PassPipeline};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Optimize, then AD, then optimize.
    Enzyme,
    /// AD first, then two optimization rounds.
    Ref,
}

impl PipelineMode {
    pub fn name(self) -> &'static str {
        match self {
            PipelineMode::Enzyme => "enzyme",
            PipelineMode::Ref => "ref",
        }
    }
}

impl std::str::FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "enzyme" => Ok(PipelineMode::Enzyme),
            "ref" => Ok(PipelineMode::Ref),
            other => Err(format!("unknown pipeline mode `{other}`")),
        }
    }
}

/// Runs the requested pipeline over a copy of the module and returns the
/// module containing the synthesized gradient.
pub fn pipeline(
    m: &IrModule,
    req: &GradRequest,
    mode: PipelineMode,
    passes: &PassPipeline,
) -> Result<IrModule, SynthError> {
    match mode {
        PipelineMode::Enzyme => {
            let opt = run_passes(m, passes);
            let with_grad = autodiff::synthesize(&opt, req)?;
            Ok(run_passes(&with_grad, passes))
        }
        PipelineMode::Ref => {
            let with_grad = autodiff::synthesize(m, req)?;
            let once = run_passes(&with_grad, passes);
            Ok(run_passes(&once, passes))
        }
    }
}

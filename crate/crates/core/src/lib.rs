//! Gradient synthesis for a miniature SSA IR.
//!
//! The crate contains the full toolchain: the IR itself (`ir`), the
//! interprocedural type analysis (`typetree`), activity analysis
//! (`activity`), an optimizer with LICM/inlining/DCE/simplification
//! (`opt`), reverse-mode gradient synthesis with shadow memory and tape
//! planning (`autodiff`), a deterministic step-counting interpreter with
//! a finite-difference gradient checker (`interp`), and the
//! pipeline/benchmark driver (`pipeline`, `bench`, `manifest`).

pub mod activity;
pub mod analysis;
pub mod autodiff;
pub mod bench;
pub mod interp;
pub mod ir;
pub mod manifest;
pub mod opt;
pub mod pipeline;
pub mod typetree;

pub use activity::{ActivityInfo, ActivitySpec};
pub use autodiff::{GradMode, GradRequest, TapePlan};
pub use interp::{ExecConfig, ExecTrace, GradCheckReport};
pub use ir::{IrFunction, IrModule, IrType};
pub use pipeline::PipelineMode;
pub use typetree::{BaseType, TypeEnv, TypeTree};

//! Reverse-mode gradient synthesis.
//!
//! For a requested function the synthesizer builds `grad_<fn>`: a forward
//! section that mirrors the primal (with shadow allocations, cache writes
//! and augmented calls) and one reverse block per forward block, emitted
//! in reverse order, that accumulates adjoints into shadow slots and
//! shadow memory. Tape planning decides per needed value whether the
//! reverse pass recomputes it or reads it from a cache; loops are
//! reversed by replaying trip counts and joins by reusing the branch
//! condition or a predecessor record.

mod expand;
mod synth;
mod tape;
mod use_analysis;

pub use expand::expand_autodiff_intrinsics;
pub use synth::{register_custom_adjoint, synthesize, synthesize_gradient, SynthContext};
pub use tape::{plan_tape, CacheKind, TapePlan};
pub use use_analysis::differential_use;

use crate::activity::{ActivitySpec, RetActivity};
use crate::ir::{ActivityToken, IrFunction, IrType};
use thiserror::Error;

/// Name of the call target the expander rewrites into gradient calls.
pub const AUTODIFF_INTRINSIC: &str = "__enzyme_autodiff";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Forward and reverse pass in a single function.
    Combined,
    /// Separate augmented forward and reverse functions, connected by a
    /// tape payload; required when a caller interleaves work between the
    /// passes.
    Split,
}

#[derive(Debug, Clone)]
pub struct GradRequest {
    pub function: String,
    pub spec: ActivitySpec,
    pub mode: GradMode,
}

impl GradRequest {
    pub fn combined(function: impl Into<String>, spec: ActivitySpec) -> GradRequest {
        GradRequest {
            function: function.into(),
            spec,
            mode: GradMode::Combined,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SynthError {
    #[error(transparent)]
    TypeConflict(#[from] crate::typetree::TypeConflict),
    #[error("type analysis failed: {0}")]
    Type(String),
    #[error("@{function}: unsupported construct: {what}")]
    UnsupportedConstruct { function: String, what: String },
    #[error("@{0} has no body and no custom adjoint; cannot synthesize its gradient")]
    MissingDefinition(String),
    #[error("invalid activity: {0}")]
    BadActivity(String),
    #[error("custom adjoint signature mismatch: {0}")]
    CustomSignature(String),
    #[error("@{function}: {what}")]
    Other { function: String, what: String },
}

/// Name of the combined gradient entry point for `fn_name`.
pub fn grad_name(fn_name: &str) -> String {
    format!("grad_{fn_name}")
}

/// Internal pair names carry the activity pattern so one callee can have
/// gradients for several call-site patterns.
pub fn pattern_suffix(spec: &ActivitySpec) -> String {
    let mut s = String::new();
    for t in &spec.params {
        s.push(match t {
            ActivityToken::Active => 'a',
            ActivityToken::Dup => 'd',
            ActivityToken::DupNoNeed => 'n',
            ActivityToken::Const => 'c',
        });
    }
    if s.is_empty() {
        s.push('v');
    }
    s
}

pub fn aug_name(fn_name: &str, spec: &ActivitySpec) -> String {
    format!("aug_{fn_name}.{}", pattern_suffix(spec))
}

pub fn rev_name(fn_name: &str, spec: &ActivitySpec) -> String {
    format!("rev_{fn_name}.{}", pattern_suffix(spec))
}

/// Name of the two-slot (augmented, gradient) global that serves as the
/// shadow of a taken-address function.
pub fn shadow_pair_name(fn_name: &str) -> String {
    format!("__adjoint_pair_{fn_name}")
}

/// The calling convention of synthesized gradients, shared by synthesis,
/// the expander, gradcheck and the validator:
///
/// - parameters: primal parameters in order, each dup/dupnoneed parameter
///   immediately followed by its shadow;
/// - a trailing `d_ret` seed parameter when the primal returns a float
///   and the return is active;
/// - augmented functions append a `ptr` tape-out slot instead of the seed;
///   reverse functions append the seed (if any) then the `ptr` tape-in;
/// - returns: the derivative of the single active scalar parameter, or
///   void (zero or two-plus active scalars; in the latter case a trailing
///   `ptr` out-parameter receives the derivatives in parameter order).
pub fn gradient_param_types(f: &IrFunction, spec: &ActivitySpec) -> Vec<IrType> {
    let mut tys = Vec::new();
    for (p, tok) in f.params.iter().zip(&spec.params) {
        tys.push(p.ty);
        if tok.is_dup() {
            tys.push(IrType::Ptr);
        }
    }
    tys
}

pub fn has_seed_param(f: &IrFunction, spec: &ActivitySpec) -> bool {
    spec.ret == RetActivity::Active
        && f.return_type.map(|t| t.is_float()).unwrap_or(false)
}

pub fn active_scalar_count(spec: &ActivitySpec) -> usize {
    spec.params
        .iter()
        .filter(|t| **t == ActivityToken::Active)
        .count()
}

/// Return type of the combined gradient / reverse function.
pub fn gradient_return_type(f: &IrFunction, spec: &ActivitySpec) -> Option<IrType> {
    match active_scalar_count(spec) {
        1 => {
            let (p, _) = f
                .params
                .iter()
                .zip(&spec.params)
                .find(|(_, t)| **t == ActivityToken::Active)
                .unwrap();
            Some(p.ty)
        }
        _ => None,
    }
}

/// Signature check for a registered custom (augmented, gradient) pair,
/// against the canonical activity of the target.
pub fn check_custom_pair_signature(
    target: &IrFunction,
    aug: &IrFunction,
    grad: &IrFunction,
) -> Result<(), String> {
    let spec = ActivitySpec::canonical(target);
    let base = gradient_param_types(target, &spec);

    let mut want_aug = base.clone();
    want_aug.push(IrType::Ptr); // tape-out slot
    let aug_tys: Vec<IrType> = aug.params.iter().map(|p| p.ty).collect();
    if aug_tys != want_aug {
        return Err(format!(
            "@{}: augmented @{} takes ({}), expected ({})",
            target.name,
            aug.name,
            fmt_tys(&aug_tys),
            fmt_tys(&want_aug)
        ));
    }
    if aug.return_type != target.return_type {
        return Err(format!(
            "@{}: augmented @{} must return the primal result",
            target.name, aug.name
        ));
    }

    let mut want_grad = base;
    if has_seed_param(target, &spec) {
        want_grad.push(target.return_type.unwrap());
    }
    want_grad.push(IrType::F64); // tape payload
    let grad_tys: Vec<IrType> = grad.params.iter().map(|p| p.ty).collect();
    if grad_tys != want_grad {
        return Err(format!(
            "@{}: gradient @{} takes ({}), expected ({})",
            target.name,
            grad.name,
            fmt_tys(&grad_tys),
            fmt_tys(&want_grad)
        ));
    }
    let want_ret = gradient_return_type(target, &spec);
    if grad.return_type != want_ret {
        return Err(format!(
            "@{}: gradient @{} returns {:?}, expected {:?}",
            target.name, grad.name, grad.return_type, want_ret
        ));
    }
    Ok(())
}

fn fmt_tys(tys: &[IrType]) -> String {
    tys.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

//! The pass pipeline: LICM, inlining, DCE, simplification and optional
//! CSE. Passes preserve observable semantics (same return values, same
//! external-call sequence, same final memory); float-algebraic rewrites
//! are gated behind each function's `fast` flag.

mod cse;
mod dce;
mod inline;
mod licm;
mod simplify;

pub use cse::cse;
pub use dce::dce;
pub use inline::inline_calls;
pub use licm::licm;
pub use simplify::simplify;

pub use crate::analysis::{AliasAnalysis, AliasVerdict};

use crate::ir::IrModule;
use std::str::FromStr;
use thiserror::Error;

pub const DEFAULT_INLINE_THRESHOLD: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Licm,
    Inline,
    Dce,
    Simplify,
    Cse,
}

impl Pass {
    pub fn name(self) -> &'static str {
        match self {
            Pass::Licm => "licm",
            Pass::Inline => "inline",
            Pass::Dce => "dce",
            Pass::Simplify => "simplify",
            Pass::Cse => "cse",
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("unknown pass `{0}`")]
pub struct UnknownPass(pub String);

impl FromStr for Pass {
    type Err = UnknownPass;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "licm" => Ok(Pass::Licm),
            "inline" => Ok(Pass::Inline),
            "dce" => Ok(Pass::Dce),
            "simplify" => Ok(Pass::Simplify),
            "cse" => Ok(Pass::Cse),
            other => Err(UnknownPass(other.to_string())),
        }
    }
}

/// Ordered list of passes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassPipeline {
    pub passes: Vec<Pass>,
    pub inline_threshold: usize,
}

impl Default for PassPipeline {
    /// The fixed pipeline both benchmark modes share. LICM runs before
    /// inlining: expanding a callee's loop into a caller's loop first
    /// would destroy the hoistable call that makes code motion pay off.
    fn default() -> PassPipeline {
        PassPipeline {
            passes: vec![Pass::Simplify, Pass::Licm, Pass::Inline, Pass::Dce],
            inline_threshold: DEFAULT_INLINE_THRESHOLD,
        }
    }
}

impl PassPipeline {
    pub fn empty() -> PassPipeline {
        PassPipeline {
            passes: Vec::new(),
            inline_threshold: DEFAULT_INLINE_THRESHOLD,
        }
    }

    pub fn parse(list: &str) -> Result<PassPipeline, UnknownPass> {
        let mut passes = Vec::new();
        for name in list.split(',') {
            let name = name.trim();
            if name.is_empty() {
                continue;
            }
            passes.push(name.parse()?);
        }
        Ok(PassPipeline {
            passes,
            inline_threshold: DEFAULT_INLINE_THRESHOLD,
        })
    }
}

impl std::fmt::Display for PassPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.passes.iter().map(|p| p.name()).collect();
        write!(f, "{}", names.join(","))
    }
}

/// Runs the pipeline over a copy of the module.
pub fn run_passes(m: &IrModule, pipeline: &PassPipeline) -> IrModule {
    let mut m = m.clone();
    for pass in &pipeline.passes {
        run_one(&mut m, *pass, pipeline.inline_threshold);
    }
    m
}

fn run_one(m: &mut IrModule, pass: Pass, inline_threshold: usize) {
    match pass {
        Pass::Simplify => {
            for i in 0..m.functions.len() {
                if m.functions[i].is_declaration() {
                    continue;
                }
                let fast = m.functions[i].fast;
                simplify(&mut m.functions[i], fast);
            }
        }
        Pass::Dce => {
            let ro = readonly_set(m);
            for f in &mut m.functions {
                if !f.is_declaration() {
                    dce(f, &ro);
                }
            }
        }
        Pass::Inline => {
            *m = inline_calls(m, inline_threshold);
        }
        Pass::Licm => {
            // Type information sharpens aliasing but is best-effort: a
            // module outside the analyzable subset still gets root-based
            // alias answers.
            let env = crate::typetree::analyze(m).ok();
            for i in 0..m.functions.len() {
                if m.functions[i].is_declaration() {
                    continue;
                }
                let f = m.functions[i].clone();
                let mut new_f = f.clone();
                licm(&mut new_f, m, env.as_ref());
                m.functions[i] = new_f;
            }
        }
        Pass::Cse => {
            for f in &mut m.functions {
                if !f.is_declaration() {
                    cse(f);
                }
            }
        }
    }
}

/// Names of functions proven readonly, for DCE of dead calls.
fn readonly_set(m: &IrModule) -> std::collections::BTreeSet<String> {
    m.functions
        .iter()
        .filter(|f| {
            crate::analysis::function_is_readonly(m, &f.name, &mut Vec::new())
        })
        .map(|f| f.name.clone())
        .collect()
}

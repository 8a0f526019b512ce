//! Expansion of `__enzyme_autodiff` calls into calls to synthesized
//! gradients. Activity tokens in the argument list pair shadows with
//! duplicated pointers; `dupnoneed` additionally elides recomputing the
//! primal output.

use super::synth::SynthContext;
use super::{
    grad_name, has_seed_param, GradMode, GradRequest, SynthError, AUTODIFF_INTRINSIC,
};
use crate::activity::{ActivitySpec, RetActivity};
use crate::ir::*;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
struct ParsedSite {
    target: String,
    spec: ActivitySpec,
    /// Gradient-call arguments in convention order (without the seed).
    args: Vec<Operand>,
}

fn parse_site(m: &IrModule, inst: &Instruction) -> Result<ParsedSite, SynthError> {
    let bad = |what: String| SynthError::Other {
        function: AUTODIFF_INTRINSIC.to_string(),
        what,
    };
    let mut ops = inst.operands.iter();
    let Some(Operand::Global(target)) = ops.next() else {
        return Err(bad("first argument must be the function to differentiate".into()));
    };
    let f = m
        .function(target)
        .ok_or_else(|| SynthError::MissingDefinition(target.clone()))?;
    let mut tokens = Vec::new();
    let mut args = Vec::new();
    let mut param_idx = 0usize;
    while let Some(op) = ops.next() {
        let Operand::Token(tok) = op else {
            return Err(bad(format!(
                "expected an activity token before argument {param_idx}"
            )));
        };
        let param = f.params.get(param_idx).ok_or_else(|| {
            bad(format!("more activity tokens than @{target} has parameters"))
        })?;
        match tok {
            ActivityToken::Active => {
                if !param.ty.is_float() {
                    return Err(bad(format!(
                        "diffe_active on non-float parameter %{}",
                        param.name
                    )));
                }
                let v = ops.next().ok_or_else(|| bad("missing active argument".into()))?;
                args.push(v.clone());
            }
            ActivityToken::Const => {
                let v = ops.next().ok_or_else(|| bad("missing const argument".into()))?;
                args.push(v.clone());
            }
            ActivityToken::Dup | ActivityToken::DupNoNeed => {
                if param.ty != IrType::Ptr {
                    return Err(bad(format!(
                        "{} on non-pointer parameter %{}",
                        tok.name(),
                        param.name
                    )));
                }
                let p = ops.next().ok_or_else(|| bad("missing primal pointer".into()))?;
                let s = ops.next().ok_or_else(|| bad("missing shadow pointer".into()))?;
                args.push(p.clone());
                args.push(s.clone());
            }
        }
        tokens.push(*tok);
        param_idx += 1;
    }
    if param_idx != f.params.len() {
        return Err(bad(format!(
            "@{target} has {} parameters but {param_idx} were described",
            f.params.len()
        )));
    }
    let ret = match f.return_type {
        Some(t) if t.is_float() => RetActivity::Active,
        _ => RetActivity::Const,
    };
    Ok(ParsedSite {
        target: target.clone(),
        spec: ActivitySpec::new(tokens, ret),
        args,
    })
}

/// Replaces every `call @__enzyme_autodiff(@f, <tokens and args>)` with a
/// call to the synthesized combined gradient of `@f`.
pub fn expand_autodiff_intrinsics(m: &IrModule) -> Result<IrModule, SynthError> {
    // Collect sites first; synthesis changes the module.
    let mut sites: Vec<(String, String, usize, ParsedSite)> = Vec::new();
    for f in &m.functions {
        for b in &f.blocks {
            for (ii, inst) in b.instrs.iter().enumerate() {
                if inst.opcode == Opcode::Call
                    && inst.callee.as_deref() == Some(AUTODIFF_INTRINSIC)
                {
                    let site = parse_site(m, inst)?;
                    sites.push((f.name.clone(), b.name.clone(), ii, site));
                }
            }
        }
    }
    if sites.is_empty() {
        return Ok(m.clone());
    }
    let mut ctx = SynthContext::new(m)?;
    let mut grad_of: BTreeMap<String, String> = BTreeMap::new();
    for (_, _, _, site) in &sites {
        if grad_of.contains_key(&site.target) {
            continue;
        }
        let name = ctx.run(&GradRequest {
            function: site.target.clone(),
            spec: site.spec.clone(),
            mode: GradMode::Combined,
        })?;
        grad_of.insert(site.target.clone(), name);
    }
    let mut out = ctx.finish();
    for (fname, bname, ii, site) in sites {
        let target_fn = m.function(&site.target).unwrap();
        let mut args = site.args.clone();
        if has_seed_param(target_fn, &site.spec) {
            args.push(Operand::ConstFloat(1.0));
        }
        let grad = grad_of[&site.target].clone();
        let ret_ty = out.function(&grad).and_then(|g| g.return_type);
        let f = out.function_mut(&fname).unwrap();
        let b = f.block_mut(&bname).unwrap();
        let old = &b.instrs[ii];
        // The site's result, if any, receives the gradient's return.
        let mut call = Instruction::new(Opcode::Call);
        call.result = old.result.clone();
        call.ty = if old.result.is_some() { ret_ty } else { None };
        call.callee = Some(grad);
        call.operands = args;
        b.instrs[ii] = call;
    }
    let _ = grad_name("");
    Ok(out)
}

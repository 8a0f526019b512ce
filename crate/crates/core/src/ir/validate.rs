//! Structural validation: SSA form, CFG well-formedness, phi shape and
//! operand typing. Diagnostics are the output; an empty list means the
//! module satisfies every invariant the interpreter and analyses rely on.

use super::*;
use crate::analysis::{Cfg, DomTree};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub function: String,
    pub block: String,
    pub line: u32,
    pub msg: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.function.is_empty() {
            return write!(f, "{}", self.msg);
        }
        if self.block.is_empty() {
            return write!(f, "@{}: {}", self.function, self.msg);
        }
        write!(f, "@{} {}: {}", self.function, self.block, self.msg)
    }
}

struct Ctx<'a> {
    m: &'a IrModule,
    f: &'a IrFunction,
    diags: Vec<Diagnostic>,
}

impl<'a> Ctx<'a> {
    fn diag(&mut self, block: &str, line: u32, msg: impl Into<String>) {
        self.diags.push(Diagnostic {
            function: self.f.name.clone(),
            block: block.to_string(),
            line,
            msg: msg.into(),
        });
    }

    /// Static type of an operand, resolving value names against
    /// definitions and parameters.
    fn operand_type(&self, defs: &BTreeMap<&str, &Instruction>, op: &Operand) -> Option<IrType> {
        match op {
            Operand::Value(v) => {
                if let Some(p) = self.f.params.iter().find(|p| &p.name == v) {
                    return Some(p.ty);
                }
                defs.get(v.as_str()).and_then(|i| i.result_type())
            }
            Operand::ConstFloat(_) => None, // width from context
            Operand::ConstInt(_) => None,
            Operand::Null => Some(IrType::Ptr),
            Operand::Global(_) => Some(IrType::Ptr),
            Operand::Token(_) => None,
        }
    }

    fn check_operand_ty(
        &mut self,
        defs: &BTreeMap<&str, &Instruction>,
        block: &str,
        inst: &Instruction,
        op: &Operand,
        want: IrType,
        what: &str,
    ) {
        match op {
            Operand::ConstFloat(_) => {
                if !want.is_float() {
                    self.diag(
                        block,
                        inst.line,
                        format!("{}: float literal where {want} expected", inst.opcode.mnemonic()),
                    );
                }
            }
            Operand::ConstInt(v) => {
                if !want.is_int() {
                    self.diag(
                        block,
                        inst.line,
                        format!("{}: integer literal where {want} expected", inst.opcode.mnemonic()),
                    );
                } else if want == IrType::I1 && !(*v == 0 || *v == 1) {
                    self.diag(block, inst.line, format!("i1 literal must be 0 or 1, got {v}"));
                }
            }
            _ => {
                if let Some(got) = self.operand_type(defs, op) {
                    if got != want {
                        self.diag(
                            block,
                            inst.line,
                            format!(
                                "{}: {what} has type {got}, expected {want}",
                                inst.opcode.mnemonic()
                            ),
                        );
                    }
                }
            }
        }
    }
}

/// Checks every structural invariant; returns all violations found.
pub fn validate(m: &IrModule) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    for f in &m.functions {
        if f.is_declaration() {
            continue;
        }
        let mut ctx = Ctx { m, f, diags: Vec::new() };
        validate_function(&mut ctx);
        diags.extend(ctx.diags);
    }
    // custom_adjoint targets must exist and the pair must be declared with
    // the gradient calling convention for the target.
    for (target, (aug, grad)) in &m.custom_adjoints {
        for name in [target, aug, grad] {
            if m.function(name).is_none() {
                diags.push(Diagnostic {
                    function: String::new(),
                    block: String::new(),
                    line: 0,
                    msg: format!("custom_adjoint references unknown function @{name}"),
                });
            }
        }
        if let (Some(t), Some(a), Some(g)) =
            (m.function(target), m.function(aug), m.function(grad))
        {
            if let Err(msg) = crate::autodiff::check_custom_pair_signature(t, a, g) {
                diags.push(Diagnostic {
                    function: String::new(),
                    block: String::new(),
                    line: 0,
                    msg,
                });
            }
        }
    }
    diags
}

fn validate_function(ctx: &mut Ctx) {
    let f = ctx.f;
    // Single definition per value name.
    let mut defs: BTreeMap<&str, &Instruction> = BTreeMap::new();
    let mut def_block: BTreeMap<&str, usize> = BTreeMap::new();
    let mut param_names: Vec<&str> = Vec::new();
    for p in &f.params {
        if param_names.contains(&p.name.as_str()) {
            ctx.diag("", 0, format!("duplicate parameter %{}", p.name));
        }
        param_names.push(&p.name);
    }
    for (bi, b) in f.blocks.iter().enumerate() {
        for inst in &b.instrs {
            if let Some(r) = &inst.result {
                if param_names.contains(&r.as_str()) || defs.contains_key(r.as_str()) {
                    ctx.diag(&b.name, inst.line, format!("%{r} defined more than once"));
                } else {
                    defs.insert(r, inst);
                    def_block.insert(r, bi);
                }
            }
        }
    }

    // Terminators: exactly one, at the end of each block.
    for b in &f.blocks {
        match b.instrs.last() {
            Some(last) if last.is_terminator() => {}
            _ => ctx.diag(&b.name, 0, "block does not end in a terminator"),
        }
        for inst in b.instrs.iter().rev().skip(1) {
            if inst.is_terminator() {
                ctx.diag(&b.name, inst.line, "terminator in the middle of a block");
            }
        }
    }

    let cfg = Cfg::build(f);
    // Branch targets must exist.
    for b in &f.blocks {
        for inst in &b.instrs {
            if matches!(inst.opcode, Opcode::Br | Opcode::CondBr) {
                for t in &inst.targets {
                    if !cfg.index.contains_key(t) {
                        ctx.diag(&b.name, inst.line, format!("unknown block target `{t}`"));
                    }
                }
            }
        }
    }
    if !ctx.diags.is_empty() {
        // CFG-dependent checks below assume resolvable structure.
        return;
    }

    // The entry block has no predecessors.
    if !cfg.preds[0].is_empty() {
        ctx.diag(&f.blocks[0].name, 0, "entry block must not have predecessors");
    }

    let dom = DomTree::build(&cfg);

    // Phi shape: only at block heads, one incoming per predecessor.
    for (bi, b) in f.blocks.iter().enumerate() {
        let mut seen_non_phi = false;
        for inst in &b.instrs {
            if inst.opcode == Opcode::Phi {
                if seen_non_phi {
                    ctx.diag(&b.name, inst.line, "phi after non-phi instruction");
                }
                let mut incoming: Vec<&str> =
                    inst.targets.iter().map(|s| s.as_str()).collect();
                incoming.sort_unstable();
                let dups = incoming.windows(2).any(|w| w[0] == w[1]);
                if dups {
                    ctx.diag(&b.name, inst.line, "phi lists a predecessor twice");
                }
                let mut preds: Vec<&str> = cfg.preds[bi]
                    .iter()
                    .map(|&p| f.blocks[p].name.as_str())
                    .collect();
                preds.sort_unstable();
                preds.dedup();
                let mut inc: Vec<&str> = incoming.clone();
                inc.dedup();
                if inc != preds {
                    ctx.diag(
                        &b.name,
                        inst.line,
                        format!(
                            "phi incoming blocks {{{}}} do not match predecessors {{{}}}",
                            inc.join(", "),
                            preds.join(", ")
                        ),
                    );
                }
            } else {
                seen_non_phi = true;
            }
        }
    }

    // Dominance of uses, and per-opcode typing.
    for (bi, b) in f.blocks.iter().enumerate() {
        for (pos, inst) in b.instrs.iter().enumerate() {
            if inst.opcode == Opcode::Phi {
                for (op, label) in inst.operands.iter().zip(&inst.targets) {
                    if let Operand::Value(v) = op {
                        let Some(&pb) = cfg.index.get(label) else { continue };
                        if param_names.contains(&v.as_str()) {
                            continue;
                        }
                        match def_block.get(v.as_str()) {
                            Some(&db) => {
                                if !dom.dominates(db, pb) {
                                    ctx.diag(
                                        &b.name,
                                        inst.line,
                                        format!(
                                            "%{v} does not dominate the {label} edge of this phi"
                                        ),
                                    );
                                }
                            }
                            None => ctx.diag(
                                &b.name,
                                inst.line,
                                format!("use of undefined value %{v}"),
                            ),
                        }
                    }
                }
            } else {
                for v in inst.value_uses() {
                    if param_names.contains(&v) {
                        continue;
                    }
                    match def_block.get(v) {
                        Some(&db) => {
                            let ok = if db == bi {
                                // Same block: definition must come first.
                                b.instrs[..pos]
                                    .iter()
                                    .any(|i| i.result.as_deref() == Some(v))
                            } else {
                                dom.dominates(db, bi)
                            };
                            if !ok {
                                ctx.diag(
                                    &b.name,
                                    inst.line,
                                    format!("use of %{v} is not dominated by its definition"),
                                );
                            }
                        }
                        None => {
                            ctx.diag(&b.name, inst.line, format!("use of undefined value %{v}"))
                        }
                    }
                }
            }
            check_instruction(ctx, &defs, &b.name, inst);
        }
    }

    // Globals referenced must exist.
    for b in &f.blocks {
        for inst in &b.instrs {
            for op in &inst.operands {
                if let Operand::Global(g) = op {
                    if !ctx.m.has_symbol(g) {
                        ctx.diag(&b.name, inst.line, format!("unknown symbol @{g}"));
                    }
                }
            }
            if let Some(callee) = &inst.callee {
                if callee != crate::autodiff::AUTODIFF_INTRINSIC
                    && ctx.m.function(callee).is_none()
                {
                    ctx.diag(&b.name, inst.line, format!("call to unknown function @{callee}"));
                }
            }
        }
    }
}

fn check_instruction(
    ctx: &mut Ctx,
    defs: &BTreeMap<&str, &Instruction>,
    block: &str,
    inst: &Instruction,
) {
    let f = ctx.f;
    match inst.opcode {
        Opcode::FAdd | Opcode::FSub | Opcode::FMul | Opcode::FDiv => {
            let ty = inst.ty.unwrap();
            if !ty.is_float() {
                ctx.diag(block, inst.line, "float arithmetic requires f32/f64");
            }
            for op in &inst.operands {
                ctx.check_operand_ty(defs, block, inst, op, ty, "operand");
            }
        }
        Opcode::FNeg => {
            let ty = inst.ty.unwrap();
            if !ty.is_float() {
                ctx.diag(block, inst.line, "fneg requires f32/f64");
            }
            ctx.check_operand_ty(defs, block, inst, &inst.operands[0], ty, "operand");
        }
        Opcode::IAdd | Opcode::ISub | Opcode::IMul => {
            let ty = inst.ty.unwrap();
            if !matches!(ty, IrType::I32 | IrType::I64) {
                ctx.diag(block, inst.line, "integer arithmetic requires i32/i64");
            }
            for op in &inst.operands {
                ctx.check_operand_ty(defs, block, inst, op, ty, "operand");
            }
        }
        Opcode::ICmp(_) => {
            let ty = inst.ty.unwrap();
            if !ty.is_int() {
                ctx.diag(block, inst.line, "icmp compares integers");
            }
            for op in &inst.operands {
                ctx.check_operand_ty(defs, block, inst, op, ty, "operand");
            }
        }
        Opcode::FCmp(_) => {
            let ty = inst.ty.unwrap();
            if !ty.is_float() {
                ctx.diag(block, inst.line, "fcmp compares floats");
            }
            for op in &inst.operands {
                ctx.check_operand_ty(defs, block, inst, op, ty, "operand");
            }
        }
        Opcode::Select => {
            let ty = inst.ty.unwrap();
            ctx.check_operand_ty(defs, block, inst, &inst.operands[0], IrType::I1, "condition");
            ctx.check_operand_ty(defs, block, inst, &inst.operands[1], ty, "operand");
            ctx.check_operand_ty(defs, block, inst, &inst.operands[2], ty, "operand");
        }
        Opcode::Phi => {
            let ty = inst.ty.unwrap();
            for op in &inst.operands {
                ctx.check_operand_ty(defs, block, inst, op, ty, "incoming value");
            }
        }
        Opcode::CondBr => {
            ctx.check_operand_ty(defs, block, inst, &inst.operands[0], IrType::I1, "condition");
        }
        Opcode::Ret => match (f.return_type, inst.ty) {
            (None, None) => {}
            (Some(want), Some(got)) => {
                if want != got {
                    ctx.diag(
                        block,
                        inst.line,
                        format!("ret type {got} does not match function return type {want}"),
                    );
                }
                ctx.check_operand_ty(defs, block, inst, &inst.operands[0], want, "return value");
            }
            (None, Some(_)) => {
                ctx.diag(block, inst.line, "ret with value in a void function")
            }
            (Some(want), None) => {
                ctx.diag(block, inst.line, format!("ret void in a function returning {want}"))
            }
        },
        Opcode::Call => {
            let callee = inst.callee.as_deref().unwrap_or_default();
            if callee == crate::autodiff::AUTODIFF_INTRINSIC {
                return; // checked by the expander
            }
            if let Some(cf) = ctx.m.function(callee) {
                if inst.operands.len() != cf.params.len() {
                    ctx.diag(
                        block,
                        inst.line,
                        format!(
                            "call to @{callee} passes {} arguments, expected {}",
                            inst.operands.len(),
                            cf.params.len()
                        ),
                    );
                } else {
                    for (op, p) in inst.operands.iter().zip(&cf.params) {
                        ctx.check_operand_ty(defs, block, inst, op, p.ty, "argument");
                    }
                }
                if inst.ty != cf.return_type {
                    ctx.diag(
                        block,
                        inst.line,
                        format!("call result type does not match @{callee} return type"),
                    );
                }
            }
        }
        Opcode::CallInd => {
            ctx.check_operand_ty(defs, block, inst, &inst.operands[0], IrType::Ptr, "callee");
        }
        Opcode::Alloc => {
            ctx.check_operand_ty(defs, block, inst, &inst.operands[0], IrType::I64, "size");
        }
        Opcode::Free => {
            ctx.check_operand_ty(defs, block, inst, &inst.operands[0], IrType::Ptr, "pointer");
        }
        Opcode::Load => {
            ctx.check_operand_ty(defs, block, inst, &inst.operands[0], IrType::Ptr, "address");
        }
        Opcode::Store => {
            let ty = inst.ty.unwrap();
            ctx.check_operand_ty(defs, block, inst, &inst.operands[0], ty, "value");
            ctx.check_operand_ty(defs, block, inst, &inst.operands[1], IrType::Ptr, "address");
        }
        Opcode::Memcpy => {
            ctx.check_operand_ty(defs, block, inst, &inst.operands[0], IrType::Ptr, "dst");
            ctx.check_operand_ty(defs, block, inst, &inst.operands[1], IrType::Ptr, "src");
            ctx.check_operand_ty(defs, block, inst, &inst.operands[2], IrType::I64, "length");
        }
        Opcode::PtrAdd => {
            ctx.check_operand_ty(defs, block, inst, &inst.operands[0], IrType::Ptr, "base");
            ctx.check_operand_ty(defs, block, inst, &inst.operands[1], IrType::I64, "offset");
        }
        Opcode::SiToFp => {
            let ty = inst.ty.unwrap();
            if !ty.is_float() {
                ctx.diag(block, inst.line, "sitofp result must be f32/f64");
            }
            if let Some(got) = ctx.operand_type(defs, &inst.operands[0]) {
                if !got.is_int() {
                    ctx.diag(block, inst.line, "sitofp operand must be an integer");
                }
            }
        }
        Opcode::Intrinsic(i) => {
            let ty = inst.ty.unwrap();
            if !ty.is_float() {
                ctx.diag(block, inst.line, format!("{} produces a float", i.name()));
            }
            if inst.operands.len() != i.arity() {
                ctx.diag(
                    block,
                    inst.line,
                    format!("{} takes {} operands", i.name(), i.arity()),
                );
            }
            for op in &inst.operands {
                ctx.check_operand_ty(defs, block, inst, op, ty, "operand");
            }
        }
        Opcode::Br => {}
    }
}

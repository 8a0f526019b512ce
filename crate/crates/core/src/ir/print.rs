//! Canonical printer. `print` emits deterministic text that re-parses
//! to a structurally equal module.

use super::*;
use std::fmt::Write;

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        return "nan".to_string();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    // Shortest representation that round-trips; force a `.0` suffix so the
    // token lexes as a float.
    let s = format!("{v:?}");
    if s.contains('.') || s.contains('e') || s.contains('E') {
        s
    } else {
        format!("{s}.0")
    }
}

fn fmt_operand(o: &Operand) -> String {
    match o {
        Operand::Value(v) => format!("%{v}"),
        Operand::ConstFloat(v) => fmt_float(*v),
        Operand::ConstInt(v) => v.to_string(),
        Operand::Null => "null".to_string(),
        Operand::Global(g) => format!("@{g}"),
        Operand::Token(t) => format!("diffe_{}", t.name()),
    }
}

fn fmt_call_arg(o: &Operand, ty: Option<IrType>) -> String {
    match o {
        Operand::Global(g) => format!("@{g}"),
        Operand::Token(t) => format!("diffe_{}", t.name()),
        other => match ty {
            Some(t) => format!("{t} {}", fmt_operand(other)),
            None => fmt_operand(other),
        },
    }
}

/// Best-effort static type of an operand, for printing typed call
/// arguments. Value operands are resolved against the function.
fn operand_type(f: &IrFunction, o: &Operand) -> Option<IrType> {
    match o {
        Operand::Value(v) => {
            if let Some(p) = f.params.iter().find(|p| &p.name == v) {
                return Some(p.ty);
            }
            f.def_of(v).and_then(|i| i.result_type())
        }
        Operand::ConstFloat(_) => Some(IrType::F64),
        Operand::ConstInt(_) => Some(IrType::I64),
        Operand::Null => Some(IrType::Ptr),
        Operand::Global(_) => Some(IrType::Ptr),
        Operand::Token(_) => None,
    }
}

fn write_instruction(out: &mut String, f: &IrFunction, inst: &Instruction) {
    out.push_str("  ");
    if let Some(r) = &inst.result {
        let _ = write!(out, "%{r} = ");
    }
    let ty = inst.ty;
    match inst.opcode {
        Opcode::FAdd
        | Opcode::FSub
        | Opcode::FMul
        | Opcode::FDiv
        | Opcode::IAdd
        | Opcode::ISub
        | Opcode::IMul => {
            let _ = write!(
                out,
                "{} {} {}, {}",
                inst.opcode.mnemonic(),
                ty.unwrap(),
                fmt_operand(&inst.operands[0]),
                fmt_operand(&inst.operands[1])
            );
        }
        Opcode::FNeg | Opcode::SiToFp => {
            let _ = write!(
                out,
                "{} {} {}",
                inst.opcode.mnemonic(),
                ty.unwrap(),
                fmt_operand(&inst.operands[0])
            );
        }
        Opcode::ICmp(p) => {
            let _ = write!(
                out,
                "icmp {} {} {}, {}",
                p.name(),
                ty.unwrap(),
                fmt_operand(&inst.operands[0]),
                fmt_operand(&inst.operands[1])
            );
        }
        Opcode::FCmp(p) => {
            let _ = write!(
                out,
                "fcmp {} {} {}, {}",
                p.name(),
                ty.unwrap(),
                fmt_operand(&inst.operands[0]),
                fmt_operand(&inst.operands[1])
            );
        }
        Opcode::Select => {
            let _ = write!(
                out,
                "select {} {}, {}, {}",
                ty.unwrap(),
                fmt_operand(&inst.operands[0]),
                fmt_operand(&inst.operands[1]),
                fmt_operand(&inst.operands[2])
            );
        }
        Opcode::Phi => {
            let _ = write!(out, "phi {} ", ty.unwrap());
            for (k, (op, label)) in
                inst.operands.iter().zip(inst.targets.iter()).enumerate()
            {
                if k > 0 {
                    out.push_str(", ");
                }
                let _ = write!(out, "[ {}, {} ]", fmt_operand(op), label);
            }
        }
        Opcode::Br => {
            let _ = write!(out, "br {}", inst.targets[0]);
        }
        Opcode::CondBr => {
            let _ = write!(
                out,
                "condbr {}, {}, {}",
                fmt_operand(&inst.operands[0]),
                inst.targets[0],
                inst.targets[1]
            );
        }
        Opcode::Ret => {
            if let Some(t) = ty {
                let _ = write!(out, "ret {t} {}", fmt_operand(&inst.operands[0]));
            } else {
                out.push_str("ret void");
            }
        }
        Opcode::Call => {
            let tystr = ty.map(|t| t.to_string()).unwrap_or_else(|| "void".into());
            let _ = write!(out, "call {tystr} @{}(", inst.callee.as_deref().unwrap());
            for (k, a) in inst.operands.iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                out.push_str(&fmt_call_arg(a, operand_type(f, a)));
            }
            out.push(')');
        }
        Opcode::CallInd => {
            let tystr = ty.map(|t| t.to_string()).unwrap_or_else(|| "void".into());
            let _ = write!(out, "callind {tystr} {}(", fmt_operand(&inst.operands[0]));
            for (k, a) in inst.operands[1..].iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                out.push_str(&fmt_call_arg(a, operand_type(f, a)));
            }
            out.push(')');
        }
        Opcode::Alloc => {
            let _ = write!(out, "alloc {}", fmt_operand(&inst.operands[0]));
        }
        Opcode::Free => {
            let _ = write!(out, "free {}", fmt_operand(&inst.operands[0]));
        }
        Opcode::Load => {
            let _ = write!(
                out,
                "load {}, {}",
                ty.unwrap(),
                fmt_operand(&inst.operands[0])
            );
        }
        Opcode::Store => {
            let _ = write!(
                out,
                "store {} {}, {}",
                ty.unwrap(),
                fmt_operand(&inst.operands[0]),
                fmt_operand(&inst.operands[1])
            );
        }
        Opcode::Memcpy => {
            let _ = write!(
                out,
                "memcpy {}, {}, {}",
                fmt_operand(&inst.operands[0]),
                fmt_operand(&inst.operands[1]),
                fmt_operand(&inst.operands[2])
            );
        }
        Opcode::PtrAdd => {
            let _ = write!(
                out,
                "ptradd {}, {}",
                fmt_operand(&inst.operands[0]),
                fmt_operand(&inst.operands[1])
            );
        }
        Opcode::Intrinsic(i) => {
            let _ = write!(out, "{} {}", i.name(), ty.unwrap());
            for (k, a) in inst.operands.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                let _ = write!(out, " {}", fmt_operand(a));
            }
        }
    }
    if let Some(tag) = inst.tbaa {
        let _ = write!(out, " !tbaa.{tag}");
    }
    if inst.attrs.cache {
        out.push_str(" !cache");
    }
    if inst.attrs.shadow {
        out.push_str(" !shadow");
    }
    out.push('\n');
}

/// Renders a module as canonical IR text.
pub fn print(m: &IrModule) -> String {
    let mut out = String::new();
    for g in &m.globals {
        match &g.init {
            GlobalInit::Scalars(ty, vals) => {
                let _ = write!(out, "global @{} = [{ty}", g.name);
                for (k, v) in vals.iter().enumerate() {
                    if k > 0 {
                        out.push(',');
                    }
                    if ty.is_float() {
                        let _ = write!(out, " {}", fmt_float(*v));
                    } else {
                        let _ = write!(out, " {}", *v as i64);
                    }
                }
                out.push_str("]\n");
            }
            GlobalInit::Functions(fs) => {
                let _ = write!(out, "global @{} = functions(", g.name);
                for (k, f) in fs.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    let _ = write!(out, "@{f}");
                }
                out.push_str(")\n");
            }
        }
    }
    for (target, (aug, grad)) in &m.custom_adjoints {
        let _ = writeln!(out, "custom_adjoint @{target} = (@{aug}, @{grad})");
    }
    for f in &m.functions {
        if !out.is_empty() {
            out.push('\n');
        }
        let ret = f
            .return_type
            .map(|t| t.to_string())
            .unwrap_or_else(|| "void".into());
        let kw = if f.is_declaration() { "declare" } else { "define" };
        let _ = write!(out, "{kw} {ret} @{}(", f.name);
        for (k, p) in f.params.iter().enumerate() {
            if k > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{} %{}", p.ty, p.name);
            if p.noalias {
                out.push_str(" noalias");
            }
            if p.readonly {
                out.push_str(" readonly");
            }
        }
        out.push(')');
        if f.is_declaration() {
            out.push('\n');
            continue;
        }
        if f.fast {
            out.push_str(" fast");
        }
        out.push_str(" {\n");
        for b in &f.blocks {
            let _ = writeln!(out, "{}:", b.name);
            for inst in &b.instrs {
                write_instruction(&mut out, f, inst);
            }
        }
        out.push_str("}\n");
    }
    out
}

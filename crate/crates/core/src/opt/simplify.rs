//! Constant folding, algebraic identities (gated by `fast`), branch
//! folding on constant conditions and phi-of-identical collapse.

use crate::analysis::Cfg;
use crate::ir::*;

pub fn simplify(f: &mut IrFunction, fast: bool) {
    loop {
        let mut changed = false;
        changed |= fold_instructions(f, fast);
        changed |= fold_branches(f);
        changed |= drop_unreachable(f);
        if !changed {
            break;
        }
    }
}

fn const_of(op: &Operand) -> Option<&Operand> {
    op.is_const().then_some(op)
}

fn as_f(op: &Operand) -> Option<f64> {
    match op {
        Operand::ConstFloat(v) => Some(*v),
        _ => None,
    }
}

fn as_i(op: &Operand) -> Option<i64> {
    match op {
        Operand::ConstInt(v) => Some(*v),
        _ => None,
    }
}

/// Replaces every use of `from` with `to` across the function.
fn replace_uses(f: &mut IrFunction, from: &str, to: &Operand) {
    for b in &mut f.blocks {
        for inst in &mut b.instrs {
            for op in &mut inst.operands {
                if op.as_value() == Some(from) {
                    *op = to.clone();
                }
            }
        }
    }
}

fn fold_instructions(f: &mut IrFunction, fast: bool) -> bool {
    let mut subst: Vec<(String, Operand)> = Vec::new();
    let mut removed: Vec<String> = Vec::new();
    for b in &f.blocks {
        for inst in &b.instrs {
            let Some(res) = &inst.result else { continue };
            let replacement: Option<Operand> = match inst.opcode {
                Opcode::FAdd | Opcode::FSub | Opcode::FMul | Opcode::FDiv => {
                    let (a, b_) = (&inst.operands[0], &inst.operands[1]);
                    if let (Some(x), Some(y)) = (as_f(a), as_f(b_)) {
                        // Literal folding is the same IEEE operation the
                        // interpreter would perform, hence bit-exact.
                        let v = match inst.opcode {
                            Opcode::FAdd => x + y,
                            Opcode::FSub => x - y,
                            Opcode::FMul => x * y,
                            _ => x / y,
                        };
                        let v = if inst.ty == Some(IrType::F32) {
                            let (x, y) = (x as f32, y as f32);
                            (match inst.opcode {
                                Opcode::FAdd => x + y,
                                Opcode::FSub => x - y,
                                Opcode::FMul => x * y,
                                _ => x / y,
                            }) as f64
                        } else {
                            v
                        };
                        Some(Operand::ConstFloat(v))
                    } else if fast {
                        match inst.opcode {
                            Opcode::FAdd => {
                                if as_f(a) == Some(0.0) {
                                    Some(b_.clone())
                                } else if as_f(b_) == Some(0.0) {
                                    Some(a.clone())
                                } else {
                                    None
                                }
                            }
                            Opcode::FSub => {
                                (as_f(b_) == Some(0.0)).then(|| a.clone())
                            }
                            Opcode::FMul => {
                                if as_f(a) == Some(1.0) {
                                    Some(b_.clone())
                                } else if as_f(b_) == Some(1.0) {
                                    Some(a.clone())
                                } else if as_f(a) == Some(0.0) || as_f(b_) == Some(0.0)
                                {
                                    Some(Operand::ConstFloat(0.0))
                                } else {
                                    None
                                }
                            }
                            Opcode::FDiv => {
                                (as_f(b_) == Some(1.0)).then(|| a.clone())
                            }
                            _ => None,
                        }
                    } else {
                        None
                    }
                }
                Opcode::FNeg => as_f(&inst.operands[0]).map(|x| {
                    Operand::ConstFloat(if inst.ty == Some(IrType::F32) {
                        (-(x as f32)) as f64
                    } else {
                        -x
                    })
                }),
                Opcode::IAdd | Opcode::ISub | Opcode::IMul => {
                    let (a, b_) = (&inst.operands[0], &inst.operands[1]);
                    if let (Some(x), Some(y)) = (as_i(a), as_i(b_)) {
                        let v = match inst.opcode {
                            Opcode::IAdd => x.wrapping_add(y),
                            Opcode::ISub => x.wrapping_sub(y),
                            _ => x.wrapping_mul(y),
                        };
                        Some(Operand::ConstInt(v))
                    } else {
                        match inst.opcode {
                            Opcode::IAdd => {
                                if as_i(a) == Some(0) {
                                    Some(b_.clone())
                                } else if as_i(b_) == Some(0) {
                                    Some(a.clone())
                                } else {
                                    None
                                }
                            }
                            Opcode::ISub => (as_i(b_) == Some(0)).then(|| a.clone()),
                            Opcode::IMul => {
                                if as_i(a) == Some(1) {
                                    Some(b_.clone())
                                } else if as_i(b_) == Some(1) {
                                    Some(a.clone())
                                } else {
                                    None
                                }
                            }
                            _ => None,
                        }
                    }
                }
                Opcode::ICmp(p) => {
                    match (as_i(&inst.operands[0]), as_i(&inst.operands[1])) {
                        (Some(x), Some(y)) => Some(Operand::ConstInt(p.eval(x, y) as i64)),
                        _ => None,
                    }
                }
                Opcode::FCmp(p) => {
                    match (as_f(&inst.operands[0]), as_f(&inst.operands[1])) {
                        (Some(x), Some(y)) => Some(Operand::ConstInt(p.eval(x, y) as i64)),
                        _ => None,
                    }
                }
                Opcode::Select => match as_i(&inst.operands[0]) {
                    Some(c) => Some(if c != 0 {
                        inst.operands[1].clone()
                    } else {
                        inst.operands[2].clone()
                    }),
                    None if inst.operands[1] == inst.operands[2] => {
                        Some(inst.operands[1].clone())
                    }
                    None => None,
                },
                Opcode::Phi => {
                    // Collapse when every incoming is the same operand or
                    // the phi itself.
                    let mut uniq: Option<&Operand> = None;
                    let mut ok = true;
                    for op in &inst.operands {
                        if op.as_value() == Some(res) {
                            continue;
                        }
                        match uniq {
                            None => uniq = Some(op),
                            Some(u) if u == op => {}
                            _ => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if ok {
                        uniq.cloned()
                    } else {
                        None
                    }
                }
                Opcode::SiToFp => as_i(&inst.operands[0]).map(|x| {
                    Operand::ConstFloat(if inst.ty == Some(IrType::F32) {
                        (x as f32) as f64
                    } else {
                        x as f64
                    })
                }),
                Opcode::Intrinsic(i) => {
                    if i == Intrinsic::Read || !fast {
                        None
                    } else {
                        let args: Option<Vec<f64>> =
                            inst.operands.iter().map(as_f).collect();
                        args.map(|a| {
                            let v = match i {
                                Intrinsic::Pow => a[0].powf(a[1]),
                                Intrinsic::Sin => a[0].sin(),
                                Intrinsic::Cos => a[0].cos(),
                                Intrinsic::Exp => a[0].exp(),
                                Intrinsic::Log => a[0].ln(),
                                Intrinsic::Sqrt => a[0].sqrt(),
                                Intrinsic::Fabs => a[0].abs(),
                                Intrinsic::Read => unreachable!(),
                            };
                            Operand::ConstFloat(v)
                        })
                    }
                }
                _ => None,
            };
            if let Some(rep) = replacement {
                if rep.as_value() != Some(res) {
                    subst.push((res.clone(), rep));
                    removed.push(res.clone());
                }
            }
            let _ = const_of;
        }
    }
    if subst.is_empty() {
        return false;
    }
    for (from, to) in &subst {
        replace_uses(f, from, to);
    }
    for b in &mut f.blocks {
        b.instrs
            .retain(|i| i.result.as_deref().map(|r| !removed.contains(&r.to_string())).unwrap_or(true));
    }
    true
}

/// `condbr` on a constant becomes `br`; phis in the no-longer-reached
/// target lose that incoming.
fn fold_branches(f: &mut IrFunction) -> bool {
    let mut changed = false;
    let mut edge_removals: Vec<(String, String)> = Vec::new(); // (from, to)
    for b in &mut f.blocks {
        let name = b.name.clone();
        let Some(term) = b.instrs.last_mut() else { continue };
        if term.opcode != Opcode::CondBr {
            continue;
        }
        let Some(c) = as_i(&term.operands[0]) else { continue };
        let (taken, dropped) = if c != 0 {
            (term.targets[0].clone(), term.targets[1].clone())
        } else {
            (term.targets[1].clone(), term.targets[0].clone())
        };
        *term = Instruction {
            targets: vec![taken.clone()],
            ..Instruction::new(Opcode::Br)
        };
        if dropped != taken {
            edge_removals.push((name, dropped));
        }
        changed = true;
    }
    for (from, to) in edge_removals {
        if let Some(tb) = f.block_mut(&to) {
            for inst in &mut tb.instrs {
                if inst.opcode != Opcode::Phi {
                    continue;
                }
                if let Some(k) = inst.targets.iter().position(|t| *t == from) {
                    inst.targets.remove(k);
                    inst.operands.remove(k);
                }
            }
        }
    }
    changed
}

/// Removes blocks unreachable from the entry and prunes their phi edges.
pub(crate) fn drop_unreachable(f: &mut IrFunction) -> bool {
    let cfg = Cfg::build(f);
    let dead = cfg.unreachable_blocks();
    if dead.is_empty() {
        return false;
    }
    let dead_names: Vec<String> = dead.iter().map(|&i| f.blocks[i].name.clone()).collect();
    let keep: Vec<BasicBlock> = f
        .blocks
        .iter()
        .enumerate()
        .filter(|(i, _)| !dead.contains(i))
        .map(|(_, b)| b.clone())
        .collect();
    f.blocks = keep;
    for b in &mut f.blocks {
        for inst in &mut b.instrs {
            if inst.opcode != Opcode::Phi {
                continue;
            }
            let mut k = 0;
            while k < inst.targets.len() {
                if dead_names.contains(&inst.targets[k]) {
                    inst.targets.remove(k);
                    inst.operands.remove(k);
                } else {
                    k += 1;
                }
            }
        }
    }
    true
}

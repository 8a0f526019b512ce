//! Differential-use analysis: which forward values appear as operands of
//! the adjoints that synthesis will emit. Only these are candidates for
//! caching or recomputation; everything else need not survive the
//! forward pass.

use crate::activity::{instr_id, ActivityInfo};
use crate::analysis::AliasAnalysis;
use crate::ir::{Instruction, Intrinsic, IrFunction, Opcode, Operand};
use std::collections::BTreeSet;

/// What the reverse pass does for a given store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreAction {
    /// Not an active location; no adjoint.
    None,
    /// The stored value is constant but the location is active: the
    /// store still cuts derivative flow, so the shadow is zeroed.
    ZeroOnly,
    /// Active value into active memory: consume the shadow into the
    /// stored value's adjoint and zero it.
    Full,
}

pub fn store_action(
    inst: &Instruction,
    id: &str,
    act: &ActivityInfo,
    aa: &AliasAnalysis,
) -> StoreAction {
    debug_assert_eq!(inst.opcode, Opcode::Store);
    if !inst.ty.map(|t| t.is_float()).unwrap_or(false) {
        return StoreAction::None;
    }
    if act.is_active_instr(id) {
        return StoreAction::Full;
    }
    let info = aa.info_of(&inst.operands[1]);
    let demanded = (info.unknown && !act.demanded_sites.is_empty())
        || info.roots.iter().any(|r| act.demanded_sites.contains(r));
    if demanded {
        StoreAction::ZeroOnly
    } else {
        StoreAction::None
    }
}

fn add(set: &mut BTreeSet<String>, op: &Operand) {
    if let Operand::Value(v) = op {
        set.insert(v.clone());
    }
}

fn is_active_operand(act: &ActivityInfo, op: &Operand) -> bool {
    op.as_value().map(|v| act.is_active_value(v)).unwrap_or(false)
}

/// Forward operands one instruction's adjoint reads, given activity.
pub fn adjoint_operand_needs(
    inst: &Instruction,
    id: &str,
    act: &ActivityInfo,
    aa: &AliasAnalysis,
) -> BTreeSet<String> {
    let mut need = BTreeSet::new();
    if !act.is_active_instr(id) {
        if inst.opcode == Opcode::Store
            && store_action(inst, id, act, aa) == StoreAction::ZeroOnly
        {
            add(&mut need, &inst.operands[1]);
        }
        return need;
    }
    let ops = &inst.operands;
    match inst.opcode {
        Opcode::FAdd | Opcode::FSub | Opcode::FNeg => {}
        Opcode::FMul => {
            // d_x += y*dz needs y; d_y += x*dz needs x.
            if is_active_operand(act, &ops[0]) {
                add(&mut need, &ops[1]);
            }
            if is_active_operand(act, &ops[1]) {
                add(&mut need, &ops[0]);
            }
        }
        Opcode::FDiv => {
            // d_x += dz/y; d_y += -z*dz/y.
            add(&mut need, &ops[1]);
            if is_active_operand(act, &ops[1]) {
                if let Some(res) = &inst.result {
                    need.insert(res.clone());
                }
            }
        }
        Opcode::Select => {
            add(&mut need, &ops[0]);
        }
        Opcode::Intrinsic(i) => match i {
            Intrinsic::Pow => {
                // d_x += c*pow(x,c-1)*dz; an active exponent adds
                // z*log(x)*dz.
                add(&mut need, &ops[0]);
                add(&mut need, &ops[1]);
                if is_active_operand(act, &ops[1]) {
                    if let Some(res) = &inst.result {
                        need.insert(res.clone());
                    }
                }
            }
            Intrinsic::Sin | Intrinsic::Cos | Intrinsic::Log | Intrinsic::Fabs => {
                add(&mut need, &ops[0]);
            }
            Intrinsic::Exp | Intrinsic::Sqrt => {
                if let Some(res) = &inst.result {
                    need.insert(res.clone());
                }
            }
            Intrinsic::Read => {}
        },
        Opcode::Load => {
            add(&mut need, &ops[0]);
        }
        Opcode::Store => {
            add(&mut need, &ops[1]);
        }
        Opcode::Memcpy => {
            add(&mut need, &ops[0]);
            add(&mut need, &ops[1]);
            add(&mut need, &ops[2]);
        }
        // The reverse call re-passes the primal arguments; the indirect
        // case also needs the callee pointer for its shadow pair.
        Opcode::Call | Opcode::CallInd => {
            for op in ops {
                add(&mut need, op);
            }
        }
        // Phi routing and branches are handled by the control plan; the
        // return adjoint is just the seed store.
        Opcode::Phi | Opcode::Ret | Opcode::Br | Opcode::CondBr => {}
        _ => {}
    }
    need
}

/// The set of forward values needed by some emitted adjoint. The
/// transitive closure under recomputation dependencies happens in tape
/// planning, where recompute-vs-cache is decided.
pub fn differential_use(f: &IrFunction, act: &ActivityInfo) -> BTreeSet<String> {
    let aa = AliasAnalysis::for_function(f, None);
    let mut need = BTreeSet::new();
    for b in &f.blocks {
        for (idx, inst) in b.instrs.iter().enumerate() {
            let id = instr_id(&b.name, idx, inst);
            need.extend(adjoint_operand_needs(inst, &id, act, &aa));
            // Deallocations are deferred to the reverse of the owning
            // allocation, which therefore needs the pointer.
            if inst.opcode == Opcode::Free {
                for root in aa.info_of(&inst.operands[0]).roots {
                    if let crate::analysis::alias::Root::Alloc(a) = root {
                        need.insert(a);
                    }
                }
                add(&mut need, &inst.operands[0]);
            }
        }
    }
    need
}

//! Dead code elimination: removes pure instructions with no uses and
//! unreachable blocks. Calls to proven-readonly functions with unused
//! results count as pure.

use crate::ir::*;
use std::collections::BTreeSet;

pub fn dce(f: &mut IrFunction, readonly_fns: &BTreeSet<String>) {
    loop {
        let mut changed = super::simplify::drop_unreachable(f);

        let mut used: BTreeSet<String> = BTreeSet::new();
        for b in &f.blocks {
            for inst in &b.instrs {
                for v in inst.value_uses() {
                    used.insert(v.to_string());
                }
            }
        }
        let removable = |inst: &Instruction| -> bool {
            let unused = inst
                .result
                .as_deref()
                .map(|r| !used.contains(r))
                .unwrap_or(true);

            if !unused {
                return false;
            }
            match inst.opcode {
                op if op.is_pure() => true,
                Opcode::Load | Opcode::Phi => true,
                Opcode::Alloc => {
                    // Removable only when nothing uses the pointer; the
                    // `unused` check above covers that.
                    true
                }
                Opcode::Call => inst
                    .callee
                    .as_deref()
                    .map(|c| readonly_fns.contains(c))
                    .unwrap_or(false),
                _ => false,
            }
        };
        let mut removed_any = false;
        for b in &mut f.blocks {
            let before = b.instrs.len();
            b.instrs.retain(|inst| !removable(inst));
            removed_any |= b.instrs.len() != before;
        }
        changed |= removed_any;
        if !changed {
            break;
        }
    }
}

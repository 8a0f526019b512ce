//! Common subexpression elimination for pure instructions, scoped by the
//! dominator tree. Loads are not touched: their value depends on memory.

use crate::analysis::{Cfg, DomTree};
use crate::ir::*;
use std::collections::BTreeMap;

fn key_of(inst: &Instruction) -> Option<String> {
    if !inst.opcode.is_pure() || inst.result.is_none() {
        return None;
    }
    let mut k = format!("{:?}|{:?}", inst.opcode, inst.ty);
    for op in &inst.operands {
        k.push('|');
        k.push_str(&format!("{op:?}"));
    }
    Some(k)
}

pub fn cse(f: &mut IrFunction) {
    loop {
        let cfg = Cfg::build(f);
        let dom = DomTree::build(&cfg);
        // First available definition per expression key, in RPO.
        let mut first: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut replace: Vec<(String, String)> = Vec::new();
        for bi in cfg.reverse_post_order() {
            for inst in &f.blocks[bi].instrs {
                let Some(key) = key_of(inst) else { continue };
                let res = inst.result.clone().unwrap();
                match first.get(&key) {
                    Some((db, dval)) if dom.dominates(*db, bi) && *dval != res => {
                        replace.push((res, dval.clone()));
                    }
                    Some(_) => {}
                    None => {
                        first.insert(key, (bi, res));
                    }
                }
            }
        }
        if replace.is_empty() {
            return;
        }
        for (from, to) in &replace {
            for b in &mut f.blocks {
                b.instrs.retain(|i| i.result.as_deref() != Some(from));
                for inst in &mut b.instrs {
                    for op in &mut inst.operands {
                        if op.as_value() == Some(from) {
                            *op = Operand::Value(to.clone());
                        }
                    }
                }
            }
        }
    }
}

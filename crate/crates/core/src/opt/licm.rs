//! Loop-invariant code motion over natural loops.
//!
//! Hoists to the preheader any instruction whose operands are
//! loop-invariant and which is either pure arithmetic or a load /
//! readonly call none of whose read locations may alias an address
//! stored to inside the loop.

use crate::analysis::{function_is_readonly, AliasAnalysis, AliasVerdict, Cfg, DomTree, LoopForest};
use crate::ir::*;
use crate::typetree::TypeEnv;
use std::collections::BTreeSet;

pub fn licm(f: &mut IrFunction, m: &IrModule, env: Option<&TypeEnv>) {
    loop {
        let cfg = Cfg::build(f);
        let dom = DomTree::build(&cfg);
        let loops = LoopForest::build(&cfg, &dom);
        if loops.loops.is_empty() {
            return;
        }
        // Innermost-first so invariants bubble outward across rounds.
        let mut order: Vec<usize> = (0..loops.loops.len()).collect();
        order.sort_by_key(|&i| loops.loops[i].blocks.len());
        let mut changed = false;
        for li in order {
            changed |= hoist_loop(f, m, env, li);
            if changed {
                break; // structures went stale; rebuild
            }
        }
        if !changed {
            return;
        }
    }
}

/// Ensures the loop has a preheader: a block whose only successor is the
/// header and which receives every entering edge. Returns its index and
/// whether a block was inserted, or None when the loop entry is not in
/// canonical form.
fn ensure_preheader(
    f: &mut IrFunction,
    header_idx: usize,
    latches: &BTreeSet<usize>,
) -> Option<(usize, bool)> {
    let cfg = Cfg::build(f);
    let entering: Vec<usize> = cfg.preds[header_idx]
        .iter()
        .copied()
        .filter(|p| !latches.contains(p))
        .collect();
    if entering.len() != 1 {
        return None;
    }
    let pred = entering[0];
    // An existing dedicated preheader: unconditional branch, single succ.
    let pred_term = f.blocks[pred].instrs.last().unwrap();
    if pred_term.opcode == Opcode::Br {
        return Some((pred, false));
    }
    // Create one on the entering edge.
    let header_name = f.blocks[header_idx].name.clone();
    let pred_name = f.blocks[pred].name.clone();
    let ph_name = fresh_block_name(f, &format!("{header_name}.preheader"));
    let mut ph = BasicBlock::new(ph_name.clone());
    let mut br = Instruction::new(Opcode::Br);
    br.targets.push(header_name.clone());
    ph.instrs.push(br);
    // Redirect the entering edge.
    let term = f.blocks[pred].instrs.last_mut().unwrap();
    for t in &mut term.targets {
        if *t == header_name {
            *t = ph_name.clone();
        }
    }
    // Header phis: the incoming from `pred` now comes from the preheader.
    for inst in &mut f.blocks[header_idx].instrs {
        if inst.opcode == Opcode::Phi {
            for t in &mut inst.targets {
                if *t == pred_name {
                    *t = ph_name.clone();
                }
            }
        }
    }
    f.blocks.insert(header_idx, ph);
    Some((header_idx, true))
}

fn fresh_block_name(f: &IrFunction, base: &str) -> String {
    if f.block(base).is_none() {
        return base.to_string();
    }
    let mut k = 1;
    loop {
        let name = format!("{base}.{k}");
        if f.block(&name).is_none() {
            return name;
        }
        k += 1;
    }
}

fn hoist_loop(
    f: &mut IrFunction,
    m: &IrModule,
    env: Option<&TypeEnv>,
    loop_idx: usize,
) -> bool {
    let cfg = Cfg::build(f);
    let dom = DomTree::build(&cfg);
    let loops = LoopForest::build(&cfg, &dom);
    let Some(lp) = loops.loops.get(loop_idx) else { return false };
    let header = lp.header;
    let latches: BTreeSet<usize> = lp.latches.iter().copied().collect();
    let body: BTreeSet<usize> = lp.blocks.clone();

    // Values defined inside the loop.
    let mut defined_in: BTreeSet<String> = BTreeSet::new();
    for &bi in &body {
        for inst in &f.blocks[bi].instrs {
            if let Some(r) = &inst.result {
                defined_in.insert(r.clone());
            }
        }
    }
    let invariant_operand = |op: &Operand, hoisted: &BTreeSet<String>| -> bool {
        match op {
            Operand::Value(v) => !defined_in.contains(v) || hoisted.contains(v),
            _ => true,
        }
    };

    // Memory written inside the loop, for the clobber check.
    let aa = AliasAnalysis::for_function(f, env);
    struct Write {
        addr: Operand,
        size: Option<u64>,
    }
    let mut writes: Vec<Write> = Vec::new();
    let mut has_opaque_effect = false;
    for &bi in &body {
        for inst in &f.blocks[bi].instrs {
            match inst.opcode {
                Opcode::Store => writes.push(Write {
                    addr: inst.operands[1].clone(),
                    size: inst.ty.map(|t| t.byte_width()),
                }),
                Opcode::Memcpy => writes.push(Write {
                    addr: inst.operands[0].clone(),
                    size: match &inst.operands[2] {
                        Operand::ConstInt(n) => Some(*n as u64),
                        _ => None,
                    },
                }),
                Opcode::Free => has_opaque_effect = true,
                Opcode::Call => {
                    let callee = inst.callee.as_deref().unwrap_or_default();
                    if !function_is_readonly(m, callee, &mut Vec::new()) {
                        has_opaque_effect = true;
                    }
                }
                Opcode::CallInd => has_opaque_effect = true,
                _ => {}
            }
        }
    }
    let reads_clobbered = |addr: &Operand, size: Option<u64>| -> bool {
        if has_opaque_effect {
            return true;
        }
        writes
            .iter()
            .any(|w| aa.alias(addr, size, &w.addr, w.size) == AliasVerdict::MayAlias)
    };

    // Collect hoistable instructions in program order.
    let mut hoisted_names: BTreeSet<String> = BTreeSet::new();
    let mut to_hoist: Vec<(usize, usize)> = Vec::new();
    loop {
        let mut found = false;
        let mut body_blocks: Vec<usize> = body.iter().copied().collect();
        body_blocks.sort_unstable();
        for &bi in &body_blocks {
            for (ii, inst) in f.blocks[bi].instrs.iter().enumerate() {
                if to_hoist.contains(&(bi, ii)) {
                    continue;
                }
                let Some(res) = &inst.result else { continue };
                if hoisted_names.contains(res) {
                    continue;
                }
                if inst.opcode == Opcode::Phi || inst.is_terminator() {
                    continue;
                }
                let operands_ok = inst
                    .operands
                    .iter()
                    .all(|op| invariant_operand(op, &hoisted_names));
                if !operands_ok {
                    continue;
                }
                let ok = match inst.opcode {
                    op if op.is_pure() => true,
                    Opcode::Load => {
                        !reads_clobbered(&inst.operands[0], inst.ty.map(|t| t.byte_width()))
                    }
                    Opcode::Call => {
                        let callee = inst.callee.as_deref().unwrap_or_default();
                        function_is_readonly(m, callee, &mut Vec::new())
                            && !inst
                                .operands
                                .iter()
                                .any(|op| is_ptr_operand(f, op) && reads_clobbered(op, None))
                    }
                    _ => false,
                };
                if ok {
                    to_hoist.push((bi, ii));
                    hoisted_names.insert(res.clone());
                    found = true;
                }
            }
        }
        if !found {
            break;
        }
    }
    if to_hoist.is_empty() {
        return false;
    }

    let Some((ph_idx, inserted)) = ensure_preheader(f, header, &latches) else {
        return false;
    };

    to_hoist.sort_unstable();
    let mut moved: Vec<Instruction> = Vec::new();
    // Removing back-to-front keeps earlier indices stable.
    for &(bi, ii) in to_hoist.iter().rev() {
        // Block indices shifted if a preheader block was inserted.
        let bi = if inserted && bi >= ph_idx { bi + 1 } else { bi };
        moved.push(f.blocks[bi].instrs.remove(ii));
    }
    moved.reverse();
    // Order hoisted instructions by their use-def dependencies.
    let moved = topo_order(moved);
    let ph = &mut f.blocks[ph_idx];
    let term = ph.instrs.pop().unwrap();
    ph.instrs.extend(moved);
    ph.instrs.push(term);
    true
}

/// Stable topological order of a straight-line instruction group so that
/// definitions precede uses.
fn topo_order(mut pending: Vec<Instruction>) -> Vec<Instruction> {
    let mut out: Vec<Instruction> = Vec::with_capacity(pending.len());
    let mut placed: BTreeSet<String> = BTreeSet::new();
    let names: BTreeSet<String> = pending
        .iter()
        .filter_map(|i| i.result.clone())
        .collect();
    while !pending.is_empty() {
        let mut progressed = false;
        let mut k = 0;
        while k < pending.len() {
            let ready = pending[k].value_uses().all(|u| {
                !names.contains(u) || placed.contains(u)
            });
            if ready {
                let inst = pending.remove(k);
                if let Some(r) = &inst.result {
                    placed.insert(r.clone());
                }
                out.push(inst);
                progressed = true;
            } else {
                k += 1;
            }
        }
        if !progressed {
            // A cycle cannot occur among pure hoisted instructions, but
            // bail out defensively rather than loop forever.
            out.extend(pending);
            break;
        }
    }
    out
}

fn is_ptr_operand(f: &IrFunction, op: &Operand) -> bool {
    match op {
        Operand::Value(v) => {
            f.params
                .iter()
                .find(|p| &p.name == v)
                .map(|p| p.ty == IrType::Ptr)
                .unwrap_or_else(|| {
                    f.def_of(v).map(|i| i.ty == Some(IrType::Ptr)).unwrap_or(false)
                })
        }
        Operand::Global(_) | Operand::Null => true,
        _ => false,
    }
}

//! Function inlining for small direct callees. Recursive functions and
//! indirect calls are never inlined.

use crate::ir::*;
use std::collections::{BTreeMap, BTreeSet};

/// May `name` reach itself through direct calls?
fn is_recursive(m: &IrModule, name: &str) -> bool {
    let mut seen = BTreeSet::new();
    let mut stack = vec![name.to_string()];
    while let Some(cur) = stack.pop() {
        let Some(f) = m.function(&cur) else { continue };
        for inst in f.instrs() {
            if let Some(callee) = &inst.callee {
                if callee == name {
                    return true;
                }
                if seen.insert(callee.clone()) {
                    stack.push(callee.clone());
                }
            }
        }
    }
    false
}

pub fn inline_calls(m: &IrModule, threshold: usize) -> IrModule {
    let mut out = m.clone();
    let inlinable: BTreeSet<String> = m
        .functions
        .iter()
        .filter(|f| {
            !f.is_declaration()
                && f.instr_count() <= threshold
                && !is_recursive(m, &f.name)
        })
        .map(|f| f.name.clone())
        .collect();
    for fi in 0..out.functions.len() {
        // A round per function; repeated sites inline one at a time.
        loop {
            let Some(site) = find_site(&out.functions[fi], &inlinable, &out) else {
                break;
            };
            let callee = out
                .function(out.functions[fi].blocks[site.0].instrs[site.1].callee.as_deref().unwrap())
                .unwrap()
                .clone();
            inline_one(&mut out.functions[fi], site, &callee);
        }
    }
    out
}

fn find_site(
    f: &IrFunction,
    inlinable: &BTreeSet<String>,
    m: &IrModule,
) -> Option<(usize, usize)> {
    for (bi, b) in f.blocks.iter().enumerate() {
        for (ii, inst) in b.instrs.iter().enumerate() {
            if inst.opcode != Opcode::Call {
                continue;
            }
            let callee = inst.callee.as_deref().unwrap_or_default();
            if callee == f.name {
                continue;
            }
            if inlinable.contains(callee) && m.function(callee).is_some() {
                return Some((bi, ii));
            }
        }
    }
    None
}

fn fresh_prefix(f: &IrFunction) -> String {
    // Pick a prefix no existing name starts with.
    let mut k = 0usize;
    loop {
        let p = format!("inl{k}.");
        let clash = f.params.iter().any(|pa| pa.name.starts_with(&p))
            || f.blocks.iter().any(|b| {
                b.name.starts_with(&p)
                    || b.instrs.iter().any(|i| {
                        i.result.as_deref().map(|r| r.starts_with(&p)).unwrap_or(false)
                    })
            });
        if !clash {
            return p;
        }
        k += 1;
    }
}

fn inline_one(f: &mut IrFunction, (bi, ii): (usize, usize), callee: &IrFunction) {
    let call = f.blocks[bi].instrs[ii].clone();
    let prefix = fresh_prefix(f);
    let cont_name = format!("{}cont", prefix);

    // Split the call block.
    let tail_instrs: Vec<Instruction> = f.blocks[bi].instrs.split_off(ii + 1);
    f.blocks[bi].instrs.pop(); // the call itself
    let head_name = f.blocks[bi].name.clone();

    // Successor phis that referenced the original block now come from the
    // continuation.
    let succ_targets: Vec<String> = tail_instrs
        .last()
        .map(|t| t.targets.clone())
        .unwrap_or_default();
    for succ in succ_targets {
        if let Some(sb) = f.block_mut(&succ) {
            for inst in &mut sb.instrs {
                if inst.opcode == Opcode::Phi {
                    for t in &mut inst.targets {
                        if *t == head_name {
                            *t = cont_name.clone();
                        }
                    }
                }
            }
        }
    }

    // Clone the callee body with renamed values and blocks; parameters
    // substitute to the call arguments.
    let arg_of: BTreeMap<&str, Operand> = callee
        .params
        .iter()
        .zip(&call.operands)
        .map(|(p, a)| (p.name.as_str(), a.clone()))
        .collect();
    let rename_val = |v: &str| format!("{prefix}{v}");
    let rename_block = |b: &str| format!("{prefix}{b}");
    let map_operand = |op: &Operand| -> Operand {
        match op {
            Operand::Value(v) => match arg_of.get(v.as_str()) {
                Some(a) => a.clone(),
                None => Operand::Value(rename_val(v)),
            },
            other => other.clone(),
        }
    };

    let mut cloned: Vec<BasicBlock> = Vec::with_capacity(callee.blocks.len());
    let mut returns: Vec<(String, Option<Operand>)> = Vec::new(); // (block, value)
    for cb in &callee.blocks {
        let mut nb = BasicBlock::new(rename_block(&cb.name));
        for inst in &cb.instrs {
            if inst.opcode == Opcode::Ret {
                let v = inst.operands.first().map(map_operand);
                returns.push((nb.name.clone(), v));
                let mut br = Instruction::new(Opcode::Br);
                br.targets.push(cont_name.clone());
                nb.instrs.push(br);
                continue;
            }
            let mut ni = inst.clone();
            ni.result = ni.result.as_deref().map(rename_val);
            ni.operands = ni.operands.iter().map(map_operand).collect();
            ni.targets = ni.targets.iter().map(|t| rename_block(t)).collect();
            nb.instrs.push(ni);
        }
        cloned.push(nb);
    }

    // Continuation: merge returned values into the call result.
    let mut cont = BasicBlock::new(cont_name.clone());
    if let Some(res) = &call.result {
        match returns.as_slice() {
            [(_, Some(single))] => {
                // One return: substitute directly, no phi needed.
                let rep = single.clone();
                let mut tail = tail_instrs;
                for inst in &mut tail {
                    for op in &mut inst.operands {
                        if op.as_value() == Some(res.as_str()) {
                            *op = rep.clone();
                        }
                    }
                }
                cont.instrs = tail;
                // Also patch the rest of the function.
                let entry_name = rename_block(&callee.blocks[0].name);
                finish(f, bi, entry_name, cloned, cont, Some((res.clone(), rep)));
                return;
            }
            _ => {
                let mut phi = Instruction::new(Opcode::Phi);
                phi.result = Some(res.clone());
                phi.ty = call.ty;
                for (block, v) in &returns {
                    phi.operands.push(v.clone().expect("value return"));
                    phi.targets.push(block.clone());
                }
                cont.instrs.push(phi);
            }
        }
    }
    cont.instrs.extend(tail_instrs);
    let entry_name = rename_block(&callee.blocks[0].name);
    finish(f, bi, entry_name, cloned, cont, None);
}

fn finish(
    f: &mut IrFunction,
    bi: usize,
    entry_name: String,
    cloned: Vec<BasicBlock>,
    cont: BasicBlock,
    subst_rest: Option<(String, Operand)>,
) {
    let mut br = Instruction::new(Opcode::Br);
    br.targets.push(entry_name);
    f.blocks[bi].instrs.push(br);
    let insert_at = bi + 1;
    let mut blocks = std::mem::take(&mut f.blocks);
    let tail: Vec<BasicBlock> = blocks.split_off(insert_at);
    blocks.extend(cloned);
    blocks.push(cont);
    blocks.extend(tail);
    f.blocks = blocks;
    if let Some((from, to)) = subst_rest {
        for b in &mut f.blocks {
            for inst in &mut b.instrs {
                for op in &mut inst.operands {
                    if op.as_value() == Some(from.as_str()) {
                        *op = to.clone();
                    }
                }
            }
        }
    }
}

//! Function-level control-flow utilities shared by the validator, the
//! optimizer and gradient synthesis: CFG edges, dominator tree, natural
//! loop detection, alias queries.

pub mod alias;
pub mod dom;
pub mod loops;

pub use alias::{AliasAnalysis, AliasVerdict};
pub use dom::DomTree;
pub use loops::{Loop, LoopForest};

use crate::ir::{IrFunction, Opcode};
use std::collections::BTreeMap;

/// Block indices of a function plus predecessor/successor edges.
#[derive(Debug, Clone)]
pub struct Cfg {
    pub index: BTreeMap<String, usize>,
    pub preds: Vec<Vec<usize>>,
    pub succs: Vec<Vec<usize>>,
}

impl Cfg {
    pub fn build(f: &IrFunction) -> Cfg {
        let index: BTreeMap<String, usize> = f
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.name.clone(), i))
            .collect();
        let n = f.blocks.len();
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for (i, b) in f.blocks.iter().enumerate() {
            if let Some(term) = b.terminator() {
                for t in &term.targets {
                    if let Some(&j) = index.get(t) {
                        succs[i].push(j);
                        preds[j].push(i);
                    }
                }
            }
        }
        Cfg { index, preds, succs }
    }

    pub fn block_count(&self) -> usize {
        self.preds.len()
    }

    /// Reverse post-order starting from the entry block.
    pub fn reverse_post_order(&self) -> Vec<usize> {
        let n = self.block_count();
        let mut visited = vec![false; n];
        let mut post = Vec::with_capacity(n);
        // Iterative DFS with an explicit stack of (node, next-successor).
        let mut stack: Vec<(usize, usize)> = vec![(0, 0)];
        visited[0] = true;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if *next < self.succs[node].len() {
                let s = self.succs[node][*next];
                *next += 1;
                if !visited[s] {
                    visited[s] = true;
                    stack.push((s, 0));
                }
            } else {
                post.push(node);
                stack.pop();
            }
        }
        post.reverse();
        post
    }

    /// Blocks unreachable from the entry.
    pub fn unreachable_blocks(&self) -> Vec<usize> {
        let order = self.reverse_post_order();
        let mut reach = vec![false; self.block_count()];
        for b in order {
            reach[b] = true;
        }
        (0..self.block_count()).filter(|&b| !reach[b]).collect()
    }
}

/// True when every instruction of the function is side-effect free and
/// it only calls functions that are themselves readonly. Used by LICM to
/// hoist calls and by tape planning to allow recomputing them.
pub fn function_is_readonly(
    m: &crate::ir::IrModule,
    name: &str,
    visiting: &mut Vec<String>,
) -> bool {
    let Some(f) = m.function(name) else {
        return false;
    };
    if f.is_declaration() {
        // A declaration is opaque; only its attribute can vouch for it.
        return f.params.iter().all(|p| p.ty != crate::ir::IrType::Ptr || p.readonly);
    }
    if visiting.iter().any(|v| v == name) {
        // Recursive cycle: assume readonly within the cycle; writes
        // elsewhere in the body would already have answered false.
        return true;
    }
    visiting.push(name.to_string());
    let ok = f.instrs().all(|inst| match inst.opcode {
        Opcode::Store | Opcode::Memcpy | Opcode::Free | Opcode::Alloc => false,
        Opcode::Intrinsic(crate::ir::Intrinsic::Read) => false,
        Opcode::Call => inst
            .callee
            .as_deref()
            .map(|c| function_is_readonly(m, c, visiting))
            .unwrap_or(false),
        Opcode::CallInd => false,
        _ => true,
    });
    visiting.pop();
    ok
}

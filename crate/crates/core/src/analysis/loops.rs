//! Natural loop detection from dominator-tree back edges. Irreducible
//! control flow produces no loops here and is skipped by the passes that
//! rely on loop structure.

use super::{Cfg, DomTree};
use std::collections::BTreeSet;

#[derive(Debug, Clone)]
pub struct Loop {
    pub header: usize,
    /// Sources of back edges into the header.
    pub latches: Vec<usize>,
    /// All blocks of the loop, header included.
    pub blocks: BTreeSet<usize>,
    /// Parent loop in the nesting forest, if any.
    pub parent: Option<usize>,
}

impl Loop {
    pub fn contains(&self, b: usize) -> bool {
        self.blocks.contains(&b)
    }

    /// The single latch, when the loop is in canonical form.
    pub fn single_latch(&self) -> Option<usize> {
        match self.latches.as_slice() {
            [l] => Some(*l),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoopForest {
    /// Loops ordered outermost-first per header, then by header index.
    pub loops: Vec<Loop>,
}

impl LoopForest {
    pub fn build(cfg: &Cfg, dom: &DomTree) -> LoopForest {
        let mut loops: Vec<Loop> = Vec::new();
        // One loop per header: merge multiple back edges to one header.
        for b in 0..cfg.block_count() {
            if !dom.is_reachable(b) {
                continue;
            }
            let mut latches: Vec<usize> = Vec::new();
            for &p in &cfg.preds[b] {
                if dom.is_reachable(p) && dom.dominates(b, p) {
                    latches.push(p);
                }
            }
            if latches.is_empty() {
                continue;
            }
            latches.sort_unstable();
            latches.dedup();
            let mut blocks: BTreeSet<usize> = BTreeSet::new();
            blocks.insert(b);
            let mut stack: Vec<usize> = Vec::new();
            for &l in &latches {
                if blocks.insert(l) {
                    stack.push(l);
                }
            }
            while let Some(x) = stack.pop() {
                for &p in &cfg.preds[x] {
                    if p != b && dom.is_reachable(p) && blocks.insert(p) {
                        stack.push(p);
                    }
                }
            }
            loops.push(Loop {
                header: b,
                latches,
                blocks,
                parent: None,
            });
        }
        // Sort by size descending so parents precede children, then link.
        loops.sort_by(|a, b| {
            b.blocks
                .len()
                .cmp(&a.blocks.len())
                .then(a.header.cmp(&b.header))
        });
        for i in 0..loops.len() {
            for j in (0..i).rev() {
                if loops[j].blocks.contains(&loops[i].header) && i != j {
                    loops[i].parent = Some(j);
                    break;
                }
            }
        }
        LoopForest { loops }
    }

    /// Innermost loop containing block `b`.
    pub fn innermost(&self, b: usize) -> Option<usize> {
        self.loops
            .iter()
            .enumerate()
            .filter(|(_, l)| l.contains(b))
            .min_by_key(|(_, l)| l.blocks.len())
            .map(|(i, _)| i)
    }

    /// Loop depth of block `b` (0 = not in any loop).
    pub fn depth(&self, b: usize) -> usize {
        self.loops.iter().filter(|l| l.contains(b)).count()
    }

    pub fn in_any_loop(&self, b: usize) -> bool {
        self.loops.iter().any(|l| l.contains(b))
    }

    /// Chain of loops containing `b`, outermost first.
    pub fn nest_of(&self, b: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .loops
            .iter()
            .enumerate()
            .filter(|(_, l)| l.contains(b))
            .map(|(i, _)| i)
            .collect();
        ids.sort_by_key(|&i| std::cmp::Reverse(self.loops[i].blocks.len()));
        ids
    }
}

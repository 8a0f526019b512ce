//! Dominator tree via the Cooper–Harvey–Kennedy iterative algorithm.

use super::Cfg;

#[derive(Debug, Clone)]
pub struct DomTree {
    /// Immediate dominator per block index; `idom[entry] == entry`.
    /// Unreachable blocks have `usize::MAX`.
    pub idom: Vec<usize>,
    rpo_number: Vec<usize>,
}

impl DomTree {
    pub fn build(cfg: &Cfg) -> DomTree {
        let n = cfg.block_count();
        let rpo = cfg.reverse_post_order();
        let mut rpo_number = vec![usize::MAX; n];
        for (k, &b) in rpo.iter().enumerate() {
            rpo_number[b] = k;
        }
        let mut idom = vec![usize::MAX; n];
        idom[0] = 0;
        let mut changed = true;
        while changed {
            changed = false;
            for &b in rpo.iter().skip(1) {
                let mut new_idom = usize::MAX;
                for &p in &cfg.preds[b] {
                    if idom[p] == usize::MAX {
                        continue;
                    }
                    new_idom = if new_idom == usize::MAX {
                        p
                    } else {
                        intersect(&idom, &rpo_number, p, new_idom)
                    };
                }
                if new_idom != usize::MAX && idom[b] != new_idom {
                    idom[b] = new_idom;
                    changed = true;
                }
            }
        }
        DomTree { idom, rpo_number }
    }

    pub fn is_reachable(&self, b: usize) -> bool {
        self.idom[b] != usize::MAX
    }

    /// Does `a` dominate `b`? (Reflexive.) False if either is unreachable.
    pub fn dominates(&self, a: usize, b: usize) -> bool {
        if !self.is_reachable(a) || !self.is_reachable(b) {
            return false;
        }
        let mut cur = b;
        loop {
            if cur == a {
                return true;
            }
            if cur == 0 {
                return a == 0;
            }
            cur = self.idom[cur];
        }
    }

    pub fn rpo_index(&self, b: usize) -> usize {
        self.rpo_number[b]
    }
}

fn intersect(idom: &[usize], rpo_number: &[usize], mut a: usize, mut b: usize) -> usize {
    while a != b {
        while rpo_number[a] > rpo_number[b] {
            a = idom[a];
        }
        while rpo_number[b] > rpo_number[a] {
            b = idom[b];
        }
    }
    a
}

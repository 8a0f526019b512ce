//! Conservative alias analysis over pointer values.
//!
//! Pointers are traced to their roots (parameters, allocation sites,
//! globals). Distinct allocations never alias; `noalias` parameters alias
//! nothing but themselves; same-root pointers with known offsets are
//! compared by byte range. When a type environment is supplied, addresses
//! whose inferred pointee kinds are disjoint are no-alias under strict
//! aliasing.

use crate::ir::{IrFunction, IrType, Opcode, Operand};
use crate::typetree::{BaseType, TypeEnv};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AliasVerdict {
    NoAlias,
    MayAlias,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Root {
    Param(String),
    Alloc(String),
    Global(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PtrInfo {
    pub roots: BTreeSet<Root>,
    /// Set when the value may point somewhere we cannot trace
    /// (loaded pointers, pointers returned from calls).
    pub unknown: bool,
    /// Constant byte offset from the root, when there is exactly one
    /// root and the offset chain is constant.
    pub offset: Option<i64>,
}

impl PtrInfo {
    fn join(&mut self, other: &PtrInfo) -> bool {
        let before = (self.roots.len(), self.unknown, self.offset);
        self.unknown |= other.unknown;
        for r in &other.roots {
            self.roots.insert(r.clone());
        }
        if self.offset != other.offset {
            self.offset = None;
        }
        before != (self.roots.len(), self.unknown, self.offset)
    }
}

#[derive(Debug)]
pub struct AliasAnalysis<'a> {
    fn_name: String,
    noalias_params: BTreeSet<String>,
    values: BTreeMap<String, PtrInfo>,
    env: Option<&'a TypeEnv>,
}

impl<'a> AliasAnalysis<'a> {
    pub fn for_function(f: &IrFunction, env: Option<&'a TypeEnv>) -> AliasAnalysis<'a> {
        let mut values: BTreeMap<String, PtrInfo> = BTreeMap::new();
        for p in &f.params {
            if p.ty == IrType::Ptr {
                values.insert(
                    p.name.clone(),
                    PtrInfo {
                        roots: BTreeSet::from([Root::Param(p.name.clone())]),
                        unknown: false,
                        offset: Some(0),
                    },
                );
            }
        }
        // Fixed point over phi cycles.
        let mut changed = true;
        while changed {
            changed = false;
            for b in &f.blocks {
                for inst in &b.instrs {
                    let Some(res) = inst.result.clone() else {
                        continue;
                    };
                    if inst.ty != Some(IrType::Ptr) {
                        continue;
                    }
                    let mut info = PtrInfo::default();
                    match inst.opcode {
                        Opcode::Alloc => {
                            info.roots.insert(Root::Alloc(res.clone()));
                            info.offset = Some(0);
                        }
                        Opcode::PtrAdd => {
                            info = operand_info(&values, &inst.operands[0]);
                            match (&inst.operands[1], info.offset) {
                                (Operand::ConstInt(k), Some(o)) => {
                                    info.offset = Some(o + *k);
                                }
                                _ => info.offset = None,
                            }
                        }
                        Opcode::Phi | Opcode::Select => {
                            let ops = if inst.opcode == Opcode::Select {
                                &inst.operands[1..]
                            } else {
                                &inst.operands[..]
                            };
                            for op in ops {
                                let oi = operand_info(&values, op);
                                info.join(&oi);
                            }
                        }
                        _ => {
                            info.unknown = true;
                        }
                    }
                    let entry = values.entry(res).or_default();
                    if entry.join(&info) {
                        changed = true;
                    }
                }
            }
        }
        AliasAnalysis {
            fn_name: f.name.clone(),
            noalias_params: f
                .params
                .iter()
                .filter(|p| p.noalias)
                .map(|p| p.name.clone())
                .collect(),
            values,
            env,
        }
    }

    pub fn info_of(&self, op: &Operand) -> PtrInfo {
        operand_info(&self.values, op)
    }

    /// May the byte ranges `[a, a+size_a)` and `[b, b+size_b)` overlap?
    /// A size of `None` means an unknown extent.
    pub fn alias(
        &self,
        a: &Operand,
        size_a: Option<u64>,
        b: &Operand,
        size_b: Option<u64>,
    ) -> AliasVerdict {
        let ia = self.info_of(a);
        let ib = self.info_of(b);
        if !ia.unknown && !ib.unknown && !ia.roots.is_empty() && !ib.roots.is_empty() {
            let all_pairs_disjoint = ia
                .roots
                .iter()
                .all(|ra| ib.roots.iter().all(|rb| self.roots_disjoint(ra, rb)));
            if all_pairs_disjoint {
                return AliasVerdict::NoAlias;
            }
            // Same single root: compare constant ranges.
            if ia.roots.len() == 1 && ib.roots == ia.roots {
                if let (Some(oa), Some(ob), Some(sa), Some(sb)) =
                    (ia.offset, ib.offset, size_a, size_b)
                {
                    let disjoint = oa + sa as i64 <= ob || ob + sb as i64 <= oa;
                    if disjoint {
                        return AliasVerdict::NoAlias;
                    }
                }
            }
        }
        // Strict aliasing: disjoint pointee kind sets cannot overlap.
        if let Some(env) = self.env {
            if let (Some(ka), Some(kb)) = (
                self.pointee_kinds(env, a),
                self.pointee_kinds(env, b),
            ) {
                if !ka.is_empty() && !kb.is_empty() && ka.is_disjoint(&kb) {
                    return AliasVerdict::NoAlias;
                }
            }
        }
        AliasVerdict::MayAlias
    }

    fn roots_disjoint(&self, a: &Root, b: &Root) -> bool {
        if a == b {
            return false;
        }
        match (a, b) {
            // A fresh allocation aliases nothing that existed before it.
            (Root::Alloc(_), _) | (_, Root::Alloc(_)) => true,
            (Root::Global(ga), Root::Global(gb)) => ga != gb,
            (Root::Param(pa), Root::Param(pb)) => {
                self.noalias_params.contains(pa) || self.noalias_params.contains(pb)
            }
            (Root::Param(p), Root::Global(_)) | (Root::Global(_), Root::Param(p)) => {
                self.noalias_params.contains(p)
            }
        }
    }

    /// The set of scalar kinds stored behind an address, per its type tree.
    fn pointee_kinds(&self, env: &TypeEnv, op: &Operand) -> Option<BTreeSet<BaseType>> {
        let name = op.as_value()?;
        let tree = env.value_tree(&self.fn_name, name)?;
        let mut kinds = BTreeSet::new();
        for (path, kind) in tree.entries() {
            if !path.is_empty() {
                kinds.insert(*kind);
            }
        }
        Some(kinds)
    }
}

fn operand_info(values: &BTreeMap<String, PtrInfo>, op: &Operand) -> PtrInfo {
    match op {
        Operand::Value(v) => values.get(v).cloned().unwrap_or(PtrInfo {
            roots: BTreeSet::new(),
            unknown: true,
            offset: None,
        }),
        Operand::Global(g) => PtrInfo {
            roots: BTreeSet::from([Root::Global(g.clone())]),
            unknown: false,
            offset: Some(0),
        },
        Operand::Null => PtrInfo::default(),
        _ => PtrInfo {
            roots: BTreeSet::new(),
            unknown: true,
            offset: None,
        },
    }
}

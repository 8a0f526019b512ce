//! Activity analysis: which values and instructions can propagate a
//! differential value from an active input to the return or to active
//! memory. Synthesis skips adjoints of everything else.
//!
//! The classification is the intersection of two taints: forward
//! reachability from active/duplicated parameters and backward demand
//! from the active return and from stores through active addresses.
//! Integer-typed values are never active, so a read-only call returning
//! an integer is always inactive regardless of its arguments.

use crate::analysis::alias::{AliasAnalysis, Root};
use crate::analysis::function_is_readonly;
use crate::ir::{
    ActivityToken, Instruction, IrFunction, IrModule, IrType, Opcode, Operand,
};
use crate::typetree::TypeEnv;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetActivity {
    Active,
    Const,
}

/// Requested activity of a function's parameters and return.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivitySpec {
    pub params: Vec<ActivityToken>,
    pub ret: RetActivity,
}

impl ActivitySpec {
    pub fn new(params: Vec<ActivityToken>, ret: RetActivity) -> ActivitySpec {
        ActivitySpec { params, ret }
    }

    /// Canonical spec for a function: pointers duplicated, float scalars
    /// active, integers constant, float returns active. Used for
    /// indirect-call shadow pairs, which must share one convention.
    pub fn canonical(f: &IrFunction) -> ActivitySpec {
        let params = f
            .params
            .iter()
            .map(|p| match p.ty {
                IrType::Ptr => ActivityToken::Dup,
                t if t.is_float() => ActivityToken::Active,
                _ => ActivityToken::Const,
            })
            .collect();
        let ret = match f.return_type {
            Some(t) if t.is_float() => RetActivity::Active,
            _ => RetActivity::Const,
        };
        ActivitySpec { params, ret }
    }

    /// Checks the token/parameter-type pairing rules.
    pub fn check(&self, f: &IrFunction) -> Result<(), String> {
        if self.params.len() != f.params.len() {
            return Err(format!(
                "@{}: activity lists {} tokens for {} parameters",
                f.name,
                self.params.len(),
                f.params.len()
            ));
        }
        for (tok, p) in self.params.iter().zip(&f.params) {
            match tok {
                ActivityToken::Dup | ActivityToken::DupNoNeed => {
                    if p.ty != IrType::Ptr {
                        return Err(format!(
                            "@{}: %{} is {} but `{}` applies only to ptr parameters",
                            f.name,
                            p.name,
                            p.ty,
                            tok.name()
                        ));
                    }
                }
                ActivityToken::Active => {
                    if !p.ty.is_float() {
                        return Err(format!(
                            "@{}: %{} is {} but `active` applies only to float scalars",
                            f.name, p.name, p.ty
                        ));
                    }
                }
                ActivityToken::Const => {}
            }
        }
        if self.ret == RetActivity::Active
            && !f.return_type.map(|t| t.is_float()).unwrap_or(false)
        {
            return Err(format!(
                "@{}: return marked active but the function does not return a float",
                f.name
            ));
        }
        Ok(())
    }
}

/// Result of the analysis for one (function, spec) pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivityInfo {
    pub active_values: BTreeSet<String>,
    pub active_instructions: BTreeSet<String>,
    /// Forward-tainted float values (may carry a differential).
    pub tainted_values: BTreeSet<String>,
    /// Memory roots holding forward-tainted data.
    pub tainted_sites: BTreeSet<Root>,
    /// Memory roots whose contents can reach an active output.
    pub demanded_sites: BTreeSet<Root>,
    /// Backward-demanded values.
    pub demanded_values: BTreeSet<String>,
}

impl ActivityInfo {
    pub fn is_active_value(&self, v: &str) -> bool {
        self.active_values.contains(v)
    }

    pub fn is_active_instr(&self, id: &str) -> bool {
        self.active_instructions.contains(id)
    }
}

/// Stable identifier for an instruction: its result name, or
/// `block#index` for void instructions.
pub fn instr_id(block: &str, idx: usize, inst: &Instruction) -> String {
    match &inst.result {
        Some(r) => r.clone(),
        None => format!("{block}#{idx}"),
    }
}

/// Forward-taint pattern of one call argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ArgTaint {
    Clean,
    /// Tainted float scalar.
    Val,
    /// Pointer into tainted memory.
    Site,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct FwdSummary {
    ret_tainted: bool,
    /// Per parameter: may the callee store tainted data through it?
    writes_tainted: Vec<bool>,
}

pub struct ActivityEngine<'a> {
    m: &'a IrModule,
    env: &'a TypeEnv,
    summaries: BTreeMap<(String, Vec<ArgTaint>), FwdSummary>,
}

impl<'a> ActivityEngine<'a> {
    pub fn new(m: &'a IrModule, env: &'a TypeEnv) -> ActivityEngine<'a> {
        ActivityEngine {
            m,
            env,
            summaries: BTreeMap::new(),
        }
    }

    fn fwd_summary(&mut self, callee: &str, pattern: Vec<ArgTaint>) -> FwdSummary {
        let key = (callee.to_string(), pattern.clone());
        if let Some(s) = self.summaries.get(&key) {
            return s.clone();
        }
        let Some(f) = self.m.function(callee) else {
            // Unknown body: assume the worst.
            return FwdSummary {
                ret_tainted: pattern.iter().any(|t| *t != ArgTaint::Clean),
                writes_tainted: pattern.iter().map(|t| *t == ArgTaint::Site).collect(),
            };
        };
        if f.is_declaration() {
            let any = pattern.iter().any(|t| *t != ArgTaint::Clean);
            return FwdSummary {
                ret_tainted: any && f.return_type.map(|t| t.is_float()).unwrap_or(false),
                writes_tainted: f
                    .params
                    .iter()
                    .map(|p| any && p.ty == IrType::Ptr && !p.readonly)
                    .collect(),
            };
        }
        // Seed with an empty summary so recursion sees a fixed point in
        // progress, then iterate until stable.
        self.summaries.insert(
            key.clone(),
            FwdSummary {
                ret_tainted: false,
                writes_tainted: vec![false; f.params.len()],
            },
        );
        loop {
            let (summary, _, _) = self.fwd_local(f, &pattern);
            if self.summaries.get(&key) == Some(&summary) {
                return summary;
            }
            self.summaries.insert(key.clone(), summary);
        }
    }

    /// Forward taint within one function under an argument pattern.
    /// Returns the summary plus the tainted value and site sets.
    fn fwd_local(
        &mut self,
        f: &IrFunction,
        pattern: &[ArgTaint],
    ) -> (FwdSummary, BTreeSet<String>, BTreeSet<Root>) {
        let aa = AliasAnalysis::for_function(f, Some(self.env));
        let mut vals: BTreeSet<String> = BTreeSet::new();
        let mut sites: BTreeSet<Root> = BTreeSet::new();
        let mut written: BTreeSet<Root> = BTreeSet::new();
        let mut taint_all_sites = false;
        for (p, t) in f.params.iter().zip(pattern) {
            match t {
                ArgTaint::Val => {
                    vals.insert(p.name.clone());
                }
                ArgTaint::Site => {
                    sites.insert(Root::Param(p.name.clone()));
                }
                ArgTaint::Clean => {}
            }
        }
        let ret_float = f.return_type.map(|t| t.is_float()).unwrap_or(false);
        let mut ret_tainted = false;
        loop {
            let mut changed = false;
            for b in &f.blocks {
                for inst in &b.instrs {
                    let tainted_operand = |vals: &BTreeSet<String>, op: &Operand| {
                        op.as_value().map(|v| vals.contains(v)).unwrap_or(false)
                    };
                    let addr_tainted = |sites: &BTreeSet<Root>,
                                        taint_all: bool,
                                        op: &Operand| {
                        let info = aa.info_of(op);
                        if info.unknown && (!sites.is_empty() || taint_all) {
                            return true;
                        }
                        taint_all && !info.roots.is_empty()
                            || info.roots.iter().any(|r| sites.contains(r))
                    };
                    match inst.opcode {
                        Opcode::FAdd
                        | Opcode::FSub
                        | Opcode::FMul
                        | Opcode::FDiv
                        | Opcode::FNeg
                        | Opcode::Select
                        | Opcode::Phi => {
                            if let Some(res) = &inst.result {
                                if inst.ty.map(|t| t.is_float()).unwrap_or(false)
                                    && inst
                                        .operands
                                        .iter()
                                        .any(|o| tainted_operand(&vals, o))
                                    && vals.insert(res.clone())
                                {
                                    changed = true;
                                }
                            }
                        }
                        Opcode::Intrinsic(i) => {
                            if i == crate::ir::Intrinsic::Read {
                                continue; // external constant producer
                            }
                            if let Some(res) = &inst.result {
                                if inst
                                    .operands
                                    .iter()
                                    .any(|o| tainted_operand(&vals, o))
                                    && vals.insert(res.clone())
                                {
                                    changed = true;
                                }
                            }
                        }
                        Opcode::Load => {
                            if let Some(res) = &inst.result {
                                if inst.ty.map(|t| t.is_float()).unwrap_or(false)
                                    && addr_tainted(
                                        &sites,
                                        taint_all_sites,
                                        &inst.operands[0],
                                    )
                                    && vals.insert(res.clone())
                                {
                                    changed = true;
                                }
                            }
                        }
                        Opcode::Store => {
                            let val_float =
                                inst.ty.map(|t| t.is_float()).unwrap_or(false);
                            if val_float && tainted_operand(&vals, &inst.operands[0]) {
                                let info = aa.info_of(&inst.operands[1]);
                                if info.unknown {
                                    if !taint_all_sites {
                                        taint_all_sites = true;
                                        changed = true;
                                    }
                                } else {
                                    for r in info.roots {
                                        if sites.insert(r.clone()) {
                                            changed = true;
                                        }
                                        if written.insert(r) {
                                            changed = true;
                                        }
                                    }
                                }
                            }
                        }
                        Opcode::Memcpy => {
                            if addr_tainted(&sites, taint_all_sites, &inst.operands[1]) {
                                let info = aa.info_of(&inst.operands[0]);
                                if info.unknown {
                                    if !taint_all_sites {
                                        taint_all_sites = true;
                                        changed = true;
                                    }
                                } else {
                                    for r in info.roots {
                                        if sites.insert(r.clone()) {
                                            changed = true;
                                        }
                                        if written.insert(r) {
                                            changed = true;
                                        }
                                    }
                                }
                            }
                        }
                        Opcode::Call => {
                            let callee = inst.callee.as_deref().unwrap_or_default();
                            if callee == crate::autodiff::AUTODIFF_INTRINSIC {
                                continue;
                            }
                            let pat: Vec<ArgTaint> = inst
                                .operands
                                .iter()
                                .map(|op| {
                                    if tainted_operand(&vals, op) {
                                        ArgTaint::Val
                                    } else if matches!(
                                        operand_ty(f, op),
                                        Some(IrType::Ptr)
                                    ) && addr_tainted(&sites, taint_all_sites, op)
                                    {
                                        ArgTaint::Site
                                    } else {
                                        ArgTaint::Clean
                                    }
                                })
                                .collect();
                            let summ = self.fwd_summary(callee, pat);
                            if let Some(res) = &inst.result {
                                if summ.ret_tainted
                                    && inst.ty.map(|t| t.is_float()).unwrap_or(false)
                                    && vals.insert(res.clone())
                                {
                                    changed = true;
                                }
                            }
                            for (k, op) in inst.operands.iter().enumerate() {
                                if summ.writes_tainted.get(k).copied().unwrap_or(false) {
                                    let info = aa.info_of(op);
                                    if info.unknown {
                                        if !taint_all_sites {
                                            taint_all_sites = true;
                                            changed = true;
                                        }
                                    } else {
                                        for r in info.roots {
                                            if sites.insert(r.clone()) {
                                                changed = true;
                                            }
                                            if written.insert(r) {
                                                changed = true;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        Opcode::CallInd => {
                            let any = inst.operands[1..].iter().any(|op| {
                                tainted_operand(&vals, op)
                                    || (matches!(operand_ty(f, op), Some(IrType::Ptr))
                                        && addr_tainted(&sites, taint_all_sites, op))
                            });
                            if any {
                                if let Some(res) = &inst.result {
                                    if inst.ty.map(|t| t.is_float()).unwrap_or(false)
                                        && vals.insert(res.clone())
                                    {
                                        changed = true;
                                    }
                                }
                                for op in &inst.operands[1..] {
                                    if matches!(operand_ty(f, op), Some(IrType::Ptr)) {
                                        let info = aa.info_of(op);
                                        for r in info.roots {
                                            if sites.insert(r.clone()) {
                                                changed = true;
                                            }
                                            if written.insert(r) {
                                                changed = true;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        Opcode::Ret => {
                            if ret_float
                                && inst
                                    .operands
                                    .first()
                                    .map(|o| tainted_operand(&vals, o))
                                    .unwrap_or(false)
                                && !ret_tainted
                            {
                                ret_tainted = true;
                                changed = true;
                            }
                        }
                        _ => {}
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let writes_tainted = f
            .params
            .iter()
            .map(|p| {
                p.ty == IrType::Ptr
                    && (taint_all_sites
                        || written.contains(&Root::Param(p.name.clone())))
            })
            .collect();
        (
            FwdSummary {
                ret_tainted,
                writes_tainted,
            },
            vals,
            sites,
        )
    }

    /// Backward demand within one function. Conservative at call sites:
    /// a non-readonly call whose outputs are demanded demands all of its
    /// arguments.
    fn bwd_local(
        &mut self,
        f: &IrFunction,
        spec: &ActivitySpec,
    ) -> (BTreeSet<String>, BTreeSet<Root>) {
        let aa = AliasAnalysis::for_function(f, Some(self.env));
        let mut vals: BTreeSet<String> = BTreeSet::new();
        let mut sites: BTreeSet<Root> = BTreeSet::new();
        for (p, t) in f.params.iter().zip(&spec.params) {
            if t.is_dup() {
                sites.insert(Root::Param(p.name.clone()));
            }
        }
        let ret_active = spec.ret == RetActivity::Active
            && f.return_type.map(|t| t.is_float()).unwrap_or(false);
        let defs: BTreeMap<&str, &Instruction> = f
            .instrs()
            .filter_map(|i| i.result.as_deref().map(|r| (r, i)))
            .collect();
        loop {
            let mut changed = false;
            let addr_demanded = |sites: &BTreeSet<Root>, op: &Operand| {
                let info = aa.info_of(op);
                info.unknown && !sites.is_empty()
                    || info.roots.iter().any(|r| sites.contains(r))
            };
            for b in &f.blocks {
                for inst in &b.instrs {
                    match inst.opcode {
                        Opcode::Ret => {
                            if ret_active {
                                if let Some(Operand::Value(v)) = inst.operands.first() {
                                    if vals.insert(v.clone()) {
                                        changed = true;
                                    }
                                }
                            }
                        }
                        Opcode::Store => {
                            if inst.ty.map(|t| t.is_float()).unwrap_or(false)
                                && addr_demanded(&sites, &inst.operands[1])
                            {
                                if let Operand::Value(v) = &inst.operands[0] {
                                    if vals.insert(v.clone()) {
                                        changed = true;
                                    }
                                }
                            }
                        }
                        Opcode::Memcpy => {
                            if addr_demanded(&sites, &inst.operands[0]) {
                                let info = aa.info_of(&inst.operands[1]);
                                for r in info.roots {
                                    if sites.insert(r) {
                                        changed = true;
                                    }
                                }
                            }
                        }
                        _ => {}
                    }
                }
            }
            // Pull demand through defining instructions.
            let worklist: Vec<String> = vals.iter().cloned().collect();
            for v in worklist {
                let Some(inst) = defs.get(v.as_str()) else { continue };
                match inst.opcode {
                    Opcode::FAdd
                    | Opcode::FSub
                    | Opcode::FMul
                    | Opcode::FDiv
                    | Opcode::FNeg
                    | Opcode::Phi => {
                        for op in &inst.operands {
                            if let Operand::Value(u) = op {
                                if vals.insert(u.clone()) {
                                    changed = true;
                                }
                            }
                        }
                    }
                    Opcode::Select => {
                        for op in &inst.operands[1..] {
                            if let Operand::Value(u) = op {
                                if vals.insert(u.clone()) {
                                    changed = true;
                                }
                            }
                        }
                    }
                    Opcode::Intrinsic(i) => {
                        if i != crate::ir::Intrinsic::Read {
                            for op in &inst.operands {
                                if let Operand::Value(u) = op {
                                    if vals.insert(u.clone()) {
                                        changed = true;
                                    }
                                }
                            }
                        }
                    }
                    Opcode::Load => {
                        let info = aa.info_of(&inst.operands[0]);
                        for r in info.roots {
                            if sites.insert(r) {
                                changed = true;
                            }
                        }
                    }
                    Opcode::Call | Opcode::CallInd => {
                        let args = if inst.opcode == Opcode::CallInd {
                            &inst.operands[1..]
                        } else {
                            &inst.operands[..]
                        };
                        for op in args {
                            if let Operand::Value(u) = op {
                                if operand_ty(f, op) == Some(IrType::Ptr) {
                                    let info = aa.info_of(op);
                                    for r in info.roots {
                                        if sites.insert(r) {
                                            changed = true;
                                        }
                                    }
                                } else if vals.insert(u.clone()) {
                                    changed = true;
                                }
                            }
                        }
                    }
                    _ => {}
                }
            }
            // Calls that may write into demanded sites demand their inputs.
            for b in &f.blocks {
                for inst in &b.instrs {
                    if inst.opcode != Opcode::Call && inst.opcode != Opcode::CallInd {
                        continue;
                    }
                    if inst.opcode == Opcode::Call {
                        let callee = inst.callee.as_deref().unwrap_or_default();
                        if callee == crate::autodiff::AUTODIFF_INTRINSIC
                            || function_is_readonly(self.m, callee, &mut Vec::new())
                        {
                            continue;
                        }
                    }
                    let args = if inst.opcode == Opcode::CallInd {
                        &inst.operands[1..]
                    } else {
                        &inst.operands[..]
                    };
                    let writes_demanded = args.iter().any(|op| {
                        operand_ty(f, op) == Some(IrType::Ptr)
                            && addr_demanded(&sites, op)
                    });
                    if writes_demanded {
                        for op in args {
                            if let Operand::Value(u) = op {
                                if operand_ty(f, op) == Some(IrType::Ptr) {
                                    let info = aa.info_of(op);
                                    for r in info.roots {
                                        if sites.insert(r) {
                                            changed = true;
                                        }
                                    }
                                } else if vals.insert(u.clone()) {
                                    changed = true;
                                }
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        (vals, sites)
    }

    pub fn analyze(&mut self, fn_name: &str, spec: &ActivitySpec) -> ActivityInfo {
        let f = self
            .m
            .function(fn_name)
            .unwrap_or_else(|| panic!("unknown function @{fn_name}"));
        let pattern: Vec<ArgTaint> = spec
            .params
            .iter()
            .map(|t| match t {
                ActivityToken::Active => ArgTaint::Val,
                ActivityToken::Dup | ActivityToken::DupNoNeed => ArgTaint::Site,
                ActivityToken::Const => ArgTaint::Clean,
            })
            .collect();
        let (_, tainted_values, tainted_sites) = self.fwd_local(f, &pattern);
        let (demanded_values, demanded_sites) = self.bwd_local(f, spec);
        let active_values: BTreeSet<String> = tainted_values
            .intersection(&demanded_values)
            .cloned()
            .collect();

        let aa = AliasAnalysis::for_function(f, Some(self.env));
        let mut active_instructions = BTreeSet::new();
        for b in &f.blocks {
            for (idx, inst) in b.instrs.iter().enumerate() {
                let id = instr_id(&b.name, idx, inst);
                let active = match inst.opcode {
                    Opcode::Store => {
                        inst.ty.map(|t| t.is_float()).unwrap_or(false)
                            && inst.operands[0]
                                .as_value()
                                .map(|v| tainted_values.contains(v))
                                .unwrap_or(false)
                            && site_hits(&aa, &inst.operands[1], &demanded_sites)
                    }
                    Opcode::Memcpy => {
                        let float_bytes = [&inst.operands[0], &inst.operands[1]]
                            .iter()
                            .any(|op| {
                                op.as_value()
                                    .and_then(|v| self.env.value_tree(&f.name, v))
                                    .map(|t| t.contains_float())
                                    .unwrap_or(true)
                            });
                        float_bytes
                            && site_hits(&aa, &inst.operands[1], &tainted_sites)
                            && site_hits(&aa, &inst.operands[0], &demanded_sites)
                    }
                    Opcode::Call | Opcode::CallInd => {
                        let args = if inst.opcode == Opcode::CallInd {
                            &inst.operands[1..]
                        } else {
                            &inst.operands[..]
                        };
                        let result_active = inst
                            .result
                            .as_deref()
                            .map(|r| active_values.contains(r))
                            .unwrap_or(false);
                        let carries_taint = args.iter().any(|op| {
                            op.as_value()
                                .map(|v| tainted_values.contains(v))
                                .unwrap_or(false)
                                || (operand_ty(f, op) == Some(IrType::Ptr)
                                    && site_hits(&aa, op, &tainted_sites))
                        });
                        let memory_demanded = args.iter().any(|op| {
                            operand_ty(f, op) == Some(IrType::Ptr)
                                && site_hits(&aa, op, &demanded_sites)
                        });
                        carries_taint && (result_active || memory_demanded)
                    }
                    Opcode::Ret => inst
                        .operands
                        .first()
                        .and_then(|o| o.as_value())
                        .map(|v| active_values.contains(v))
                        .unwrap_or(false),
                    _ => inst
                        .result
                        .as_deref()
                        .map(|r| active_values.contains(r))
                        .unwrap_or(false),
                };
                if active {
                    active_instructions.insert(id);
                }
            }
        }
        ActivityInfo {
            active_values,
            active_instructions,
            tainted_values,
            tainted_sites,
            demanded_sites,
            demanded_values,
        }
    }
}

fn site_hits(aa: &AliasAnalysis, op: &Operand, sites: &BTreeSet<Root>) -> bool {
    let info = aa.info_of(op);
    if info.unknown && !sites.is_empty() {
        return true;
    }
    info.roots.iter().any(|r| sites.contains(r))
}

fn operand_ty(f: &IrFunction, op: &Operand) -> Option<IrType> {
    match op {
        Operand::Value(v) => {
            if let Some(p) = f.params.iter().find(|p| &p.name == v) {
                return Some(p.ty);
            }
            f.def_of(v).and_then(|i| i.result_type())
        }
        Operand::ConstFloat(_) => Some(IrType::F64),
        Operand::ConstInt(_) => Some(IrType::I64),
        Operand::Null | Operand::Global(_) => Some(IrType::Ptr),
        Operand::Token(_) => None,
    }
}

/// Entry point matching the spec's operation: classify values and
/// instructions of `fn_name` under `spec`.
pub fn analyze_activity(
    m: &IrModule,
    fn_name: &str,
    spec: &ActivitySpec,
    env: &TypeEnv,
) -> ActivityInfo {
    ActivityEngine::new(m, env).analyze(fn_name, spec)
}

//! Tape planning: for every forward value the reverse pass needs, decide
//! whether it is still live as SSA, recomputable within a cost budget,
//! or cached — and size the cache. Also plans control-flow reversal:
//! loop trip sources and join strategies.

use super::{SynthError};
use crate::activity::{instr_id, ActivityInfo};
use crate::analysis::{
    function_is_readonly, AliasAnalysis, AliasVerdict, Cfg, DomTree, LoopForest,
};
use crate::ir::{
    Instruction, IntPred, Intrinsic, IrFunction, IrModule, IrType, Opcode, Operand,
};
use std::collections::{BTreeMap, BTreeSet};

/// Storage shape of one cached value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheKind {
    /// One slot; the defining block executes at most once.
    ScalarSlot,
    /// Statically bounded loop nest: one allocation of `len` slots.
    FixedArray { len: u64 },
    /// Runtime-bounded loop: doubling buffer, initial capacity 8.
    Growable,
}

/// Availability class of a needed value at reverse time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValClass {
    /// SSA value still in scope: defined outside loops, dominating every
    /// exit. (Parameters always; anything else only in combined mode.)
    Live,
    /// Re-emit the defining instruction in the reverse block.
    Recompute,
    /// Read from tape storage.
    Cached(CacheKind),
    /// Canonical induction variable: reconstructed from the reverse trip
    /// counter of its loop (header block name).
    IvReconstruct(String),
}

/// Canonical induction variable of a loop.
#[derive(Debug, Clone, PartialEq)]
pub struct IvInfo {
    pub phi: String,
    pub next: String,
    pub init: Operand,
    /// Only step 1 is recognized.
    pub step: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TripSource {
    /// Trip count known at synthesis time.
    Static(u64),
    /// `max(bound - init, 0)` computed in the reverse pass from an
    /// available bound.
    Dynamic { bound: Operand, init: Operand, inclusive: bool },
    /// Pushed onto the control stack at loop exit in the forward pass.
    Recorded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopPlan {
    pub header: String,
    pub latch: String,
    /// The unique block that enters the loop from outside.
    pub entering: String,
    pub body: BTreeSet<String>,
    /// Target of the unique exit edge (which leaves from the header).
    pub exit_to: String,
    pub iv: Option<IvInfo>,
    pub trips: TripSource,
    pub depth: usize,
}

/// How the reverse block of a join decides which predecessor ran.
#[derive(Debug, Clone, PartialEq)]
pub enum JoinPlan {
    Entry,
    Single(String),
    /// Branch on a forward condition value: true means `true_pred` ran.
    CondSelector {
        cond: String,
        true_pred: String,
        false_pred: String,
    },
    /// Predecessor index pushed on the control stack in the forward pass.
    PredRecord { preds: Vec<String> },
    /// Loop headers consult the reverse trip counter instead.
    LoopHeader,
}

#[derive(Debug, Clone, Default)]
pub struct TapePlan {
    /// Values written to tape storage in the forward pass.
    pub cached: BTreeMap<String, CacheKind>,
    /// Values the reverse pass recomputes.
    pub recompute: BTreeSet<String>,
    /// Blocks whose reversal needs predecessor records.
    pub control: BTreeSet<String>,
    /// Headers of loops whose trip counts are recorded at exit.
    pub loops: BTreeSet<String>,
    /// Cache dedup: value -> previously cached equivalent value.
    pub reuse: BTreeMap<String, String>,
    /// Per-call-site tape pointer storage (instruction id -> kind).
    pub call_tapes: BTreeMap<String, CacheKind>,
    /// Full classification, including live and reconstructed values.
    pub classes: BTreeMap<String, ValClass>,
    /// Per-header loop shapes.
    pub loop_plans: BTreeMap<String, LoopPlan>,
    /// Per-block join reversal strategy.
    pub joins: BTreeMap<String, JoinPlan>,
    /// Split mode: only parameters are live across the pass boundary.
    pub split: bool,
}

impl TapePlan {
    pub fn class_of(&self, v: &str) -> Option<&ValClass> {
        self.classes.get(v)
    }

    /// Does anything require the runtime control stack?
    pub fn needs_control_stack(&self) -> bool {
        !self.control.is_empty() || !self.loops.is_empty()
    }
}

pub(crate) struct Planner<'a> {
    pub m: &'a IrModule,
    pub f: &'a IrFunction,
    pub aa: &'a AliasAnalysis<'a>,
    pub cfg: Cfg,
    pub dom: DomTree,
    pub loops: LoopForest,
    pub ret_blocks: Vec<usize>,
    pub defs: BTreeMap<String, (usize, usize)>,
    writes: Vec<(Operand, Option<u64>)>,
    split: bool,
}

impl<'a> Planner<'a> {
    pub fn new(
        m: &'a IrModule,
        f: &'a IrFunction,
        aa: &'a AliasAnalysis<'a>,
        split: bool,
    ) -> Planner<'a> {
        let cfg = Cfg::build(f);
        let dom = DomTree::build(&cfg);
        let loops = LoopForest::build(&cfg, &dom);
        let ret_blocks = f
            .blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| {
                b.terminator().map(|t| t.opcode == Opcode::Ret).unwrap_or(false)
            })
            .map(|(i, _)| i)
            .collect();
        let mut defs = BTreeMap::new();
        for (bi, b) in f.blocks.iter().enumerate() {
            for (ii, inst) in b.instrs.iter().enumerate() {
                if let Some(r) = &inst.result {
                    defs.insert(r.clone(), (bi, ii));
                }
            }
        }
        let mut writes = Vec::new();
        for b in &f.blocks {
            for inst in &b.instrs {
                match inst.opcode {
                    Opcode::Store => writes.push((
                        inst.operands[1].clone(),
                        inst.ty.map(|t| t.byte_width()),
                    )),
                    Opcode::Memcpy => writes.push((
                        inst.operands[0].clone(),
                        match &inst.operands[2] {
                            Operand::ConstInt(n) => Some(*n as u64),
                            _ => None,
                        },
                    )),
                    _ => {}
                }
            }
        }
        Planner {
            m,
            f,
            aa,
            cfg,
            dom,
            loops,
            ret_blocks,
            defs,
            writes,
            split,
        }
    }

    fn is_param(&self, v: &str) -> bool {
        self.f.params.iter().any(|p| p.name == v)
    }

    fn def_of(&self, v: &str) -> Option<&Instruction> {
        let (bi, ii) = self.defs.get(v)?;
        Some(&self.f.blocks[*bi].instrs[*ii])
    }

    /// Is the value still usable as plain SSA from the reverse blocks?
    fn is_live_class(&self, v: &str) -> bool {
        if self.is_param(v) {
            return true;
        }
        if self.split {
            return false;
        }
        let Some(&(bi, _)) = self.defs.get(v) else { return false };
        if self.loops.in_any_loop(bi) {
            return false;
        }
        self.ret_blocks.iter().all(|&r| self.dom.dominates(bi, r))
    }

    /// Is this load's location written anywhere in the function?
    fn load_unclobbered(&self, inst: &Instruction) -> bool {
        let addr = &inst.operands[0];
        let size = inst.ty.map(|t| t.byte_width());
        let opaque = self.f.instrs().any(|i| match i.opcode {
            Opcode::Free => true,
            Opcode::Call => {
                let callee = i.callee.as_deref().unwrap_or_default();
                !function_is_readonly(self.m, callee, &mut Vec::new())
            }
            Opcode::CallInd => true,
            _ => false,
        });
        if opaque {
            return false;
        }
        self.writes
            .iter()
            .all(|(w, ws)| self.aa.alias(addr, size, w, *ws) == AliasVerdict::NoAlias)
    }

    /// Recomputation cost of one value, bounded. `None` means not
    /// recomputable. Live/IV/cached operands cost 0.
    fn chain_cost(
        &self,
        v: &str,
        classes: &BTreeMap<String, ValClass>,
        ivs: &BTreeMap<String, String>, // iv phi -> loop header
        visiting: &mut BTreeSet<String>,
        budget: i64,
    ) -> Option<i64> {
        if budget < 0 {
            return None;
        }
        if self.is_live_class(v) {
            return Some(0);
        }
        if ivs.contains_key(v) {
            return Some(0);
        }
        match classes.get(v) {
            Some(ValClass::Cached(_)) | Some(ValClass::Live)
            | Some(ValClass::IvReconstruct(_)) => return Some(0),
            Some(ValClass::Recompute) => {} // cost its chain again below
            None => {}
        }
        if !visiting.insert(v.to_string()) {
            return None; // cycle (phi)
        }
        let result = (|| {
            let def = self.def_of(v)?;
            let own: i64 = match def.opcode {
                Opcode::FAdd
                | Opcode::FSub
                | Opcode::FMul
                | Opcode::FDiv
                | Opcode::FNeg
                | Opcode::IAdd
                | Opcode::ISub
                | Opcode::IMul
                | Opcode::ICmp(_)
                | Opcode::FCmp(_)
                | Opcode::Select
                | Opcode::PtrAdd
                | Opcode::SiToFp => 1,
                Opcode::Intrinsic(Intrinsic::Read) => return None,
                Opcode::Intrinsic(_) => 1,
                Opcode::Load => {
                    if self.load_unclobbered(def) {
                        2
                    } else {
                        return None;
                    }
                }
                Opcode::Call => {
                    let callee = def.callee.as_deref().unwrap_or_default();
                    let small = self
                        .m
                        .function(callee)
                        .map(|cf| !cf.is_declaration() && cf.instr_count() <= 4)
                        .unwrap_or(false);
                    if small && function_is_readonly(self.m, callee, &mut Vec::new()) {
                        4
                    } else {
                        return None;
                    }
                }
                _ => return None,
            };
            let mut total = own;
            for op in &def.operands {
                if let Operand::Value(u) = op {
                    let c = self.chain_cost(u, classes, ivs, visiting, budget - total)?;
                    total += c;
                    if total > budget {
                        return None;
                    }
                }
            }
            Some(total)
        })();
        visiting.remove(v);
        result
    }

    /// Cache kind for a value defined at `def_block`, per the loop plans.
    fn kind_at(
        &self,
        def_block: usize,
        plans: &BTreeMap<String, LoopPlan>,
    ) -> Result<CacheKind, SynthError> {
        let nest = self.loops.nest_of(def_block);
        if nest.is_empty() {
            return Ok(CacheKind::ScalarSlot);
        }
        let mut total: u64 = 1;
        let mut all_static = true;
        for (level, &li) in nest.iter().enumerate() {
            let lp = &self.loops.loops[li];
            let header_name = &self.f.blocks[lp.header].name;
            let plan = plans.get(header_name).expect("loop plan exists");
            let innermost = level == nest.len() - 1;
            match plan.trips {
                TripSource::Static(t) => {
                    let is_header_def = innermost
                        && self.f.blocks[def_block].name == plan.header;
                    total = total.saturating_mul(t + u64::from(is_header_def));
                }
                _ => all_static = false,
            }
        }
        if all_static {
            return Ok(CacheKind::FixedArray { len: total.max(1) });
        }
        if nest.len() == 1 {
            return Ok(CacheKind::Growable);
        }
        Err(SynthError::UnsupportedConstruct {
            function: self.f.name.clone(),
            what: format!(
                "value cached in a depth-{} loop nest with runtime trip counts",
                nest.len()
            ),
        })
    }

    /// Validates loop canonical form and derives per-loop plans.
    fn plan_loops(&self) -> Result<BTreeMap<String, LoopPlan>, SynthError> {
        let mut out = BTreeMap::new();
        for lp in &self.loops.loops {
            let header = lp.header;
            let header_name = self.f.blocks[header].name.clone();
            let unsupported = |what: String| SynthError::UnsupportedConstruct {
                function: self.f.name.clone(),
                what,
            };
            let latch = lp
                .single_latch()
                .ok_or_else(|| unsupported(format!("loop at {header_name} has multiple latches")))?;
            let entering: Vec<usize> = self.cfg.preds[header]
                .iter()
                .copied()
                .filter(|p| *p != latch)
                .collect();
            let [entering] = entering.as_slice() else {
                return Err(unsupported(format!(
                    "loop at {header_name} has multiple entering edges"
                )));
            };
            // All exits must leave from the header, through one edge.
            let mut exit_to: Option<usize> = None;
            for &bi in &lp.blocks {
                for &s in &self.cfg.succs[bi] {
                    if !lp.blocks.contains(&s) {
                        if bi != header {
                            return Err(unsupported(format!(
                                "loop at {header_name} exits from a non-header block"
                            )));
                        }
                        if exit_to.replace(s).is_some() {
                            return Err(unsupported(format!(
                                "loop at {header_name} has multiple exit edges"
                            )));
                        }
                    }
                }
            }
            let exit_to = exit_to.ok_or_else(|| {
                unsupported(format!("loop at {header_name} never exits"))
            })?;

            let iv = self.find_iv(lp, latch);
            let trips = self.find_trips(lp, iv.as_ref());
            out.insert(
                header_name.clone(),
                LoopPlan {
                    header: header_name.clone(),
                    latch: self.f.blocks[latch].name.clone(),
                    entering: self.f.blocks[*entering].name.clone(),
                    body: lp
                        .blocks
                        .iter()
                        .map(|&b| self.f.blocks[b].name.clone())
                        .collect(),
                    exit_to: self.f.blocks[exit_to].name.clone(),
                    iv,
                    trips,
                    depth: self.loops.depth(header),
                },
            );
        }
        Ok(out)
    }

    /// `%i = phi [init, entering], [%i.next, latch]` with
    /// `%i.next = iadd %i, 1`.
    fn find_iv(&self, lp: &crate::analysis::Loop, latch: usize) -> Option<IvInfo> {
        let header = &self.f.blocks[lp.header];
        let latch_name = &self.f.blocks[latch].name;
        for inst in &header.instrs {
            if inst.opcode != Opcode::Phi || inst.ty != Some(IrType::I64) {
                if inst.opcode != Opcode::Phi {
                    break;
                }
                continue;
            }
            let phi_name = inst.result.clone()?;
            if inst.operands.len() != 2 {
                continue;
            }
            let mut init = None;
            let mut next = None;
            for (op, label) in inst.operands.iter().zip(&inst.targets) {
                if label == latch_name {
                    next = op.as_value().map(|s| s.to_string());
                } else {
                    init = Some(op.clone());
                }
            }
            let (Some(init), Some(next)) = (init, next) else { continue };
            let Some(next_def) = self.def_of(&next) else { continue };
            let is_inc = next_def.opcode == Opcode::IAdd
                && ((next_def.operands[0].as_value() == Some(phi_name.as_str())
                    && next_def.operands[1] == Operand::ConstInt(1))
                    || (next_def.operands[1].as_value() == Some(phi_name.as_str())
                        && next_def.operands[0] == Operand::ConstInt(1)));
            if is_inc {
                return Some(IvInfo {
                    phi: phi_name,
                    next,
                    init,
                    step: 1,
                });
            }
        }
        None
    }

    /// Trip count of a canonical while loop:
    /// `condbr (icmp slt iv, bound), body, exit`.
    fn find_trips(&self, lp: &crate::analysis::Loop, iv: Option<&IvInfo>) -> TripSource {
        let Some(iv) = iv else { return TripSource::Recorded };
        let header = &self.f.blocks[lp.header];
        let Some(term) = header.terminator() else { return TripSource::Recorded };
        if term.opcode != Opcode::CondBr {
            return TripSource::Recorded;
        }
        let in_loop = |name: &str| {
            self.cfg
                .index
                .get(name)
                .map(|b| lp.blocks.contains(b))
                .unwrap_or(false)
        };
        // Loop continues while the condition is true.
        if !(in_loop(&term.targets[0]) && !in_loop(&term.targets[1])) {
            return TripSource::Recorded;
        }
        let Some(Operand::Value(cond)) = term.operands.first().cloned() else {
            return TripSource::Recorded;
        };
        let Some(cmp) = self.def_of(&cond) else { return TripSource::Recorded };
        let Opcode::ICmp(pred) = cmp.opcode else { return TripSource::Recorded };
        let lhs_is_iv = cmp.operands[0].as_value() == Some(iv.phi.as_str());
        if !lhs_is_iv {
            return TripSource::Recorded;
        }
        let inclusive = match pred {
            IntPred::Slt => false,
            IntPred::Sle => true,
            _ => return TripSource::Recorded,
        };
        let bound = cmp.operands[1].clone();
        match (&bound, &iv.init) {
            (Operand::ConstInt(b), Operand::ConstInt(c0)) => {
                let t = (b - c0 + i64::from(inclusive)).max(0);
                TripSource::Static(t as u64)
            }
            _ => TripSource::Dynamic {
                bound,
                init: iv.init.clone(),
                inclusive,
            },
        }
    }

    /// Join strategy for every block.
    fn plan_joins(
        &self,
        loop_plans: &BTreeMap<String, LoopPlan>,
    ) -> BTreeMap<String, JoinPlan> {
        let mut out = BTreeMap::new();
        for (bi, b) in self.f.blocks.iter().enumerate() {
            if bi == 0 {
                out.insert(b.name.clone(), JoinPlan::Entry);
                continue;
            }
            if loop_plans.contains_key(&b.name) {
                out.insert(b.name.clone(), JoinPlan::LoopHeader);
                continue;
            }
            let preds: Vec<usize> = self.cfg.preds[bi].clone();
            match preds.as_slice() {
                [p] => {
                    out.insert(
                        b.name.clone(),
                        JoinPlan::Single(self.f.blocks[*p].name.clone()),
                    );
                }
                [p1, p2] => {
                    let plan = self
                        .match_selector(bi, *p1, *p2)
                        .unwrap_or_else(|| JoinPlan::PredRecord {
                            preds: vec![
                                self.f.blocks[*p1].name.clone(),
                                self.f.blocks[*p2].name.clone(),
                            ],
                        });
                    out.insert(b.name.clone(), plan);
                }
                ps => {
                    out.insert(
                        b.name.clone(),
                        JoinPlan::PredRecord {
                            preds: ps
                                .iter()
                                .map(|&p| self.f.blocks[p].name.clone())
                                .collect(),
                        },
                    );
                }
            }
        }
        out
    }

    /// Triangle / diamond pattern around a two-predecessor join.
    fn match_selector(&self, b: usize, p1: usize, p2: usize) -> Option<JoinPlan> {
        let term_of = |x: usize| self.f.blocks[x].terminator();
        let cond_of = |x: usize| -> Option<(String, usize, usize)> {
            let t = term_of(x)?;
            if t.opcode != Opcode::CondBr {
                return None;
            }
            let c = t.operands[0].as_value()?.to_string();
            let t0 = *self.cfg.index.get(&t.targets[0])?;
            let t1 = *self.cfg.index.get(&t.targets[1])?;
            Some((c, t0, t1))
        };
        // Triangle: one pred is the branch owner, the other a pass-through.
        for (owner, thru) in [(p1, p2), (p2, p1)] {
            if let Some((c, t0, t1)) = cond_of(owner) {
                let matches = (t0 == thru && t1 == b) || (t0 == b && t1 == thru);
                let thru_ok = self.cfg.preds[thru] == vec![owner]
                    && term_of(thru).map(|t| t.opcode == Opcode::Br).unwrap_or(false);
                if matches && thru_ok {
                    // cond true means flow went through target0.
                    let (tp, fp) = if t0 == thru { (thru, owner) } else { (owner, thru) };
                    return Some(JoinPlan::CondSelector {
                        cond: c,
                        true_pred: self.f.blocks[tp].name.clone(),
                        false_pred: self.f.blocks[fp].name.clone(),
                    });
                }
            }
        }
        // Diamond: both preds single-pred from a common condbr owner.
        let d1 = self.cfg.preds[p1].clone();
        let d2 = self.cfg.preds[p2].clone();
        if let ([d], [d_]) = (d1.as_slice(), d2.as_slice()) {
            if d == d_ {
                if let Some((c, t0, t1)) = cond_of(*d) {
                    let straight = |x: usize| {
                        term_of(x).map(|t| t.opcode == Opcode::Br).unwrap_or(false)
                    };
                    if ((t0 == p1 && t1 == p2) || (t0 == p2 && t1 == p1))
                        && straight(p1)
                        && straight(p2)
                    {
                        let (tp, fp) = if t0 == p1 { (p1, p2) } else { (p2, p1) };
                        return Some(JoinPlan::CondSelector {
                            cond: c,
                            true_pred: self.f.blocks[tp].name.clone(),
                            false_pred: self.f.blocks[fp].name.clone(),
                        });
                    }
                }
            }
        }
        None
    }
}

/// Computes the tape plan: classification of `needed` values, cache
/// shapes, and the control-reversal plan, for combined (`split = false`)
/// or split synthesis.
pub fn plan_tape_full(
    m: &IrModule,
    f: &IrFunction,
    needed: &BTreeSet<String>,
    act: &ActivityInfo,
    aa: &AliasAnalysis,
    split: bool,
) -> Result<TapePlan, SynthError> {
    let planner = Planner::new(m, f, aa, split);
    let loop_plans = planner.plan_loops()?;
    let joins = planner.plan_joins(&loop_plans);

    // Induction variables are reconstructed, not stored.
    let mut ivs: BTreeMap<String, String> = BTreeMap::new();
    for lp in loop_plans.values() {
        if let Some(iv) = &lp.iv {
            ivs.insert(iv.phi.clone(), lp.header.clone());
        }
    }

    let mut plan = TapePlan {
        split,
        loop_plans,
        joins: joins.clone(),
        ..TapePlan::default()
    };

    // Selector conditions and dynamic trip bounds are needed too.
    let mut worklist: Vec<String> = needed.iter().cloned().collect();
    for j in joins.values() {
        if let JoinPlan::CondSelector { cond, .. } = j {
            worklist.push(cond.clone());
        }
    }
    for lp in plan.loop_plans.clone().values() {
        if let TripSource::Dynamic { bound, init, .. } = &lp.trips {
            if let Operand::Value(v) = bound {
                worklist.push(v.clone());
            }
            if let Operand::Value(v) = init {
                worklist.push(v.clone());
            }
        }
        if matches!(lp.trips, TripSource::Recorded) {
            plan.loops.insert(lp.header.clone());
        }
    }
    for (block, j) in &joins {
        if matches!(j, JoinPlan::PredRecord { .. }) {
            plan.control.insert(block.clone());
        }
    }

    // Classify, growing the worklist through recompute chains.
    while let Some(v) = worklist.pop() {
        if plan.classes.contains_key(&v) {
            continue;
        }
        if let Some(header) = ivs.get(&v) {
            plan.classes
                .insert(v.clone(), ValClass::IvReconstruct(header.clone()));
            continue;
        }
        if planner.is_live_class(&v) {
            plan.classes.insert(v.clone(), ValClass::Live);
            continue;
        }
        let cost = planner.chain_cost(
            &v,
            &plan.classes,
            &ivs,
            &mut BTreeSet::new(),
            8,
        );
        if cost.is_some() {
            plan.classes.insert(v.clone(), ValClass::Recompute);
            plan.recompute.insert(v.clone());
            if let Some(def) = planner.def_of(&v) {
                for op in &def.operands {
                    if let Operand::Value(u) = op {
                        worklist.push(u.clone());
                    }
                }
            }
            continue;
        }
        let def_block = planner
            .defs
            .get(&v)
            .map(|(bi, _)| *bi)
            .ok_or_else(|| SynthError::Other {
                function: f.name.clone(),
                what: format!("needed value %{v} has no definition"),
            })?;
        let kind = planner.kind_at(def_block, &plan.loop_plans)?;
        plan.classes.insert(v.clone(), ValClass::Cached(kind));
        plan.cached.insert(v.clone(), kind);
    }

    dedup_equivalent_loads(f, &planner, &mut plan);
    minimize_a_to_b(f, needed, &planner, &mut plan);

    // Tape pointer storage per active call site.
    for (bi, b) in f.blocks.iter().enumerate() {
        for (ii, inst) in b.instrs.iter().enumerate() {
            if !matches!(inst.opcode, Opcode::Call | Opcode::CallInd) {
                continue;
            }
            let id = instr_id(&b.name, ii, inst);
            if act.is_active_instr(&id)
                && inst.callee.as_deref() != Some(super::AUTODIFF_INTRINSIC)
            {
                let kind = planner.kind_at(bi, &plan.loop_plans)?;
                plan.call_tapes.insert(id, kind);
            }
        }
    }
    Ok(plan)
}

/// Spec-shaped entry point: plan for combined-mode synthesis.
pub fn plan_tape(
    m: &IrModule,
    f: &IrFunction,
    needed: &BTreeSet<String>,
    act: &ActivityInfo,
    aa: &AliasAnalysis,
) -> Result<TapePlan, SynthError> {
    plan_tape_full(m, f, needed, act, aa, false)
}

/// Two cached loads of the same address in the same block with no
/// intervening write reuse one cache entry.
fn dedup_equivalent_loads(f: &IrFunction, _planner: &Planner, plan: &mut TapePlan) {
    for b in &f.blocks {
        let mut last_load: BTreeMap<(String, Option<IrType>), String> = BTreeMap::new();
        for inst in &b.instrs {
            match inst.opcode {
                Opcode::Load => {
                    let Some(res) = &inst.result else { continue };
                    let Some(addr) = inst.operands[0].as_value() else { continue };
                    let key = (addr.to_string(), inst.ty);
                    if let Some(prev) = last_load.get(&key) {
                        if plan.cached.contains_key(prev) && plan.cached.contains_key(res)
                        {
                            plan.cached.remove(res);
                            plan.classes.insert(
                                res.clone(),
                                ValClass::Cached(plan.cached[prev]),
                            );
                            plan.reuse.insert(res.clone(), prev.clone());
                        }
                    } else {
                        last_load.insert(key, res.clone());
                    }
                }
                Opcode::Store | Opcode::Memcpy | Opcode::Call | Opcode::CallInd
                | Opcode::Free => {
                    last_load.clear();
                }
                _ => {}
            }
        }
    }
}

/// If cached value A is only used to recompute a single value B, cache B
/// instead.
fn minimize_a_to_b(
    f: &IrFunction,
    direct_needed: &BTreeSet<String>,
    planner: &Planner,
    plan: &mut TapePlan,
) {
    loop {
        let mut swap: Option<(String, String)> = None;
        'outer: for a in plan.cached.keys() {
            if direct_needed.contains(a) || plan.reuse.values().any(|t| t == a) {
                continue;
            }
            let mut users: Vec<String> = Vec::new();
            for b in &plan.recompute {
                if let Some(def) = f.def_of(b) {
                    if def.value_uses().any(|u| u == a) {
                        users.push(b.clone());
                    }
                }
            }
            if let [b] = users.as_slice() {
                // B must still be recomputable... it is cached instead, so
                // only its location matters.
                if direct_needed.contains(b) || plan.recompute.contains(b) {
                    swap = Some((a.clone(), b.clone()));
                    break 'outer;
                }
            }
        }
        let Some((a, b)) = swap else { break };
        let Some(&(bbi, _)) = planner.defs.get(&b) else { break };
        let Ok(kind) = planner.kind_at(bbi, &plan.loop_plans) else { break };
        plan.cached.remove(&a);
        plan.classes.remove(&a);
        plan.recompute.remove(&b);
        plan.cached.insert(b.clone(), kind);
        plan.classes.insert(b, ValClass::Cached(kind));
    }
}

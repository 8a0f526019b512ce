//! Gradient synthesis proper.
//!
//! For every basic block of the primal a corresponding reverse block is
//! created; adjoints of the block's instructions are emitted into it in
//! reverse order, and the reverse block branches to the reverse of the
//! executed predecessor. Returns in the forward pass become branches to
//! their reverse blocks; the reverse of the entry returns. Loops are
//! reversed by replaying trip counts, joins by reusing the branch
//! condition when it is still available or a predecessor record when it
//! is not. Active calls become augmented-forward/reverse pairs connected
//! by a tape; indirect calls go through the two-function shadow of the
//! callee.

use super::tape::{
    plan_tape_full, CacheKind, IvInfo, JoinPlan, LoopPlan, TapePlan, TripSource,
    ValClass,
};
use super::use_analysis::{differential_use, store_action, StoreAction};
use super::{
    active_scalar_count, aug_name, grad_name, gradient_return_type, has_seed_param,
    rev_name, shadow_pair_name, GradMode, GradRequest, SynthError, AUTODIFF_INTRINSIC,
};
use crate::activity::{
    analyze_activity, instr_id, ActivityInfo, ActivitySpec, RetActivity,
};
use crate::analysis::{AliasAnalysis, Cfg, DomTree, LoopForest};
use crate::ir::*;
use crate::typetree::{self, BaseType, PathElem, TypeEnv};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Payload {
    /// Synthesized pairs exchange a pointer to a tape blob.
    Ptr,
    /// Custom pairs exchange one f64 payload (Fig. 3 style).
    F64,
}

#[derive(Debug, Clone)]
struct PairInfo {
    aug: String,
    rev: String,
    payload: Payload,
    spec: ActivitySpec,
}

/// Module-level synthesis session: synthesized pairs are shared across
/// call sites, and shadow pair globals are created once per function.
pub struct SynthContext<'a> {
    base: &'a IrModule,
    out: IrModule,
    env: TypeEnv,
    pairs: BTreeMap<String, PairInfo>, // key: "fn.pattern"
    building: BTreeSet<String>,
}

impl<'a> SynthContext<'a> {
    pub fn new(m: &'a IrModule) -> Result<SynthContext<'a>, SynthError> {
        let env = typetree::analyze(m).map_err(|e| match e {
            typetree::TypeError::Conflict(c) => SynthError::TypeConflict(c),
            other => SynthError::Type(other.to_string()),
        })?;
        Ok(SynthContext {
            base: m,
            out: m.clone(),
            env,
            pairs: BTreeMap::new(),
            building: BTreeSet::new(),
        })
    }

    pub fn with_env(m: &'a IrModule, env: TypeEnv) -> SynthContext<'a> {
        SynthContext {
            base: m,
            out: m.clone(),
            env,
            pairs: BTreeMap::new(),
            building: BTreeSet::new(),
        }
    }

    pub fn finish(self) -> IrModule {
        self.out
    }

    /// Synthesizes the combined gradient `grad_<fn>` for a request.
    pub fn run(&mut self, req: &GradRequest) -> Result<String, SynthError> {
        let f = self
            .base
            .function(&req.function)
            .ok_or_else(|| SynthError::MissingDefinition(req.function.clone()))?
            .clone();
        req.spec
            .check(&f)
            .map_err(SynthError::BadActivity)?;
        if f.is_declaration() {
            return Err(SynthError::MissingDefinition(req.function.clone()));
        }
        match req.mode {
            GradMode::Combined => {
                let name = grad_name(&req.function);
                if self.out.function(&name).is_some() {
                    return Ok(name);
                }
                let act = analyze_activity(self.base, &req.function, &req.spec, &self.env);
                let grad = self.build_function(&f, &req.spec, &act, Shape::Combined)?;
                self.out.functions.push(grad);
                Ok(name)
            }
            GradMode::Split => {
                let info = self.ensure_pair(&req.function, req.spec.clone())?;
                Ok(info.rev)
            }
        }
    }

    /// Augmented/reverse pair for a callee under one activity pattern.
    fn ensure_pair(&mut self, fn_name: &str, spec: ActivitySpec) -> Result<PairInfo, SynthError> {
        let key = format!("{fn_name}.{}", super::pattern_suffix(&spec));
        if let Some(p) = self.pairs.get(&key) {
            return Ok(p.clone());
        }
        // Custom registrations take precedence over synthesis, and are
        // the only option for declarations.
        if let Some((aug, rev)) = self.base.custom_adjoints.get(fn_name) {
            let target = self
                .base
                .function(fn_name)
                .ok_or_else(|| SynthError::MissingDefinition(fn_name.to_string()))?;
            let (a, g) = (
                self.base.function(aug),
                self.base.function(rev),
            );
            let (Some(a), Some(g)) = (a, g) else {
                return Err(SynthError::CustomSignature(format!(
                    "custom adjoint of @{fn_name} references missing functions"
                )));
            };
            super::check_custom_pair_signature(target, a, g)
                .map_err(SynthError::CustomSignature)?;
            let info = PairInfo {
                aug: aug.clone(),
                rev: rev.clone(),
                payload: Payload::F64,
                spec: ActivitySpec::canonical(target),
            };
            self.pairs.insert(key, info.clone());
            return Ok(info);
        }
        let f = self
            .base
            .function(fn_name)
            .ok_or_else(|| SynthError::MissingDefinition(fn_name.to_string()))?
            .clone();
        if f.is_declaration() {
            return Err(SynthError::MissingDefinition(fn_name.to_string()));
        }
        spec.check(&f).map_err(SynthError::BadActivity)?;
        let info = PairInfo {
            aug: aug_name(fn_name, &spec),
            rev: rev_name(fn_name, &spec),
            payload: Payload::Ptr,
            spec: spec.clone(),
        };
        // Register before building: recursive callees find the names.
        self.pairs.insert(key.clone(), info.clone());
        if !self.building.insert(key.clone()) {
            return Ok(info);
        }
        let act = analyze_activity(self.base, fn_name, &spec, &self.env);
        let aug = self.build_function(&f, &spec, &act, Shape::Augmented)?;
        let rev = self.build_function(&f, &spec, &act, Shape::Reverse)?;
        self.out.functions.push(aug);
        self.out.functions.push(rev);
        self.building.remove(&key);
        Ok(info)
    }

    /// The (augmented, gradient) shadow pair global of a taken-address
    /// function, created lazily.
    fn ensure_shadow_pair(&mut self, fn_name: &str) -> Result<String, SynthError> {
        let gname = shadow_pair_name(fn_name);
        if self.out.global(&gname).is_some() {
            return Ok(gname);
        }
        let f = self
            .base
            .function(fn_name)
            .ok_or_else(|| SynthError::MissingDefinition(fn_name.to_string()))?;
        let spec = ActivitySpec::canonical(f);
        let info = self.ensure_pair(fn_name, spec)?;
        self.out.globals.push(GlobalData {
            name: gname.clone(),
            init: GlobalInit::Functions(vec![info.aug, info.rev]),
        });
        Ok(gname)
    }

    fn build_function(
        &mut self,
        f: &IrFunction,
        spec: &ActivitySpec,
        act: &ActivityInfo,
        shape: Shape,
    ) -> Result<IrFunction, SynthError> {
        let aa = AliasAnalysis::for_function(f, Some(&self.env));
        let needed = differential_use(f, act);
        let plan = plan_tape_full(
            self.base,
            f,
            &needed,
            act,
            &aa,
            shape != Shape::Combined,
        )?;
        self.build_with_plan(f, spec, act, &plan, shape)
    }

    fn build_with_plan(
        &mut self,
        f: &IrFunction,
        spec: &ActivitySpec,
        act: &ActivityInfo,
        plan: &TapePlan,
        shape: Shape,
    ) -> Result<IrFunction, SynthError> {
        let mut b = Builder::new(self, f, spec.clone(), act.clone(), plan.clone(), shape)?;
        b.build()
    }
}

/// Convenience entry: full analyses plus synthesis of one request.
pub fn synthesize(m: &IrModule, req: &GradRequest) -> Result<IrModule, SynthError> {
    let mut ctx = SynthContext::new(m)?;
    ctx.run(req)?;
    Ok(ctx.finish())
}

/// Spec-shaped entry: synthesis from precomputed analyses. The supplied
/// activity and plan drive the requested function; callee pairs run their
/// own analyses internally.
pub fn synthesize_gradient(
    m: &IrModule,
    req: &GradRequest,
    env: &TypeEnv,
    act: &ActivityInfo,
    plan: &TapePlan,
) -> Result<IrModule, SynthError> {
    let mut ctx = SynthContext::with_env(m, env.clone());
    let f = m
        .function(&req.function)
        .ok_or_else(|| SynthError::MissingDefinition(req.function.clone()))?
        .clone();
    if f.is_declaration() {
        return Err(SynthError::MissingDefinition(req.function.clone()));
    }
    req.spec.check(&f).map_err(SynthError::BadActivity)?;
    match req.mode {
        GradMode::Combined => {
            let grad = ctx.build_with_plan(&f, &req.spec, act, plan, Shape::Combined)?;
            ctx.out.functions.push(grad);
        }
        GradMode::Split => {
            ctx.ensure_pair(&req.function, req.spec.clone())?;
        }
    }
    Ok(ctx.finish())
}

/// Registers a custom (augmented, gradient) pair for `fn_name`; later
/// synthesis uses the pair at every call site, even if the function body
/// is absent.
pub fn register_custom_adjoint(
    m: &IrModule,
    fn_name: &str,
    augmented: &str,
    gradient: &str,
) -> Result<IrModule, SynthError> {
    let target = m
        .function(fn_name)
        .ok_or_else(|| SynthError::MissingDefinition(fn_name.to_string()))?;
    let aug = m.function(augmented).ok_or_else(|| {
        SynthError::CustomSignature(format!("unknown augmented function @{augmented}"))
    })?;
    let grad = m.function(gradient).ok_or_else(|| {
        SynthError::CustomSignature(format!("unknown gradient function @{gradient}"))
    })?;
    super::check_custom_pair_signature(target, aug, grad)
        .map_err(SynthError::CustomSignature)?;
    let mut out = m.clone();
    out.custom_adjoints
        .insert(fn_name.to_string(), (augmented.to_string(), gradient.to_string()));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Combined,
    Augmented,
    Reverse,
}

/// Storage of one cache unit.
#[derive(Debug, Clone)]
enum UnitBase {
    /// Value name of the backing allocation (combined mode): the buffer
    /// itself for fixed arrays, the 24-byte header for growable buffers,
    /// the slot for scalars.
    Direct(String),
    /// Byte offset into the tape blob (split mode). Growable units own
    /// three slots (data, capacity, count); others one.
    Blob(u64),
}

#[derive(Debug, Clone)]
struct CacheUnit {
    kind: CacheKind,
    ty: IrType,
    base: UnitBase,
    /// Loop nest of the defining block (headers, outermost first).
    nest: Vec<String>,
    /// Defined in the innermost header itself (one extra instance).
    header_def: bool,
}

/// Reverse-emission context for one reverse block.
struct RevCtx {
    block: BasicBlock,
    /// Primal block this reverses.
    fblock: String,
    memo: BTreeMap<String, Operand>,
    shadow_memo: BTreeMap<String, Operand>,
}

struct LoopRt {
    /// Reverse counter phi (counts header executions, trips .. 0).
    rk: String,
    /// Reconstructed IV values, when the loop has a canonical IV.
    iv_header: Option<String>,
    iv_body: Option<String>,
    /// Incomings for the rk phi: (reverse block label, trips operand).
    entries: Vec<(String, Operand)>,
}

struct Builder<'s, 'a> {
    ctx: &'s mut SynthContext<'a>,
    primal: IrFunction,
    spec: ActivitySpec,
    act: ActivityInfo,
    plan: TapePlan,
    shape: Shape,
    new_name: String,

    used: BTreeSet<String>,
    counter: u64,

    params: Vec<Param>,
    shadow_base: BTreeMap<String, Operand>,
    dslot: BTreeMap<String, String>,
    units: BTreeMap<String, CacheUnit>,
    /// Tape-pointer storage per active call site (instruction id).
    tape_units: BTreeMap<String, CacheUnit>,
    /// Storage for shadow-allocation pointers, per primal alloc name.
    shadow_units: BTreeMap<String, CacheUnit>,
    /// Epilogue frees of foreign pointers: (free instr id, slot unit).
    free_epilogue: Vec<(String, CacheUnit)>,
    /// Local allocations that the primal frees somewhere.
    freed_allocs: BTreeSet<String>,
    call_tape_val: BTreeMap<String, String>,
    call_tape_live: BTreeMap<String, bool>,
    /// Injected trip counters: (latch block, counter, incremented name).
    latch_incs: Vec<(String, String, String)>,
    blob_size: u64,
    blob_inits: Vec<(u64, CacheKind, IrType)>,
    seed: Operand,
    deriv_out: Option<String>,
    blob_val: Option<String>,
    exit_unit: Option<CacheUnit>,
    ctrl_unit: Option<CacheUnit>,

    prologue: Vec<Instruction>,
    fwd: Vec<BasicBlock>,
    final_label: BTreeMap<String, String>,
    edge_override: BTreeMap<(String, String), String>,
    rev: Vec<BasicBlock>,
    loop_rt: BTreeMap<String, LoopRt>,
    rev_label: BTreeMap<String, String>,

    cfg: Cfg,
    dom: DomTree,
    loops: LoopForest,
    ret_blocks: Vec<usize>,
    defs: BTreeMap<String, (usize, usize)>,
}

fn vop(name: &str) -> Operand {
    Operand::Value(name.to_string())
}

impl<'s, 'a> Builder<'s, 'a> {
    fn new(
        ctx: &'s mut SynthContext<'a>,
        f: &IrFunction,
        spec: ActivitySpec,
        act: ActivityInfo,
        plan: TapePlan,
        shape: Shape,
    ) -> Result<Builder<'s, 'a>, SynthError> {
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
        let mut used: BTreeSet<String> = BTreeSet::new();
        for p in &f.params {
            used.insert(p.name.clone());
        }
        for b in &f.blocks {
            used.insert(b.name.clone());
            for i in &b.instrs {
                if let Some(r) = &i.result {
                    used.insert(r.clone());
                }
            }
        }
        let new_name = match shape {
            Shape::Combined => grad_name(&f.name),
            Shape::Augmented => aug_name(&f.name, &spec),
            Shape::Reverse => rev_name(&f.name, &spec),
        };
        Ok(Builder {
            ctx,
            primal: f.clone(),
            spec,
            act,
            plan,
            shape,
            new_name,
            used,
            counter: 0,
            params: Vec::new(),
            shadow_base: BTreeMap::new(),
            dslot: BTreeMap::new(),
            units: BTreeMap::new(),
            tape_units: BTreeMap::new(),
            shadow_units: BTreeMap::new(),
            free_epilogue: Vec::new(),
            freed_allocs: BTreeSet::new(),
            call_tape_val: BTreeMap::new(),
            call_tape_live: BTreeMap::new(),
            latch_incs: Vec::new(),
            blob_size: 0,
            blob_inits: Vec::new(),
            seed: Operand::ConstFloat(1.0),
            deriv_out: None,
            blob_val: None,
            exit_unit: None,
            ctrl_unit: None,
            prologue: Vec::new(),
            fwd: Vec::new(),
            final_label: BTreeMap::new(),
            edge_override: BTreeMap::new(),
            rev: Vec::new(),
            loop_rt: BTreeMap::new(),
            rev_label: BTreeMap::new(),
            cfg,
            dom,
            loops,
            ret_blocks,
            defs,
        })
    }

    fn fresh(&mut self, base: &str) -> String {
        let mut name = base.to_string();
        while self.used.contains(&name) {
            self.counter += 1;
            name = format!("{base}.{}", self.counter);
        }
        self.used.insert(name.clone());
        name
    }

    fn err(&self, what: impl Into<String>) -> SynthError {
        SynthError::UnsupportedConstruct {
            function: self.primal.name.clone(),
            what: what.into(),
        }
    }

    fn param_ty(&self, v: &str) -> Option<IrType> {
        self.primal
            .params
            .iter()
            .find(|p| p.name == v)
            .map(|p| p.ty)
    }

    fn value_ty(&self, v: &str) -> Option<IrType> {
        self.param_ty(v).or_else(|| {
            self.defs
                .get(v)
                .and_then(|(bi, ii)| self.primal.blocks[*bi].instrs[*ii].result_type())
        })
    }

    fn operand_ty(&self, op: &Operand) -> Option<IrType> {
        match op {
            Operand::Value(v) => self.value_ty(v),
            Operand::ConstFloat(_) => Some(IrType::F64),
            Operand::ConstInt(_) => Some(IrType::I64),
            Operand::Null | Operand::Global(_) => Some(IrType::Ptr),
            Operand::Token(_) => None,
        }
    }

    fn def_of(&self, v: &str) -> Option<&Instruction> {
        let (bi, ii) = self.defs.get(v)?;
        Some(&self.primal.blocks[*bi].instrs[*ii])
    }

    fn is_active(&self, v: &str) -> bool {
        self.act.is_active_value(v)
    }

    fn token_of(&self, param: &str) -> Option<ActivityToken> {
        self.primal
            .params
            .iter()
            .zip(&self.spec.params)
            .find(|(p, _)| p.name == param)
            .map(|(_, t)| *t)
    }

    // ----- signature -----

    fn build_signature(&mut self) {
        let mut params = Vec::new();
        let pairs: Vec<(Param, ActivityToken)> = self
            .primal
            .params
            .iter()
            .cloned()
            .zip(self.spec.params.clone())
            .collect();
        for (p, tok) in pairs {
            let pname = p.name.clone();
            params.push(p);
            if tok.is_dup() {
                let sname = self.fresh(&format!("d_{pname}"));
                self.shadow_base.insert(pname, vop(&sname));
                params.push(Param {
                    name: sname,
                    ty: IrType::Ptr,
                    noalias: false,
                    readonly: false,
                });
            }
        }
        let seed = has_seed_param(&self.primal, &self.spec);
        match self.shape {
            Shape::Combined | Shape::Reverse => {
                if seed {
                    let name = self.fresh("d_ret");
                    self.seed = vop(&name);
                    params.push(Param {
                        name,
                        ty: self.primal.return_type.unwrap(),
                        noalias: false,
                        readonly: false,
                    });
                }
                if self.shape == Shape::Reverse {
                    let name = self.fresh("tape_in");
                    params.push(Param {
                        name,
                        ty: IrType::Ptr,
                        noalias: false,
                        readonly: false,
                    });
                }
                if active_scalar_count(&self.spec) >= 2 {
                    let name = self.fresh("d_args_out");
                    self.deriv_out = Some(name.clone());
                    params.push(Param {
                        name,
                        ty: IrType::Ptr,
                        noalias: false,
                        readonly: false,
                    });
                }
            }
            Shape::Augmented => {
                let name = self.fresh("tape_out");
                params.push(Param {
                    name,
                    ty: IrType::Ptr,
                    noalias: false,
                    readonly: false,
                });
            }
        }
        self.params = params;
    }

    fn tape_in_param(&self) -> String {
        self.params
            .iter()
            .find(|p| p.name.starts_with("tape_in"))
            .map(|p| p.name.clone())
            .expect("reverse shape has a tape parameter")
    }

    fn tape_out_param(&self) -> String {
        self.params
            .iter()
            .find(|p| p.name.starts_with("tape_out"))
            .map(|p| p.name.clone())
            .expect("augmented shape has a tape parameter")
    }

    // ----- cache units -----

    fn loop_plan(&self, header: &str) -> &LoopPlan {
        &self.plan.loop_plans[header]
    }

    fn nest_of_block(&self, block: &str) -> Vec<String> {
        let Some(&bi) = self.cfg.index.get(block) else { return Vec::new() };
        self.loops
            .nest_of(bi)
            .into_iter()
            .map(|li| self.primal.blocks[self.loops.loops[li].header].name.clone())
            .collect()
    }

    fn make_unit(&mut self, label: &str, kind: CacheKind, ty: IrType, def_block: &str) -> CacheUnit {
        let nest = self.nest_of_block(def_block);
        let header_def = nest.last().map(|h| h == def_block).unwrap_or(false);
        let base = if self.shape == Shape::Combined {
            let name = self.fresh(&format!("cache_{label}"));
            match kind {
                CacheKind::ScalarSlot => {
                    self.prologue.push(alloc_inst(&name, Operand::ConstInt(8), true));
                }
                CacheKind::FixedArray { len } => {
                    self.prologue
                        .push(alloc_inst(&name, Operand::ConstInt(8 * len as i64), true));
                }
                CacheKind::Growable => {
                    self.prologue.push(alloc_inst(&name, Operand::ConstInt(24), true));
                    let data = self.fresh(&format!("cache_{label}.data"));
                    self.prologue
                        .push(alloc_inst(&data, Operand::ConstInt(64), true));
                    self.prologue.push(store_inst(IrType::Ptr, vop(&data), vop(&name)));
                    let capp = self.fresh(&format!("cache_{label}.capp"));
                    self.prologue
                        .push(ptradd_inst(&capp, vop(&name), Operand::ConstInt(8)));
                    self.prologue
                        .push(store_inst(IrType::I64, Operand::ConstInt(8), vop(&capp)));
                }
            }
            UnitBase::Direct(name)
        } else {
            let off = self.blob_size;
            let slots = match kind {
                CacheKind::Growable => 3,
                _ => 1,
            };
            self.blob_size += 8 * slots;
            self.blob_inits.push((off, kind, ty));
            UnitBase::Blob(off)
        };
        CacheUnit {
            kind,
            ty,
            base,
            nest,
            header_def,
        }
    }

    /// Units for every cached value, call tape, shadow allocation and
    /// deferred free. Creation order is deterministic so the augmented
    /// and reverse halves of a split pair agree on blob offsets.
    fn build_units(&mut self) -> Result<(), SynthError> {
        let cached: Vec<(String, CacheKind)> = self
            .plan
            .cached
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        for (v, kind) in cached {
            let ty = self
                .value_ty(&v)
                .ok_or_else(|| self.err(format!("cached value %{v} has no type")))?;
            let (bi, _) = self.defs[&v];
            let block = self.primal.blocks[bi].name.clone();
            let unit = self.make_unit(&v, kind, ty, &block);
            self.units.insert(v.clone(), unit);
        }
        // Reuse: alias the unit of the target.
        for (from, to) in self.plan.reuse.clone() {
            if let Some(u) = self.units.get(&to).cloned() {
                self.units.insert(from, u);
            }
        }
        // Call tapes and shadow-allocation pointers, in block order.
        let primal = self.primal.clone();
        for (bi, b) in primal.blocks.iter().enumerate() {
            for (ii, inst) in b.instrs.iter().enumerate() {
                let iid = instr_id(&b.name, ii, inst);
                if let Some(kind) = self.plan.call_tapes.get(&iid).copied() {
                    let live = self.call_tape_is_live(bi);
                    self.call_tape_live.insert(iid.clone(), live);
                    if !live {
                        // Custom pairs carry an f64 payload, synthesized
                        // pairs a blob pointer.
                        let tape_ty = match inst.callee.as_deref() {
                            Some(c) if self.ctx.base.custom_adjoints.contains_key(c) => {
                                IrType::F64
                            }
                            _ => IrType::Ptr,
                        };
                        let unit = self.make_unit(
                            &format!("tape.{}", sanitize(&iid)),
                            kind,
                            tape_ty,
                            &b.name,
                        );
                        self.tape_units.insert(iid, unit);
                    }
                    continue;
                }
                if inst.opcode != Opcode::Alloc {
                    continue;
                }
                let res = inst.result.clone().unwrap();
                if !self.alloc_has_shadow(&res) {
                    continue;
                }
                if !self.call_tape_is_live(bi) {
                    let kind = self.plan_kind_for_block(&b.name)?;
                    let unit =
                        self.make_unit(&format!("shadow.{res}"), kind, IrType::Ptr, &b.name);
                    self.shadow_units.insert(res, unit);
                }
            }
        }
        // Frees of foreign pointers.
        let aa = AliasAnalysis::for_function(&self.primal, None);
        for (bi, b) in primal.blocks.iter().enumerate() {
            for (ii, inst) in b.instrs.iter().enumerate() {
                if inst.opcode != Opcode::Free {
                    continue;
                }
                let info = aa.info_of(&inst.operands[0]);
                let all_local = !info.unknown
                    && !info.roots.is_empty()
                    && info.roots.iter().all(|r| {
                        matches!(r, crate::analysis::alias::Root::Alloc(_))
                    });
                if all_local {
                    for r in info.roots {
                        if let crate::analysis::alias::Root::Alloc(a) = r {
                            self.freed_allocs.insert(a);
                        }
                    }
                } else {
                    if self.loops.in_any_loop(bi) {
                        return Err(self.err(
                            "free of foreign memory inside a loop cannot be deferred",
                        ));
                    }
                    let iid = instr_id(&b.name, ii, inst);
                    let unit = self.make_unit(
                        &format!("free.{}", sanitize(&iid)),
                        CacheKind::ScalarSlot,
                        IrType::Ptr,
                        &b.name,
                    );
                    self.free_epilogue.push((iid, unit));
                }
            }
        }
        // Exit dispatch for split pairs with several returns.
        if self.shape != Shape::Combined && self.ret_blocks.len() > 1 {
            let entry = self.primal.blocks[0].name.clone();
            let unit = self.make_unit("exitid", CacheKind::ScalarSlot, IrType::I64, &entry);
            self.exit_unit = Some(unit);
        }
        Ok(())
    }

    fn plan_kind_for_block(&self, block: &str) -> Result<CacheKind, SynthError> {
        let nest = self.nest_of_block(block);
        if nest.is_empty() {
            return Ok(CacheKind::ScalarSlot);
        }
        let mut total = 1u64;
        let mut all_static = true;
        for header in &nest {
            match self.loop_plan(header).trips {
                TripSource::Static(t) => {
                    total =
                        total.saturating_mul(t + u64::from(header == block));
                }
                _ => all_static = false,
            }
        }
        if all_static {
            Ok(CacheKind::FixedArray { len: total.max(1) })
        } else if nest.len() == 1 {
            Ok(CacheKind::Growable)
        } else {
            Err(self.err(
                "storage in a deep loop nest with runtime trip counts",
            ))
        }
    }

    fn alloc_has_shadow(&self, alloc: &str) -> bool {
        let root = crate::analysis::alias::Root::Alloc(alloc.to_string());
        self.act.tainted_sites.contains(&root) || self.act.demanded_sites.contains(&root)
    }

    fn free_targets_local_alloc(&self, inst: &Instruction) -> bool {
        let aa = AliasAnalysis::for_function(&self.primal, None);
        let info = aa.info_of(&inst.operands[0]);
        !info.unknown
            && !info.roots.is_empty()
            && info
                .roots
                .iter()
                .all(|r| matches!(r, crate::analysis::alias::Root::Alloc(_)))
    }

    /// Base pointer of a unit, emitted into the given sink.
    fn unit_base_ptr(
        &mut self,
        unit: &CacheUnit,
        sink: &mut Vec<Instruction>,
    ) -> Operand {
        match &unit.base {
            UnitBase::Direct(name) => vop(name),
            UnitBase::Blob(off) => {
                let tape = match self.shape {
                    Shape::Augmented => vop(self.blob_val.as_ref().expect("blob allocated")),
                    Shape::Reverse => vop(&self.tape_in_param()),
                    Shape::Combined => unreachable!("combined mode uses direct units"),
                };
                if *off == 0 {
                    tape
                } else {
                    let p = self.fresh("tape.off");
                    sink.push(ptradd_inst(&p, tape, Operand::ConstInt(*off as i64)));
                    vop(&p)
                }
            }
        }
    }
}

// Compact instruction constructors.

fn alloc_inst(result: &str, size: Operand, cache: bool) -> Instruction {
    let mut i = Instruction::new(Opcode::Alloc);
    i.result = Some(result.to_string());
    i.ty = Some(IrType::Ptr);
    i.operands.push(size);
    i.attrs.cache = cache;
    i
}

fn shadow_alloc_inst(result: &str, size: Operand) -> Instruction {
    let mut i = Instruction::new(Opcode::Alloc);
    i.result = Some(result.to_string());
    i.ty = Some(IrType::Ptr);
    i.operands.push(size);
    i.attrs.shadow = true;
    i
}

fn store_inst(ty: IrType, value: Operand, addr: Operand) -> Instruction {
    let mut i = Instruction::new(Opcode::Store);
    i.ty = Some(ty);
    i.operands.push(value);
    i.operands.push(addr);
    i
}

fn load_inst(result: &str, ty: IrType, addr: Operand) -> Instruction {
    let mut i = Instruction::new(Opcode::Load);
    i.result = Some(result.to_string());
    i.ty = Some(ty);
    i.operands.push(addr);
    i
}

fn ptradd_inst(result: &str, base: Operand, off: Operand) -> Instruction {
    let mut i = Instruction::new(Opcode::PtrAdd);
    i.result = Some(result.to_string());
    i.ty = Some(IrType::Ptr);
    i.operands.push(base);
    i.operands.push(off);
    i
}

fn bin_inst(result: &str, op: Opcode, ty: IrType, a: Operand, b: Operand) -> Instruction {
    let mut i = Instruction::new(op);
    i.result = Some(result.to_string());
    i.ty = Some(ty);
    i.operands.push(a);
    i.operands.push(b);
    i
}

fn un_inst(result: &str, op: Opcode, ty: IrType, a: Operand) -> Instruction {
    let mut i = Instruction::new(op);
    i.result = Some(result.to_string());
    i.ty = Some(ty);
    i.operands.push(a);
    i
}

fn br_inst(target: &str) -> Instruction {
    let mut i = Instruction::new(Opcode::Br);
    i.targets.push(target.to_string());
    i
}

fn condbr_inst(cond: Operand, t: &str, f: &str) -> Instruction {
    let mut i = Instruction::new(Opcode::CondBr);
    i.operands.push(cond);
    i.targets.push(t.to_string());
    i.targets.push(f.to_string());
    i
}

fn icmp_inst(result: &str, pred: IntPred, ty: IrType, a: Operand, b: Operand) -> Instruction {
    let mut i = Instruction::new(Opcode::ICmp(pred));
    i.result = Some(result.to_string());
    i.ty = Some(ty);
    i.operands.push(a);
    i.operands.push(b);
    i
}

fn select_inst(result: &str, ty: IrType, c: Operand, a: Operand, b: Operand) -> Instruction {
    let mut i = Instruction::new(Opcode::Select);
    i.result = Some(result.to_string());
    i.ty = Some(ty);
    i.operands.push(c);
    i.operands.push(a);
    i.operands.push(b);
    i
}

fn free_inst(p: Operand) -> Instruction {
    let mut i = Instruction::new(Opcode::Free);
    i.operands.push(p);
    i
}

fn memcpy_inst(dst: Operand, src: Operand, len: Operand) -> Instruction {
    let mut i = Instruction::new(Opcode::Memcpy);
    i.operands.push(dst);
    i.operands.push(src);
    i.operands.push(len);
    i
}

fn call_inst(result: Option<String>, ty: Option<IrType>, callee: &str, args: Vec<Operand>) -> Instruction {
    let mut i = Instruction::new(Opcode::Call);
    i.result = result;
    i.ty = ty;
    i.callee = Some(callee.to_string());
    i.operands = args;
    i
}

fn callind_inst(result: Option<String>, ty: Option<IrType>, callee: Operand, args: Vec<Operand>) -> Instruction {
    let mut i = Instruction::new(Opcode::CallInd);
    i.result = result;
    i.ty = ty;
    i.operands.push(callee);
    i.operands.extend(args);
    i
}

fn ret_inst(ty: Option<IrType>, v: Option<Operand>) -> Instruction {
    let mut i = Instruction::new(Opcode::Ret);
    i.ty = ty;
    if let Some(v) = v {
        i.operands.push(v);
    }
    i
}

// ---------------------------------------------------------------------
// Forward section
// ---------------------------------------------------------------------

/// Forward emission of one primal block, split as needed around grow
/// diamonds.
struct FwdEmit {
    parts: Vec<BasicBlock>,
    cur: BasicBlock,
}

impl FwdEmit {
    fn new(name: String) -> FwdEmit {
        FwdEmit {
            parts: Vec::new(),
            cur: BasicBlock::new(name),
        }
    }

    fn push(&mut self, inst: Instruction) {
        self.cur.instrs.push(inst);
    }

    /// Ends the current part with `term` and starts a fresh part.
    fn split(&mut self, term: Instruction, next_name: String) {
        let mut done = BasicBlock::new(next_name.clone());
        std::mem::swap(&mut done, &mut self.cur);
        done.instrs.push(term);
        self.parts.push(done);
    }

    fn finish(mut self) -> (Vec<BasicBlock>, String) {
        let last = self.cur.name.clone();
        self.parts.push(self.cur);
        (self.parts, last)
    }
}

impl<'s, 'a> Builder<'s, 'a> {
    /// Normalized iteration index of loop `header` at a forward point
    /// inside the loop: IV minus its initial value, or the injected trip
    /// counter for recorded loops.
    fn fwd_loop_index(&mut self, header: &str, em: &mut FwdEmit) -> Operand {
        let lp = self.loop_plan(header).clone();
        if let Some(iv) = &lp.iv {
            match &iv.init {
                Operand::ConstInt(0) => vop(&iv.phi),
                init => {
                    let idx = self.fresh("idx");
                    em.push(bin_inst(
                        &idx,
                        Opcode::ISub,
                        IrType::I64,
                        vop(&iv.phi),
                        init.clone(),
                    ));
                    vop(&idx)
                }
            }
        } else {
            vop(&self.trip_counter_name(header))
        }
    }

    fn trip_counter_name(&self, header: &str) -> String {
        format!("trip.{header}")
    }

    /// Forward flat cache index for a value defined in `def_block`.
    fn fwd_cache_index(
        &mut self,
        unit: &CacheUnit,
        em: &mut FwdEmit,
    ) -> Result<Operand, SynthError> {
        let mut terms: Vec<(Operand, u64)> = Vec::new();
        let nest = unit.nest.clone();
        for (level, header) in nest.iter().enumerate() {
            let cnt = self.fwd_loop_index(header, em);
            // Stride: product of inner level sizes (static by planning).
            let mut stride = 1u64;
            for inner in &nest[level + 1..] {
                let lp = self.loop_plan(inner);
                match lp.trips {
                    TripSource::Static(t) => {
                        let inner_is_innermost = inner == nest.last().unwrap();
                        stride *= t + u64::from(inner_is_innermost && unit.header_def);
                    }
                    _ => {
                        return Err(self.err(
                            "multi-level cache with non-static inner trip count",
                        ))
                    }
                }
            }
            terms.push((cnt, stride));
        }
        self.combine_index_terms(terms, |b, i| b.push_fwd(em, i))
    }

    fn push_fwd(&mut self, em: &mut FwdEmit, inst: Instruction) {
        em.push(inst);
    }

    /// Emits `sum of cnt*stride` into a sink via the given push fn.
    fn combine_index_terms(
        &mut self,
        terms: Vec<(Operand, u64)>,
        mut push: impl FnMut(&mut Self, Instruction),
    ) -> Result<Operand, SynthError> {
        let mut acc: Option<Operand> = None;
        for (cnt, stride) in terms {
            let term = if stride == 1 {
                cnt
            } else {
                let t = self.fresh("idx.mul");
                let inst = bin_inst(
                    &t,
                    Opcode::IMul,
                    IrType::I64,
                    cnt,
                    Operand::ConstInt(stride as i64),
                );
                push(self, inst);
                vop(&t)
            };
            acc = Some(match acc {
                None => term,
                Some(a) => {
                    let s = self.fresh("idx.add");
                    let inst = bin_inst(&s, Opcode::IAdd, IrType::I64, a, term);
                    push(self, inst);
                    vop(&s)
                }
            });
        }
        Ok(acc.unwrap_or(Operand::ConstInt(0)))
    }

    /// Emits the forward-side cache write of `value` after its definition.
    fn emit_cache_write(
        &mut self,
        value: &str,
        em: &mut FwdEmit,
        block: &str,
    ) -> Result<(), SynthError> {
        let Some(unit) = self.units.get(value).cloned() else {
            return Ok(());
        };
        if self.plan.reuse.contains_key(value) {
            return Ok(()); // the equivalent value's write covers it
        }
        self.write_operand_to_unit(vop(value), unit.ty, &unit, em, block)
    }

    fn write_value_to_unit(
        &mut self,
        value: &str,
        ty: IrType,
        unit: &CacheUnit,
        em: &mut FwdEmit,
    ) -> Result<(), SynthError> {
        let block = em.cur.name.clone();
        self.write_operand_to_unit(vop(value), ty, unit, em, &block)
    }

    fn write_operand_to_unit(
        &mut self,
        value: Operand,
        ty: IrType,
        unit: &CacheUnit,
        em: &mut FwdEmit,
        block: &str,
    ) -> Result<(), SynthError> {
        match unit.kind {
            CacheKind::ScalarSlot => {
                let base = self.unit_base_ptr(unit, &mut em.cur.instrs);
                em.push(cache_store(ty, value, base));
            }
            CacheKind::FixedArray { .. } => {
                let idx = self.fwd_cache_index(unit, em)?;
                let base = self.unit_base_ptr(unit, &mut em.cur.instrs);
                let off = self.fresh("coff");
                em.push(bin_inst(
                    &off,
                    Opcode::IMul,
                    IrType::I64,
                    idx,
                    Operand::ConstInt(8),
                ));
                let p = self.fresh("cptr");
                em.push(ptradd_inst(&p, base, vop(&off)));
                em.push(cache_store(ty, value, vop(&p)));
            }
            CacheKind::Growable => {
                let idx = self.fwd_cache_index(unit, em)?;
                let hdr = self.unit_base_ptr(unit, &mut em.cur.instrs);
                self.emit_growable_write(em, hdr, idx, ty, value, block)?;
            }
        }
        Ok(())
    }

    /// Indexed write into a doubling buffer; splits the current block
    /// around the grow path.
    fn emit_growable_write(
        &mut self,
        em: &mut FwdEmit,
        hdr: Operand,
        idx: Operand,
        ty: IrType,
        value: Operand,
        block: &str,
    ) -> Result<(), SynthError> {
        let capp = self.fresh("gw.capp");
        em.push(ptradd_inst(&capp, hdr.clone(), Operand::ConstInt(8)));
        let cap = self.fresh("gw.cap");
        em.push(load_inst(&cap, IrType::I64, vop(&capp)));
        let fits = self.fresh("gw.fits");
        em.push(icmp_inst(
            &fits,
            IntPred::Sgt,
            IrType::I64,
            vop(&cap),
            idx.clone(),
        ));
        let grow_name = self.fresh_block(&format!("{block}.grow"));
        let cont_name = self.fresh_block(&format!("{block}.gc"));
        em.split(condbr_inst(vop(&fits), &cont_name, &grow_name), cont_name.clone());

        // Grow block: newcap = max(2*cap, idx+1); reallocate and copy.
        let mut g = BasicBlock::new(grow_name.clone());
        let dbl = self.fresh("gw.dbl");
        g.instrs.push(bin_inst(
            &dbl,
            Opcode::IMul,
            IrType::I64,
            vop(&cap),
            Operand::ConstInt(2),
        ));
        let need = self.fresh("gw.need");
        g.instrs.push(bin_inst(
            &need,
            Opcode::IAdd,
            IrType::I64,
            idx.clone(),
            Operand::ConstInt(1),
        ));
        let big = self.fresh("gw.big");
        g.instrs.push(icmp_inst(
            &big,
            IntPred::Sgt,
            IrType::I64,
            vop(&dbl),
            vop(&need),
        ));
        let newcap = self.fresh("gw.newcap");
        g.instrs.push(select_inst(
            &newcap,
            IrType::I64,
            vop(&big),
            vop(&dbl),
            vop(&need),
        ));
        let size = self.fresh("gw.size");
        g.instrs.push(bin_inst(
            &size,
            Opcode::IMul,
            IrType::I64,
            vop(&newcap),
            Operand::ConstInt(8),
        ));
        let nd = self.fresh("gw.newdata");
        g.instrs.push(alloc_inst(&nd, vop(&size), true));
        let cntp = self.fresh("gw.cntp");
        g.instrs
            .push(ptradd_inst(&cntp, hdr.clone(), Operand::ConstInt(16)));
        let cnt = self.fresh("gw.cnt");
        g.instrs.push(load_inst(&cnt, IrType::I64, vop(&cntp)));
        let cbytes = self.fresh("gw.cbytes");
        g.instrs.push(bin_inst(
            &cbytes,
            Opcode::IMul,
            IrType::I64,
            vop(&cnt),
            Operand::ConstInt(8),
        ));
        let od = self.fresh("gw.olddata");
        g.instrs.push(load_inst(&od, IrType::Ptr, hdr.clone()));
        g.instrs.push(memcpy_inst(vop(&nd), vop(&od), vop(&cbytes)));
        g.instrs.push(free_inst(vop(&od)));
        g.instrs.push(store_inst(IrType::Ptr, vop(&nd), hdr.clone()));
        g.instrs
            .push(store_inst(IrType::I64, vop(&newcap), vop(&capp)));
        g.instrs.push(br_inst(&cont_name));
        em.parts.push(g);

        // Continuation: the write itself plus the count update.
        let data = self.fresh("gw.data");
        em.push(load_inst(&data, IrType::Ptr, hdr.clone()));
        let off = self.fresh("gw.off");
        em.push(bin_inst(
            &off,
            Opcode::IMul,
            IrType::I64,
            idx.clone(),
            Operand::ConstInt(8),
        ));
        let p = self.fresh("gw.ptr");
        em.push(ptradd_inst(&p, vop(&data), vop(&off)));
        em.push(cache_store(ty, value, vop(&p)));
        let newcnt = self.fresh("gw.newcnt");
        em.push(bin_inst(
            &newcnt,
            Opcode::IAdd,
            IrType::I64,
            idx,
            Operand::ConstInt(1),
        ));
        let cntp2 = self.fresh("gw.cntp");
        em.push(ptradd_inst(&cntp2, hdr, Operand::ConstInt(16)));
        em.push(store_inst(IrType::I64, vop(&newcnt), vop(&cntp2)));
        Ok(())
    }

    fn fresh_block(&mut self, base: &str) -> String {
        self.fresh(base)
    }

    /// Push onto the runtime control stack (i64 payload).
    fn emit_ctrl_push(
        &mut self,
        em: &mut FwdEmit,
        value: Operand,
        block: &str,
    ) -> Result<(), SynthError> {
        let unit = self.ctrl_unit.clone().expect("control stack allocated");
        let hdr = self.unit_base_ptr(&unit, &mut em.cur.instrs);
        let cntp = self.fresh("cs.cntp");
        em.push(ptradd_inst(&cntp, hdr.clone(), Operand::ConstInt(16)));
        let cnt = self.fresh("cs.cnt");
        em.push(load_inst(&cnt, IrType::I64, vop(&cntp)));
        self.emit_growable_write(em, hdr, vop(&cnt), IrType::I64, value, block)?;
        Ok(())
    }

    /// Forward shadow address of a pointer operand; everything is in
    /// scope, so the derivation chain can be cloned directly.
    fn fwd_shadow_addr(
        &mut self,
        op: &Operand,
        sink: &mut Vec<Instruction>,
    ) -> Result<Operand, SynthError> {
        match op {
            Operand::Null => Ok(Operand::Null),
            Operand::Global(g) => {
                if self.ctx.base.function(g).is_some() {
                    let pair = self.ctx.ensure_shadow_pair(g)?;
                    Ok(Operand::Global(pair))
                } else {
                    Err(self.err(format!(
                        "shadow of constant global @{g} requested"
                    )))
                }
            }
            Operand::Value(v) => {
                if let Some(s) = self.shadow_base.get(v) {
                    return Ok(s.clone());
                }
                let def = self
                    .def_of(v)
                    .cloned()
                    .ok_or_else(|| self.err(format!("no shadow for pointer %{v}")))?;
                match def.opcode {
                    Opcode::PtrAdd => {
                        let base = self.fwd_shadow_addr(&def.operands[0], sink)?;
                        let name = self.fresh(&format!("{v}.shadow"));
                        sink.push(ptradd_inst(&name, base, def.operands[1].clone()));
                        Ok(vop(&name))
                    }
                    _ => Err(self.err(format!(
                        "shadow of pointer %{v} (defined by {}) is not derivable",
                        def.opcode.mnemonic()
                    ))),
                }
            }
            _ => Err(self.err("shadow of a non-pointer operand requested")),
        }
    }

    /// Activity pattern of a direct call site, defining which callee
    /// pair to use.
    fn call_site_spec(&mut self, callee: &IrFunction, inst: &Instruction) -> ActivitySpec {
        let args = if inst.opcode == Opcode::CallInd {
            &inst.operands[1..]
        } else {
            &inst.operands[..]
        };
        let aa = AliasAnalysis::for_function(&self.primal, None);
        let params = callee
            .params
            .iter()
            .zip(args)
            .map(|(p, arg)| match p.ty {
                IrType::Ptr => {
                    let func_ref = matches!(arg, Operand::Global(g) if self.ctx.base.function(g).is_some());
                    let info = aa.info_of(arg);
                    let tainted = (info.unknown && !self.act.tainted_sites.is_empty())
                        || info.roots.iter().any(|r| self.act.tainted_sites.contains(r))
                        || info.roots.iter().any(|r| self.act.demanded_sites.contains(r));
                    let shadowed = arg
                        .as_value()
                        .map(|v| self.shadow_base.contains_key(v))
                        .unwrap_or(false);
                    if func_ref || tainted || shadowed {
                        ActivityToken::Dup
                    } else {
                        ActivityToken::Const
                    }
                }
                t if t.is_float() => {
                    let tainted = arg
                        .as_value()
                        .map(|v| self.act.tainted_values.contains(v))
                        .unwrap_or(false);
                    if tainted {
                        ActivityToken::Active
                    } else {
                        ActivityToken::Const
                    }
                }
                _ => ActivityToken::Const,
            })
            .collect();
        let ret = match callee.return_type {
            Some(t) if t.is_float() => RetActivity::Active,
            _ => RetActivity::Const,
        };
        ActivitySpec::new(params, ret)
    }

    /// Builds the interleaved argument list for an aug/rev call.
    fn pair_call_args(
        &mut self,
        pair_spec: &ActivitySpec,
        args: &[Operand],
        sink: &mut Vec<Instruction>,
    ) -> Result<Vec<Operand>, SynthError> {
        let mut out = Vec::new();
        for (arg, tok) in args.iter().zip(&pair_spec.params) {
            out.push(arg.clone());
            if tok.is_dup() {
                let shadow = self
                    .fwd_shadow_addr(arg, sink)
                    .unwrap_or(Operand::Null);
                out.push(shadow);
            }
        }
        Ok(out)
    }

    /// Whether the tape value of a call site is still live SSA at
    /// reverse time (combined mode, defined outside loops, dominating
    /// every exit).
    fn call_tape_is_live(&self, block_idx: usize) -> bool {
        self.shape == Shape::Combined
            && !self.loops.in_any_loop(block_idx)
            && self.ret_blocks.iter().all(|&r| self.dom.dominates(block_idx, r))
    }

    /// Builds the forward section of the combined/augmented function.
    fn build_forward(&mut self) -> Result<(), SynthError> {
        let primal = self.primal.clone();
        for (bi, pb) in primal.blocks.iter().enumerate() {
            let mut em = FwdEmit::new(pb.name.clone());
            let is_recorded_header = self.plan.loops.contains(&pb.name);
            let join_plan = self.plan.joins.get(&pb.name).cloned();

            let mut pending_predid: Option<String> = None;
            // Primal phis first, then injected phis.
            let mut idx = 0usize;
            while idx < pb.instrs.len() && pb.instrs[idx].opcode == Opcode::Phi {
                em.push(pb.instrs[idx].clone());
                idx += 1;
            }
            if is_recorded_header {
                let lp = self.loop_plan(&pb.name).clone();
                let trip = self.trip_counter_name(&pb.name);
                self.used.insert(trip.clone());
                let next = self.fresh(&format!("{trip}.next"));
                let mut phi = Instruction::new(Opcode::Phi);
                phi.result = Some(trip.clone());
                phi.ty = Some(IrType::I64);
                phi.operands.push(Operand::ConstInt(0));
                phi.targets.push(lp.entering.clone());
                phi.operands.push(vop(&next));
                phi.targets.push(lp.latch.clone());
                em.push(phi);
                // The increment belongs on the backedge path.
                self.latch_incs
                    .push((lp.latch.clone(), trip.clone(), next));
            }
            if let Some(JoinPlan::PredRecord { preds }) = &join_plan {
                let pid = self.fresh(&format!("predid.{}", pb.name));
                let mut phi = Instruction::new(Opcode::Phi);
                phi.result = Some(pid.clone());
                phi.ty = Some(IrType::I64);
                for (k, p) in preds.iter().enumerate() {
                    phi.operands.push(Operand::ConstInt(k as i64));
                    phi.targets.push(p.clone());
                }
                em.push(phi);
                pending_predid = Some(pid);
            }
            // Cache writes for phi results.
            for inst in pb.instrs.iter().take(idx) {
                if let Some(r) = &inst.result {
                    if self.units.contains_key(r) {
                        self.emit_cache_write(r, &mut em, &pb.name)?;
                    }
                }
            }
            if let Some(pid) = pending_predid {
                self.emit_ctrl_push(&mut em, vop(&pid), &pb.name)?;
            }

            for pos in idx..pb.instrs.len() {
                self.forward_instruction(&pb.instrs[pos], pos, &mut em, bi, &pb.name)?;
            }
            let (parts, last) = em.finish();
            self.final_label.insert(pb.name.clone(), last);
            self.fwd.extend(parts);
        }
        Ok(())
    }

    /// One primal instruction into the forward section.
    fn forward_instruction(
        &mut self,
        inst: &Instruction,
        pos: usize,
        em: &mut FwdEmit,
        block_idx: usize,
        block: &str,
    ) -> Result<(), SynthError> {
        let iid = instr_id(block, pos, inst);
        match inst.opcode {
            Opcode::Ret => {
                match self.shape {
                    Shape::Augmented => {
                        if let Some(unit) = self.exit_unit.clone() {
                            let exit_id = self
                                .ret_blocks
                                .iter()
                                .position(|&r| self.primal.blocks[r].name == block)
                                .unwrap_or(0);
                            let base = self.unit_base_ptr(&unit, &mut em.cur.instrs);
                            em.push(cache_store(
                                IrType::I64,
                                Operand::ConstInt(exit_id as i64),
                                base,
                            ));
                        }
                        em.push(inst.clone());
                    }
                    _ => {
                        em.push(br_inst(&format!("reverse_{block}")));
                    }
                }
                return Ok(());
            }
            Opcode::Br | Opcode::CondBr => {
                // Injected trip-counter increments go just before the
                // latch terminator.
                let incs: Vec<(String, String)> = self
                    .latch_incs
                    .iter()
                    .filter(|(l, _, _)| l == block)
                    .map(|(_, t, n)| (t.clone(), n.clone()))
                    .collect();
                for (trip, next) in incs {
                    em.push(bin_inst(
                        &next,
                        Opcode::IAdd,
                        IrType::I64,
                        vop(&trip),
                        Operand::ConstInt(1),
                    ));
                }
                let mut term = inst.clone();
                // Recorded-loop exits route through a trampoline that
                // pushes the final trip count.
                let recorded_exit = self
                    .plan
                    .loop_plans
                    .get(block)
                    .filter(|lp| matches!(lp.trips, TripSource::Recorded))
                    .cloned();
                if let Some(lp) = recorded_exit {
                    let tramp = self.fresh_block(&format!("{block}.exitpush"));
                    for t in &mut term.targets {
                        if *t == lp.exit_to {
                            *t = tramp.clone();
                        }
                    }
                    em.push(term);
                    // Build the trampoline as its own part.
                    let trip = self.trip_counter_name(block);
                    let mut tb = FwdEmit::new(tramp.clone());
                    self.emit_ctrl_push(&mut tb, vop(&trip), &tramp)?;
                    tb.push(br_inst(&lp.exit_to));
                    let (tparts, _) = tb.finish();
                    em.parts.extend(tparts);
                    self.edge_override
                        .insert((lp.exit_to.clone(), block.to_string()), tramp);
                    return Ok(());
                }
                em.push(term);
                return Ok(());
            }
            Opcode::Free => {
                // Deallocations are deferred: frees of local allocations
                // re-appear as the adjoint of the allocation; frees of
                // foreign memory move to the reverse epilogue.
                if !self.free_targets_local_alloc(inst) {
                    if let Some((_, unit)) = self
                        .free_epilogue
                        .iter()
                        .find(|(k, _)| k == &iid)
                        .cloned()
                    {
                        let base = self.unit_base_ptr(&unit, &mut em.cur.instrs);
                        em.push(cache_store(
                            IrType::Ptr,
                            inst.operands[0].clone(),
                            base,
                        ));
                    }
                }
                return Ok(());
            }
            Opcode::Alloc => {
                em.push(inst.clone());
                let res = inst.result.clone().unwrap();
                if self.alloc_has_shadow(&res) {
                    let sname = self.fresh(&format!("{res}.shadow"));
                    em.push(shadow_alloc_inst(&sname, inst.operands[0].clone()));
                    self.shadow_base.insert(res.clone(), vop(&sname));
                    // Persist the shadow pointer for the reverse pass.
                    if let Some(unit) = self.shadow_units.get(&res).cloned() {
                        let sval = sname.clone();
                        self.write_value_to_unit(&sval, IrType::Ptr, &unit, em)?;
                    }
                }
            }
            Opcode::Store => {
                let elide = self.should_elide_store(inst);
                if !elide {
                    em.push(inst.clone());
                }
                // Stores of pointers are duplicated into shadow memory so
                // the reverse pass can trace loaded pointers.
                if inst.ty == Some(IrType::Ptr) {
                    if let Ok(dst_shadow) =
                        self.fwd_shadow_addr(&inst.operands[1], &mut em.cur.instrs)
                    {
                        let val_shadow = self
                            .fwd_shadow_addr(&inst.operands[0], &mut em.cur.instrs)
                            .unwrap_or(Operand::Null);
                        em.push(store_inst(IrType::Ptr, val_shadow, dst_shadow));
                    }
                }
            }
            Opcode::Load => {
                em.push(inst.clone());
                // Loaded pointers get eager shadows from shadow memory.
                if inst.ty == Some(IrType::Ptr) {
                    if let Ok(src_shadow) =
                        self.fwd_shadow_addr(&inst.operands[0], &mut em.cur.instrs)
                    {
                        let res = inst.result.clone().unwrap();
                        let sname = self.fresh(&format!("{res}.shadow"));
                        em.push(load_inst(&sname, IrType::Ptr, src_shadow));
                        self.shadow_base.insert(res, vop(&sname));
                    }
                }
            }
            Opcode::Call if inst.callee.as_deref() != Some(AUTODIFF_INTRINSIC) => {
                if self.act.is_active_instr(&iid) {
                    self.forward_active_call(inst, &iid, em, block_idx)?;
                    return Ok(());
                }
                em.push(inst.clone());
            }
            Opcode::CallInd => {
                if self.act.is_active_instr(&iid) {
                    self.forward_active_call(inst, &iid, em, block_idx)?;
                    return Ok(());
                }
                em.push(inst.clone());
            }
            _ => {
                em.push(inst.clone());
            }
        }
        // Cache write after definition.
        if let Some(r) = inst.result.clone() {
            if self.units.contains_key(&r) {
                self.emit_cache_write(&r, em, block)?;
            }
        }
        Ok(())
    }

    fn should_elide_store(&self, inst: &Instruction) -> bool {
        if inst.opcode != Opcode::Store {
            return false;
        }
        let aa = AliasAnalysis::for_function(&self.primal, None);
        let info = aa.info_of(&inst.operands[1]);
        if info.unknown || info.roots.is_empty() {
            return false;
        }
        let all_noneed = info.roots.iter().all(|r| match r {
            crate::analysis::alias::Root::Param(p) => {
                self.token_of(p) == Some(ActivityToken::DupNoNeed)
            }
            _ => false,
        });
        if !all_noneed {
            return false;
        }
        // Elision is only sound if nothing loads from that region.
        let any_load_aliases = self.primal.instrs().any(|i| {
            i.opcode == Opcode::Load
                && aa.alias(
                    &i.operands[0],
                    i.ty.map(|t| t.byte_width()),
                    &inst.operands[1],
                    inst.ty.map(|t| t.byte_width()),
                ) == crate::analysis::AliasVerdict::MayAlias
        });
        !any_load_aliases
    }

    /// Rewrites an active call into its augmented form and records the
    /// tape pointer.
    fn forward_active_call(
        &mut self,
        inst: &Instruction,
        iid: &str,
        em: &mut FwdEmit,
        block_idx: usize,
    ) -> Result<(), SynthError> {
        let indirect = inst.opcode == Opcode::CallInd;
        let (callee_op, args): (Option<Operand>, Vec<Operand>) = if indirect {
            (Some(inst.operands[0].clone()), inst.operands[1..].to_vec())
        } else {
            (None, inst.operands.clone())
        };

        let (aug_target, pair_spec, payload): (Operand, ActivitySpec, Payload) = if indirect {
            // The augmented function comes out of the callee's shadow.
            let pair_ptr = self
                .fwd_shadow_addr(callee_op.as_ref().unwrap(), &mut em.cur.instrs)?;
            let augfn = self.fresh("aug.fn");
            em.push(load_inst(&augfn, IrType::Ptr, pair_ptr));
            // The pair convention is the canonical spec of the signature;
            // derive it from argument types.
            let params = args
                .iter()
                .map(|a| match self.operand_ty(a) {
                    Some(IrType::Ptr) => ActivityToken::Dup,
                    Some(t) if t.is_float() => ActivityToken::Active,
                    _ => ActivityToken::Const,
                })
                .collect();
            let ret = match inst.ty {
                Some(t) if t.is_float() => RetActivity::Active,
                _ => RetActivity::Const,
            };
            (vop(&augfn), ActivitySpec::new(params, ret), Payload::Ptr)
        } else {
            let callee_name = inst.callee.clone().unwrap();
            let callee = self
                .ctx
                .base
                .function(&callee_name)
                .ok_or_else(|| SynthError::MissingDefinition(callee_name.clone()))?
                .clone();
            let spec = if self.ctx.base.custom_adjoints.contains_key(&callee_name) {
                ActivitySpec::canonical(&callee)
            } else {
                self.call_site_spec(&callee, inst)
            };
            let info = self.ctx.ensure_pair(&callee_name, spec)?;
            (
                Operand::Global(info.aug.clone()),
                info.spec.clone(),
                info.payload,
            )
        };

        // Tape slot, written by the augmented callee.
        let slot = self.fresh(&format!("tapeslot.{}", sanitize(iid)));
        self.prologue
            .push(alloc_inst(&slot, Operand::ConstInt(8), false));
        let mut call_args = self.pair_call_args(&pair_spec, &args, &mut em.cur.instrs)?;
        call_args.push(vop(&slot));
        let call = match &aug_target {
            Operand::Global(g) => call_inst(inst.result.clone(), inst.ty, g, call_args),
            other => callind_inst(inst.result.clone(), inst.ty, other.clone(), call_args),
        };
        em.push(call);
        // Load and keep the per-instance tape value.
        let tape_ty = match payload {
            Payload::Ptr => IrType::Ptr,
            Payload::F64 => IrType::F64,
        };
        let tval = self.fresh(&format!("tape.{}", sanitize(iid)));
        em.push(load_inst(&tval, tape_ty, vop(&slot)));
        self.call_tape_val.insert(iid.to_string(), tval.clone());
        if let Some(unit) = self.tape_units.get(iid).cloned() {
            self.write_value_to_unit(&tval, tape_ty, &unit, em)?;
        }
        // Cache the primal result if planned.
        if let Some(r) = inst.result.clone() {
            if self.units.contains_key(&r) {
                let block = self.primal.blocks[block_idx].name.clone();
                self.emit_cache_write(&r, em, &block)?;
            }
        }
        Ok(())
    }
}

fn cache_store(ty: IrType, value: Operand, addr: Operand) -> Instruction {
    let mut i = store_inst(ty, value, addr);
    i.attrs.cache = true;
    i
}

fn sanitize(id: &str) -> String {
    id.replace('#', "_")
}


// ---------------------------------------------------------------------
// Reverse section
// ---------------------------------------------------------------------

impl RevCtx {
    fn new(primal_block: &str, rev_name: String) -> RevCtx {
        RevCtx {
            block: BasicBlock::new(rev_name),
            fblock: primal_block.to_string(),
            memo: BTreeMap::new(),
            shadow_memo: BTreeMap::new(),
        }
    }

    fn push(&mut self, inst: Instruction) {
        self.block.instrs.push(inst);
    }
}

impl<'s, 'a> Builder<'s, 'a> {
    fn rk_name(&self, header: &str) -> String {
        format!("rk.{header}")
    }

    fn rkdec_name(&self, header: &str) -> String {
        format!("rkdec.{header}")
    }

    /// Reverse-side loop counter for loop `header` as seen from primal
    /// block `at`: the header itself sees `rk`, body blocks see `rk - 1`.
    fn rev_counter(&self, header: &str, at: &str) -> Option<Operand> {
        let lp = self.plan.loop_plans.get(header)?;
        if !lp.body.contains(at) {
            return None;
        }
        Some(if at == header {
            vop(&self.rk_name(header))
        } else {
            vop(&self.rkdec_name(header))
        })
    }

    /// Trip-count operand of a loop, emitted into `ctx` when dynamic.
    fn trips_operand(&mut self, header: &str, ctx: &mut RevCtx) -> Result<Operand, SynthError> {
        let lp = self.plan.loop_plans[header].clone();
        match &lp.trips {
            TripSource::Static(t) => Ok(Operand::ConstInt(*t as i64)),
            TripSource::Dynamic { bound, init, inclusive } => {
                let b = self.avail(bound, ctx)?;
                let raw = self.fresh("trips.raw");
                ctx.push(bin_inst(&raw, Opcode::ISub, IrType::I64, b, init.clone()));
                let adj = if *inclusive {
                    let a = self.fresh("trips.incl");
                    ctx.push(bin_inst(
                        &a,
                        Opcode::IAdd,
                        IrType::I64,
                        vop(&raw),
                        Operand::ConstInt(1),
                    ));
                    vop(&a)
                } else {
                    vop(&raw)
                };
                let pos = self.fresh("trips.pos");
                ctx.push(icmp_inst(
                    &pos,
                    IntPred::Sgt,
                    IrType::I64,
                    adj.clone(),
                    Operand::ConstInt(0),
                ));
                let trips = self.fresh("trips");
                ctx.push(select_inst(
                    &trips,
                    IrType::I64,
                    vop(&pos),
                    adj,
                    Operand::ConstInt(0),
                ));
                Ok(vop(&trips))
            }
            TripSource::Recorded => {
                // Popped at the head of the exit block's reverse.
                let key = format!("__popped_trips.{header}");
                ctx.memo
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| self.err(format!(
                        "recorded trip count of {header} not available here"
                    )))
            }
        }
    }

    fn ctrl_pop(&mut self, ctx: &mut RevCtx) -> Operand {
        let unit = self.ctrl_unit.clone().expect("control stack exists");
        let base = self.unit_base_ptr(&unit, &mut ctx.block.instrs);
        let cntp = self.fresh("cs.cntp");
        ctx.push(ptradd_inst(&cntp, base.clone(), Operand::ConstInt(16)));
        let cnt = self.fresh("cs.cnt");
        ctx.push(load_inst(&cnt, IrType::I64, vop(&cntp)));
        let c1 = self.fresh("cs.top");
        ctx.push(bin_inst(
            &c1,
            Opcode::ISub,
            IrType::I64,
            vop(&cnt),
            Operand::ConstInt(1),
        ));
        ctx.push(store_inst(IrType::I64, vop(&c1), vop(&cntp)));
        let data = self.fresh("cs.data");
        ctx.push(load_inst(&data, IrType::Ptr, base));
        let off = self.fresh("cs.off");
        ctx.push(bin_inst(
            &off,
            Opcode::IMul,
            IrType::I64,
            vop(&c1),
            Operand::ConstInt(8),
        ));
        let p = self.fresh("cs.ptr");
        ctx.push(ptradd_inst(&p, vop(&data), vop(&off)));
        let v = self.fresh("cs.val");
        let mut ld = load_inst(&v, IrType::I64, vop(&p));
        ld.attrs.cache = true;
        ctx.push(ld);
        vop(&v)
    }

    /// Reverse-side flat index for a unit read at primal block `at`.
    fn rev_cache_index(
        &mut self,
        unit: &CacheUnit,
        ctx: &mut RevCtx,
    ) -> Result<Operand, SynthError> {
        let nest = unit.nest.clone();
        let mut terms: Vec<(Operand, u64)> = Vec::new();
        for (level, header) in nest.iter().enumerate() {
            let cnt = match self.rev_counter(header, &ctx.fblock.clone()) {
                Some(c) => c,
                None => {
                    // Use site outside this loop: the last written index.
                    match unit.kind {
                        CacheKind::Growable => {
                            let base = self.unit_base_ptr(unit, &mut ctx.block.instrs);
                            let cntp = self.fresh("cr.cntp");
                            ctx.push(ptradd_inst(&cntp, base, Operand::ConstInt(16)));
                            let cnt = self.fresh("cr.cnt");
                            ctx.push(load_inst(&cnt, IrType::I64, vop(&cntp)));
                            let last = self.fresh("cr.last");
                            ctx.push(bin_inst(
                                &last,
                                Opcode::ISub,
                                IrType::I64,
                                vop(&cnt),
                                Operand::ConstInt(1),
                            ));
                            vop(&last)
                        }
                        _ => {
                            let lp = &self.plan.loop_plans[header];
                            let TripSource::Static(t) = lp.trips else {
                                return Err(self.err(
                                    "post-loop read of a non-static cache level",
                                ));
                            };
                            let innermost = level == nest.len() - 1;
                            let size = t + u64::from(innermost && unit.header_def);
                            Operand::ConstInt(size.saturating_sub(1) as i64)
                        }
                    }
                }
            };
            let mut stride = 1u64;
            for inner in &nest[level + 1..] {
                let lp = &self.plan.loop_plans[inner];
                let TripSource::Static(t) = lp.trips else {
                    return Err(self.err("multi-level cache with runtime inner trips"));
                };
                let inner_is_innermost = inner == nest.last().unwrap();
                stride *= t + u64::from(inner_is_innermost && unit.header_def);
            }
            terms.push((cnt, stride));
        }
        self.combine_index_terms(terms, |_b, i| ctx.block.instrs.push(i))
    }

    /// Reads a unit's payload in a reverse block.
    fn read_unit(
        &mut self,
        label: &str,
        unit: &CacheUnit,
        ctx: &mut RevCtx,
    ) -> Result<Operand, SynthError> {
        let name = self.fresh(&format!("rd.{label}"));
        match unit.kind {
            CacheKind::ScalarSlot => {
                let base = self.unit_base_ptr(unit, &mut ctx.block.instrs);
                let mut ld = load_inst(&name, unit.ty, base);
                ld.attrs.cache = true;
                ctx.push(ld);
            }
            CacheKind::FixedArray { .. } => {
                let idx = self.rev_cache_index(unit, ctx)?;
                let base = self.unit_base_ptr(unit, &mut ctx.block.instrs);
                let off = self.fresh("rd.off");
                ctx.push(bin_inst(
                    &off,
                    Opcode::IMul,
                    IrType::I64,
                    idx,
                    Operand::ConstInt(8),
                ));
                let p = self.fresh("rd.ptr");
                ctx.push(ptradd_inst(&p, base, vop(&off)));
                let mut ld = load_inst(&name, unit.ty, vop(&p));
                ld.attrs.cache = true;
                ctx.push(ld);
            }
            CacheKind::Growable => {
                let idx = self.rev_cache_index(unit, ctx)?;
                let base = self.unit_base_ptr(unit, &mut ctx.block.instrs);
                let data = self.fresh("rd.data");
                ctx.push(load_inst(&data, IrType::Ptr, base));
                let off = self.fresh("rd.off");
                ctx.push(bin_inst(
                    &off,
                    Opcode::IMul,
                    IrType::I64,
                    idx,
                    Operand::ConstInt(8),
                ));
                let p = self.fresh("rd.ptr");
                ctx.push(ptradd_inst(&p, vop(&data), vop(&off)));
                let mut ld = load_inst(&name, unit.ty, vop(&p));
                ld.attrs.cache = true;
                ctx.push(ld);
            }
        }
        Ok(vop(&name))
    }

    /// Materializes a forward value in a reverse block, per its class.
    fn avail(&mut self, op: &Operand, ctx: &mut RevCtx) -> Result<Operand, SynthError> {
        let v = match op {
            Operand::Value(v) => v.clone(),
            other => return Ok(other.clone()),
        };
        if let Some(m) = ctx.memo.get(&v) {
            return Ok(m.clone());
        }
        let class = self.plan.classes.get(&v).cloned().unwrap_or_else(|| {
            if self.primal.params.iter().any(|p| p.name == v) {
                ValClass::Live
            } else if !self.plan.split {
                ValClass::Live // conservative: let the validator complain
            } else {
                ValClass::Live
            }
        });
        let out = match class {
            ValClass::Live => vop(&v),
            ValClass::IvReconstruct(header) => {
                let lp = self.plan.loop_plans[&header].clone();
                let iv = lp.iv.clone().expect("reconstructed loops have an IV");
                let cnt = match self.rev_counter(&header, &ctx.fblock.clone()) {
                    Some(c) => c,
                    None => {
                        // Final IV value: init + trips.
                        self.trips_operand(&header, ctx)?
                    }
                };
                match &iv.init {
                    Operand::ConstInt(0) => cnt,
                    init => {
                        let r = self.fresh(&format!("{v}.rec"));
                        ctx.push(bin_inst(&r, Opcode::IAdd, IrType::I64, cnt, init.clone()));
                        vop(&r)
                    }
                }
            }
            ValClass::Cached(_) => {
                let unit = self
                    .units
                    .get(&v)
                    .cloned()
                    .ok_or_else(|| self.err(format!("no cache unit for %{v}")))?;
                self.read_unit(&v, &unit, ctx)?
            }
            ValClass::Recompute => {
                let def = self
                    .def_of(&v)
                    .cloned()
                    .ok_or_else(|| self.err(format!("no definition for %{v}")))?;
                let mut clone = def.clone();
                let mut new_ops = Vec::with_capacity(def.operands.len());
                for o in &def.operands {
                    new_ops.push(self.avail(o, ctx)?);
                }
                clone.operands = new_ops;
                let name = self.fresh(&format!("{v}.rc"));
                clone.result = Some(name.clone());
                clone.line = 0;
                ctx.push(clone);
                vop(&name)
            }
        };
        ctx.memo.insert(v, out.clone());
        Ok(out)
    }

    /// Shadow address of a pointer operand, derived in a reverse block.
    fn shadow_addr(&mut self, op: &Operand, ctx: &mut RevCtx) -> Result<Operand, SynthError> {
        match op {
            Operand::Null => Ok(Operand::Null),
            Operand::Global(g) => {
                if self.ctx.base.function(g).is_some() {
                    let pair = self.ctx.ensure_shadow_pair(g)?;
                    Ok(Operand::Global(pair))
                } else {
                    Err(self.err(format!("store through constant global @{g}")))
                }
            }
            Operand::Value(v) => {
                if let Some(m) = ctx.shadow_memo.get(v) {
                    return Ok(m.clone());
                }
                let out = if let Some(unit) = self.shadow_units.get(v).cloned() {
                    self.read_unit(&format!("shadow.{v}"), &unit, ctx)?
                } else if let Some(base) = self.shadow_base.get(v).cloned() {
                    // Parameters' shadows, and in combined mode the
                    // still-live eager shadows.
                    let is_own_param = |s: &str| self.params.iter().any(|p| p.name == s);
                    match &base {
                        Operand::Value(s)
                            if self.shape == Shape::Combined || is_own_param(s) =>
                        {
                            base.clone()
                        }
                        Operand::Value(_) => {
                            return Err(self.err(format!(
                                "shadow of %{v} does not survive the pass split"
                            )))
                        }
                        other => other.clone(),
                    }
                } else {
                    let def = self
                        .def_of(v)
                        .cloned()
                        .ok_or_else(|| self.err(format!("no shadow for pointer %{v}")))?;
                    match def.opcode {
                        Opcode::PtrAdd => {
                            let base = self.shadow_addr(&def.operands[0], ctx)?;
                            let off = self.avail(&def.operands[1], ctx)?;
                            let name = self.fresh(&format!("{v}.shadow"));
                            ctx.push(ptradd_inst(&name, base, off));
                            vop(&name)
                        }
                        _ => {
                            return Err(self.err(format!(
                                "shadow of pointer %{v} (defined by {}) is not derivable",
                                def.opcode.mnemonic()
                            )))
                        }
                    }
                };
                ctx.shadow_memo.insert(v.clone(), out.clone());
                Ok(out)
            }
            _ => Err(self.err("shadow of a non-pointer operand requested")),
        }
    }

    // ----- adjoint accumulators -----

    fn dslot_of(&mut self, v: &str) -> Option<String> {
        self.dslot.get(v).cloned()
    }

    /// Loads and zeroes the accumulated adjoint of a value.
    fn consume(&mut self, v: &str, ctx: &mut RevCtx) -> Operand {
        let ty = self.value_ty(v).unwrap_or(IrType::F64);
        let Some(slot) = self.dslot_of(v) else {
            return zero_of(ty);
        };
        let d = self.fresh(&format!("d_{v}.v"));
        ctx.push(load_inst(&d, ty, vop(&slot)));
        ctx.push(store_inst(ty, zero_of(ty), vop(&slot)));
        vop(&d)
    }

    /// Adds a contribution to the adjoint slot of an operand; constants
    /// and inactive values absorb nothing.
    fn accumulate(&mut self, target: &Operand, contrib: Operand, ctx: &mut RevCtx) {
        let Operand::Value(v) = target else { return };
        let Some(slot) = self.dslot_of(v) else { return };
        let ty = self.value_ty(v).unwrap_or(IrType::F64);
        let old = self.fresh(&format!("d_{v}.old"));
        ctx.push(load_inst(&old, ty, vop(&slot)));
        let new = self.fresh(&format!("d_{v}.new"));
        ctx.push(bin_inst(&new, Opcode::FAdd, ty, vop(&old), contrib));
        ctx.push(store_inst(ty, vop(&new), vop(&slot)));
    }

    fn is_active_operand(&self, op: &Operand) -> bool {
        op.as_value().map(|v| self.is_active(v)).unwrap_or(false)
    }
}

fn zero_of(ty: IrType) -> Operand {
    match ty {
        t if t.is_float() => Operand::ConstFloat(0.0),
        IrType::Ptr => Operand::Null,
        _ => Operand::ConstInt(0),
    }
}

// ---------------------------------------------------------------------
// Adjoint emission
// ---------------------------------------------------------------------

impl<'s, 'a> Builder<'s, 'a> {
    /// The guard that tells whether `pred` was the executed predecessor
    /// of the block being reversed, as an i1 operand.
    fn pred_guard(
        &mut self,
        block: &str,
        pred: &str,
        sel: &PredSel,
        ctx: &mut RevCtx,
    ) -> Result<Operand, SynthError> {
        match sel {
            PredSel::Single => Ok(Operand::ConstInt(1)),
            PredSel::Cond { cond, true_pred } => {
                let c = self.avail(&vop(cond), ctx)?;
                if pred == true_pred {
                    Ok(c)
                } else {
                    // Invert: executed iff the condition was false.
                    let inv = self.fresh("guard.not");
                    ctx.push(select_inst(
                        &inv,
                        IrType::I1,
                        c,
                        Operand::ConstInt(0),
                        Operand::ConstInt(1),
                    ));
                    Ok(vop(&inv))
                }
            }
            PredSel::Record { pid, preds } => {
                let k = preds
                    .iter()
                    .position(|p| p == pred)
                    .ok_or_else(|| self.err(format!("{pred} is not a predecessor of {block}")))?;
                let g = self.fresh("guard.eq");
                ctx.push(icmp_inst(
                    &g,
                    IntPred::Eq,
                    IrType::I64,
                    pid.clone(),
                    Operand::ConstInt(k as i64),
                ));
                Ok(vop(&g))
            }
            PredSel::LoopHeader { entering } => {
                let header = ctx.fblock.clone();
                let first = self.fresh("guard.first");
                ctx.push(icmp_inst(
                    &first,
                    IntPred::Eq,
                    IrType::I64,
                    vop(&self.rk_name(&header)),
                    Operand::ConstInt(0),
                ));
                if pred == entering {
                    Ok(vop(&first))
                } else {
                    let inv = self.fresh("guard.later");
                    ctx.push(select_inst(
                        &inv,
                        IrType::I1,
                        vop(&first),
                        Operand::ConstInt(0),
                        Operand::ConstInt(1),
                    ));
                    Ok(vop(&inv))
                }
            }
        }
    }

    fn emit_adjoint(
        &mut self,
        inst: &Instruction,
        iid: &str,
        sel: &PredSel,
        ctx: &mut RevCtx,
    ) -> Result<(), SynthError> {
        let aa = AliasAnalysis::for_function(&self.primal, None);
        let active = self.act.is_active_instr(iid);
        match inst.opcode {
            Opcode::Ret => {
                if let Some(op) = inst.operands.first() {
                    if self.spec.ret == RetActivity::Active {
                        let seed = self.seed.clone();
                        self.accumulate(&op.clone(), seed, ctx);
                    }
                }
            }
            Opcode::Store => {
                match store_action(inst, iid, &self.act, &aa) {
                    StoreAction::None => {}
                    StoreAction::ZeroOnly => {
                        let ty = inst.ty.unwrap();
                        let saddr = self.shadow_addr(&inst.operands[1].clone(), ctx)?;
                        ctx.push(store_inst(ty, zero_of(ty), saddr));
                    }
                    StoreAction::Full => {
                        let ty = inst.ty.unwrap();
                        let saddr = self.shadow_addr(&inst.operands[1].clone(), ctx)?;
                        let t = self.fresh("st.d");
                        ctx.push(load_inst(&t, ty, saddr.clone()));
                        ctx.push(store_inst(ty, zero_of(ty), saddr));
                        self.accumulate(&inst.operands[0].clone(), vop(&t), ctx);
                    }
                }
                return Ok(());
            }
            _ => {}
        }
        if !active {
            return Ok(());
        }
        let ty = inst.ty.unwrap_or(IrType::F64);
        match inst.opcode {
            Opcode::FAdd => {
                let z = inst.result.as_deref().unwrap().to_string();
                let d = self.consume(&z, ctx);
                self.accumulate(&inst.operands[0].clone(), d.clone(), ctx);
                self.accumulate(&inst.operands[1].clone(), d, ctx);
            }
            Opcode::FSub => {
                let z = inst.result.as_deref().unwrap().to_string();
                let d = self.consume(&z, ctx);
                self.accumulate(&inst.operands[0].clone(), d.clone(), ctx);
                if self.is_active_operand(&inst.operands[1]) {
                    let n = self.fresh("neg");
                    ctx.push(un_inst(&n, Opcode::FNeg, ty, d));
                    self.accumulate(&inst.operands[1].clone(), vop(&n), ctx);
                }
            }
            Opcode::FMul => {
                let z = inst.result.as_deref().unwrap().to_string();
                let d = self.consume(&z, ctx);
                let (x, y) = (inst.operands[0].clone(), inst.operands[1].clone());
                if self.is_active_operand(&x) {
                    let yv = self.avail(&y, ctx)?;
                    let c = self.fresh("mul.dx");
                    ctx.push(bin_inst(&c, Opcode::FMul, ty, yv, d.clone()));
                    self.accumulate(&x, vop(&c), ctx);
                }
                if self.is_active_operand(&y) {
                    let xv = self.avail(&x, ctx)?;
                    let c = self.fresh("mul.dy");
                    ctx.push(bin_inst(&c, Opcode::FMul, ty, xv, d));
                    self.accumulate(&y, vop(&c), ctx);
                }
            }
            Opcode::FDiv => {
                let z = inst.result.as_deref().unwrap().to_string();
                let d = self.consume(&z, ctx);
                let (x, y) = (inst.operands[0].clone(), inst.operands[1].clone());
                let yv = self.avail(&y, ctx)?;
                if self.is_active_operand(&x) {
                    let c = self.fresh("div.dx");
                    ctx.push(bin_inst(&c, Opcode::FDiv, ty, d.clone(), yv.clone()));
                    self.accumulate(&x, vop(&c), ctx);
                }
                if self.is_active_operand(&y) {
                    // d_y += -z * d / y, reusing the primal quotient.
                    let zv = self.avail(&vop(&z), ctx)?;
                    let t = self.fresh("div.zd");
                    ctx.push(bin_inst(&t, Opcode::FMul, ty, zv, d));
                    let q = self.fresh("div.q");
                    ctx.push(bin_inst(&q, Opcode::FDiv, ty, vop(&t), yv));
                    let n = self.fresh("div.dy");
                    ctx.push(un_inst(&n, Opcode::FNeg, ty, vop(&q)));
                    self.accumulate(&y, vop(&n), ctx);
                }
            }
            Opcode::FNeg => {
                let z = inst.result.as_deref().unwrap().to_string();
                let d = self.consume(&z, ctx);
                if self.is_active_operand(&inst.operands[0]) {
                    let n = self.fresh("neg.dx");
                    ctx.push(un_inst(&n, Opcode::FNeg, ty, d));
                    self.accumulate(&inst.operands[0].clone(), vop(&n), ctx);
                }
            }
            Opcode::Select => {
                let z = inst.result.as_deref().unwrap().to_string();
                let d = self.consume(&z, ctx);
                let c = self.avail(&inst.operands[0].clone(), ctx)?;
                if self.is_active_operand(&inst.operands[1]) {
                    let g = self.fresh("sel.dt");
                    ctx.push(select_inst(&g, ty, c.clone(), d.clone(), zero_of(ty)));
                    self.accumulate(&inst.operands[1].clone(), vop(&g), ctx);
                }
                if self.is_active_operand(&inst.operands[2]) {
                    let g = self.fresh("sel.df");
                    ctx.push(select_inst(&g, ty, c, zero_of(ty), d));
                    self.accumulate(&inst.operands[2].clone(), vop(&g), ctx);
                }
            }
            Opcode::Phi => {
                let z = inst.result.as_deref().unwrap().to_string();
                let d = self.consume(&z, ctx);
                for (op, pred) in inst.operands.iter().zip(&inst.targets) {
                    if !self.is_active_operand(op) {
                        continue;
                    }
                    let guard = self.pred_guard(&ctx.fblock.clone(), pred, sel, ctx)?;
                    let g = match guard {
                        Operand::ConstInt(1) => d.clone(),
                        guard => {
                            let s = self.fresh("phi.d");
                            ctx.push(select_inst(&s, ty, guard, d.clone(), zero_of(ty)));
                            vop(&s)
                        }
                    };
                    self.accumulate(&op.clone(), g, ctx);
                }
            }
            Opcode::Intrinsic(i) => self.emit_intrinsic_adjoint(i, inst, ty, ctx)?,
            Opcode::Load => {
                let z = inst.result.as_deref().unwrap().to_string();
                let d = self.consume(&z, ctx);
                let saddr = self.shadow_addr(&inst.operands[0].clone(), ctx)?;
                let old = self.fresh("ld.old");
                ctx.push(load_inst(&old, ty, saddr.clone()));
                let new = self.fresh("ld.new");
                ctx.push(bin_inst(&new, Opcode::FAdd, ty, vop(&old), d));
                ctx.push(store_inst(ty, vop(&new), saddr));
            }
            Opcode::Memcpy => {
                self.emit_memcpy_adjoint(inst, ctx)?;
            }
            Opcode::Call | Opcode::CallInd => {
                self.emit_call_adjoint(inst, iid, ctx)?;
            }
            Opcode::Alloc => {
                // Deferred deallocation: the adjoint of an allocation
                // frees the shadow, and the primal buffer if the primal
                // freed it.
                let res = inst.result.as_deref().unwrap().to_string();
                if self.alloc_has_shadow(&res) {
                    let s = self.shadow_addr(&vop(&res), ctx)?;
                    ctx.push(free_inst(s));
                }
                if self.freed_allocs.contains(&res) {
                    let p = self.avail(&vop(&res), ctx)?;
                    ctx.push(free_inst(p));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn emit_intrinsic_adjoint(
        &mut self,
        i: Intrinsic,
        inst: &Instruction,
        ty: IrType,
        ctx: &mut RevCtx,
    ) -> Result<(), SynthError> {
        if i == Intrinsic::Read {
            return Ok(()); // cached in the forward pass, zero adjoint
        }
        let z = inst.result.as_deref().unwrap().to_string();
        let d = self.consume(&z, ctx);
        let x = inst.operands[0].clone();
        let intr = |r: &str, which: Intrinsic, a: Operand| {
            let mut inst = Instruction::new(Opcode::Intrinsic(which));
            inst.result = Some(r.to_string());
            inst.ty = Some(ty);
            inst.operands.push(a);
            inst
        };
        match i {
            Intrinsic::Pow => {
                let c = inst.operands[1].clone();
                if self.is_active_operand(&x) {
                    let xv = self.avail(&x, ctx)?;
                    let cv = self.avail(&c, ctx)?;
                    let em1 = match &cv {
                        Operand::ConstFloat(k) => Operand::ConstFloat(k - 1.0),
                        other => {
                            let e = self.fresh("pow.em1");
                            ctx.push(bin_inst(
                                &e,
                                Opcode::FSub,
                                ty,
                                other.clone(),
                                Operand::ConstFloat(1.0),
                            ));
                            vop(&e)
                        }
                    };
                    let p = self.fresh("pow.p");
                    let mut pw = Instruction::new(Opcode::Intrinsic(Intrinsic::Pow));
                    pw.result = Some(p.clone());
                    pw.ty = Some(ty);
                    pw.operands.push(xv);
                    pw.operands.push(em1);
                    ctx.push(pw);
                    let m = self.fresh("pow.cm");
                    ctx.push(bin_inst(&m, Opcode::FMul, ty, cv, vop(&p)));
                    let contrib = self.fresh("pow.dx");
                    ctx.push(bin_inst(&contrib, Opcode::FMul, ty, vop(&m), d.clone()));
                    self.accumulate(&x, vop(&contrib), ctx);
                }
                if self.is_active_operand(&c) {
                    // d_c += z * log(x) * d; x <= 0 with an active
                    // exponent is a documented runtime domain error.
                    let xv = self.avail(&x, ctx)?;
                    let zv = self.avail(&vop(&z), ctx)?;
                    let lg = self.fresh("pow.log");
                    ctx.push(intr(&lg, Intrinsic::Log, xv));
                    let t = self.fresh("pow.zl");
                    ctx.push(bin_inst(&t, Opcode::FMul, ty, zv, vop(&lg)));
                    let contrib = self.fresh("pow.dc");
                    ctx.push(bin_inst(&contrib, Opcode::FMul, ty, vop(&t), d));
                    self.accumulate(&c, vop(&contrib), ctx);
                }
            }
            Intrinsic::Sin => {
                let xv = self.avail(&x, ctx)?;
                let cosx = self.fresh("sin.cos");
                ctx.push(intr(&cosx, Intrinsic::Cos, xv));
                let contrib = self.fresh("sin.dx");
                ctx.push(bin_inst(&contrib, Opcode::FMul, ty, vop(&cosx), d));
                self.accumulate(&x, vop(&contrib), ctx);
            }
            Intrinsic::Cos => {
                let xv = self.avail(&x, ctx)?;
                let sinx = self.fresh("cos.sin");
                ctx.push(intr(&sinx, Intrinsic::Sin, xv));
                let m = self.fresh("cos.m");
                ctx.push(bin_inst(&m, Opcode::FMul, ty, vop(&sinx), d));
                let contrib = self.fresh("cos.dx");
                ctx.push(un_inst(&contrib, Opcode::FNeg, ty, vop(&m)));
                self.accumulate(&x, vop(&contrib), ctx);
            }
            Intrinsic::Exp => {
                let zv = self.avail(&vop(&z), ctx)?;
                let contrib = self.fresh("exp.dx");
                ctx.push(bin_inst(&contrib, Opcode::FMul, ty, zv, d));
                self.accumulate(&x, vop(&contrib), ctx);
            }
            Intrinsic::Log => {
                let xv = self.avail(&x, ctx)?;
                let contrib = self.fresh("log.dx");
                ctx.push(bin_inst(&contrib, Opcode::FDiv, ty, d, xv));
                self.accumulate(&x, vop(&contrib), ctx);
            }
            Intrinsic::Sqrt => {
                let zv = self.avail(&vop(&z), ctx)?;
                let twoz = self.fresh("sqrt.2z");
                ctx.push(bin_inst(
                    &twoz,
                    Opcode::FMul,
                    ty,
                    Operand::ConstFloat(2.0),
                    zv,
                ));
                let contrib = self.fresh("sqrt.dx");
                ctx.push(bin_inst(&contrib, Opcode::FDiv, ty, d, vop(&twoz)));
                self.accumulate(&x, vop(&contrib), ctx);
            }
            Intrinsic::Fabs => {
                let xv = self.avail(&x, ctx)?;
                let nonneg = self.fresh("abs.sign");
                let mut cmp = Instruction::new(Opcode::FCmp(FloatPred::Oge));
                cmp.result = Some(nonneg.clone());
                cmp.ty = Some(ty);
                cmp.operands.push(xv);
                cmp.operands.push(Operand::ConstFloat(0.0));
                ctx.push(cmp);
                let nd = self.fresh("abs.neg");
                ctx.push(un_inst(&nd, Opcode::FNeg, ty, d.clone()));
                let contrib = self.fresh("abs.dx");
                ctx.push(select_inst(&contrib, ty, vop(&nonneg), d, vop(&nd)));
                self.accumulate(&x, vop(&contrib), ctx);
            }
            Intrinsic::Read => unreachable!(),
        }
        Ok(())
    }
}

/// How a reverse block decides which predecessor to return to.
enum PredSel {
    Single,
    Cond { cond: String, true_pred: String },
    Record { pid: Operand, preds: Vec<String> },
    LoopHeader { entering: String },
}

impl<'s, 'a> Builder<'s, 'a> {
    /// Element layout of a memcpy per the type trees of its operands.
    fn memcpy_elements(
        &self,
        inst: &Instruction,
    ) -> Result<MemcpyElems, SynthError> {
        let fn_name = &self.primal.name;
        let tree = [&inst.operands[0], &inst.operands[1]]
            .iter()
            .filter_map(|op| {
                op.as_value()
                    .and_then(|v| self.ctx.env.value_tree(fn_name, v))
            })
            .next()
            .ok_or_else(|| {
                self.err("memcpy of untyped memory cannot be differentiated")
            })?;
        // Star entry: uniform element type.
        let star = tree
            .entries()
            .find(|(p, _)| p.as_slice() == [PathElem::Star])
            .map(|(_, k)| *k);
        if let Some(kind) = star {
            return Ok(match kind {
                BaseType::Float64 => MemcpyElems::Uniform(IrType::F64),
                BaseType::Float32 => MemcpyElems::Uniform(IrType::F32),
                _ => MemcpyElems::IntegerOnly,
            });
        }
        // Concrete first-level entries.
        let mut entries: Vec<(i64, IrType)> = Vec::new();
        let mut any_float = false;
        for (path, kind) in tree.entries() {
            if path.len() != 1 {
                continue;
            }
            let PathElem::Byte(off) = path[0] else { continue };
            match kind {
                BaseType::Float64 => {
                    entries.push((off, IrType::F64));
                    any_float = true;
                }
                BaseType::Float32 => {
                    entries.push((off, IrType::F32));
                    any_float = true;
                }
                _ => {}
            }
        }
        if !any_float {
            return Ok(MemcpyElems::IntegerOnly);
        }
        // Uniform stride collapses to the loop form.
        let w = entries[0].1.byte_width() as i64;
        let uniform = entries.iter().all(|(_, t)| *t == entries[0].1)
            && entries
                .iter()
                .enumerate()
                .all(|(i, (off, _))| *off == i as i64 * w);
        if uniform && entries.len() > 1 {
            Ok(MemcpyElems::Uniform(entries[0].1))
        } else if entries.len() == 1 && entries[0].0 == 0 {
            Ok(MemcpyElems::Uniform(entries[0].1))
        } else {
            Ok(MemcpyElems::Fields(entries))
        }
    }

    /// Reverse of `memcpy dst, src, len`: per float element,
    /// `d_src[i] += d_dst[i]; d_dst[i] = 0`. Integer bytes move nothing.
    fn emit_memcpy_adjoint(
        &mut self,
        inst: &Instruction,
        ctx: &mut RevCtx,
    ) -> Result<(), SynthError> {
        let elems = self.memcpy_elements(inst)?;
        let sdst = self.shadow_addr(&inst.operands[0].clone(), ctx)?;
        let ssrc = self.shadow_addr(&inst.operands[1].clone(), ctx)?;
        match elems {
            MemcpyElems::IntegerOnly => Ok(()),
            MemcpyElems::Fields(fields) => {
                for (off, ty) in fields {
                    let dp = self.fresh("mc.dp");
                    ctx.push(ptradd_inst(&dp, sdst.clone(), Operand::ConstInt(off)));
                    let sp = self.fresh("mc.sp");
                    ctx.push(ptradd_inst(&sp, ssrc.clone(), Operand::ConstInt(off)));
                    let d = self.fresh("mc.d");
                    ctx.push(load_inst(&d, ty, vop(&dp)));
                    let old = self.fresh("mc.old");
                    ctx.push(load_inst(&old, ty, vop(&sp)));
                    let new = self.fresh("mc.new");
                    ctx.push(bin_inst(&new, Opcode::FAdd, ty, vop(&old), vop(&d)));
                    ctx.push(store_inst(ty, vop(&new), vop(&sp)));
                    ctx.push(store_inst(ty, zero_of(ty), vop(&dp)));
                }
                Ok(())
            }
            MemcpyElems::Uniform(ty) => {
                let len = self.avail(&inst.operands[2].clone(), ctx)?;
                let w = ty.byte_width() as i64;
                // A reverse-local loop over byte offsets 0, w, 2w, ...
                let head = self.fresh(&format!("rmc.{}.head", ctx.fblock));
                let body = self.fresh(&format!("rmc.{}.body", ctx.fblock));
                let done = self.fresh(&format!("rmc.{}.done", ctx.fblock));
                // Current block jumps into the loop.
                let entry_label = ctx.block.name.clone();
                ctx.push(br_inst(&head));
                let finished = std::mem::replace(
                    &mut ctx.block,
                    BasicBlock::new(head.clone()),
                );
                self.rev.push(finished);
                // head: off = phi [0, entry], [off.next, body]
                let off = self.fresh("rmc.off");
                let offn = self.fresh("rmc.off.next");
                let mut phi = Instruction::new(Opcode::Phi);
                phi.result = Some(off.clone());
                phi.ty = Some(IrType::I64);
                phi.operands.push(Operand::ConstInt(0));
                phi.targets.push(entry_label);
                phi.operands.push(vop(&offn));
                phi.targets.push(body.clone());
                ctx.push(phi);
                let fits = self.fresh("rmc.fits");
                let end = self.fresh("rmc.end");
                ctx.push(bin_inst(
                    &end,
                    Opcode::IAdd,
                    IrType::I64,
                    vop(&off),
                    Operand::ConstInt(w),
                ));
                ctx.push(icmp_inst(&fits, IntPred::Sle, IrType::I64, vop(&end), len));
                ctx.push(condbr_inst(vop(&fits), &body, &done));
                let finished = std::mem::replace(
                    &mut ctx.block,
                    BasicBlock::new(body.clone()),
                );
                self.rev.push(finished);
                // body: the element adjoint.
                let dp = self.fresh("rmc.dp");
                ctx.push(ptradd_inst(&dp, sdst, vop(&off)));
                let sp = self.fresh("rmc.sp");
                ctx.push(ptradd_inst(&sp, ssrc, vop(&off)));
                let d = self.fresh("rmc.d");
                ctx.push(load_inst(&d, ty, vop(&dp)));
                let old = self.fresh("rmc.old");
                ctx.push(load_inst(&old, ty, vop(&sp)));
                let new = self.fresh("rmc.new");
                ctx.push(bin_inst(&new, Opcode::FAdd, ty, vop(&old), vop(&d)));
                ctx.push(store_inst(ty, vop(&new), vop(&sp)));
                ctx.push(store_inst(ty, zero_of(ty), vop(&dp)));
                ctx.push(bin_inst(
                    &offn,
                    Opcode::IAdd,
                    IrType::I64,
                    vop(&off),
                    Operand::ConstInt(w),
                ));
                ctx.push(br_inst(&head));
                let finished = std::mem::replace(
                    &mut ctx.block,
                    BasicBlock::new(done.clone()),
                );
                self.rev.push(finished);
                // ctx continues in `done`; the memo survives (values
                // emitted before the loop still dominate it).
                Ok(())
            }
        }
    }

    /// Reverse of an active call: invoke the reverse half of the pair
    /// with re-passed primal arguments, shadows, the consumed result
    /// adjoint and the tape payload; distribute returned derivatives.
    fn emit_call_adjoint(
        &mut self,
        inst: &Instruction,
        iid: &str,
        ctx: &mut RevCtx,
    ) -> Result<(), SynthError> {
        let indirect = inst.opcode == Opcode::CallInd;
        let args: Vec<Operand> = if indirect {
            inst.operands[1..].to_vec()
        } else {
            inst.operands.clone()
        };

        let (rev_target, pair_spec, _payload): (Operand, ActivitySpec, Payload) = if indirect {
            let pair_ptr = self.shadow_addr(&inst.operands[0].clone(), ctx)?;
            let gp = self.fresh("rev.fnp");
            ctx.push(ptradd_inst(&gp, pair_ptr, Operand::ConstInt(8)));
            let revfn = self.fresh("rev.fn");
            ctx.push(load_inst(&revfn, IrType::Ptr, vop(&gp)));
            let params = args
                .iter()
                .map(|a| match self.operand_ty(a) {
                    Some(IrType::Ptr) => ActivityToken::Dup,
                    Some(t) if t.is_float() => ActivityToken::Active,
                    _ => ActivityToken::Const,
                })
                .collect();
            let ret = match inst.ty {
                Some(t) if t.is_float() => RetActivity::Active,
                _ => RetActivity::Const,
            };
            (vop(&revfn), ActivitySpec::new(params, ret), Payload::Ptr)
        } else {
            let callee_name = inst.callee.clone().unwrap();
            let callee = self
                .ctx
                .base
                .function(&callee_name)
                .ok_or_else(|| SynthError::MissingDefinition(callee_name.clone()))?
                .clone();
            let spec = if self.ctx.base.custom_adjoints.contains_key(&callee_name) {
                ActivitySpec::canonical(&callee)
            } else {
                self.call_site_spec(&callee, inst)
            };
            let info = self.ctx.ensure_pair(&callee_name, spec)?;
            (
                Operand::Global(info.rev.clone()),
                info.spec.clone(),
                info.payload,
            )
        };

        // Interleaved arguments: primal (re-materialized) plus shadows.
        let mut call_args: Vec<Operand> = Vec::new();
        for (arg, tok) in args.iter().zip(&pair_spec.params) {
            let a = self.avail(arg, ctx)?;
            call_args.push(a);
            if tok.is_dup() {
                let s = self.shadow_addr(arg, ctx).unwrap_or(Operand::Null);
                call_args.push(s);
            }
        }
        // Seed.
        let ret_float = inst.ty.map(|t| t.is_float()).unwrap_or(false);
        if pair_spec.ret == RetActivity::Active && ret_float {
            let d = match &inst.result {
                Some(r) if self.is_active(r) => self.consume(&r.clone(), ctx),
                _ => zero_of(inst.ty.unwrap()),
            };
            call_args.push(d);
        }
        // Tape payload.
        let tape = if self.call_tape_live.get(iid).copied().unwrap_or(false) {
            vop(&self.call_tape_val[iid])
        } else if let Some(unit) = self.tape_units.get(iid).cloned() {
            self.read_unit(&format!("tape.{}", sanitize(iid)), &unit, ctx)?
        } else {
            Operand::Null
        };
        call_args.push(tape);

        // Derivatives of active scalar arguments come back through the
        // return value (one) or a trailing out-buffer (several).
        let active_positions: Vec<usize> = pair_spec
            .params
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == ActivityToken::Active)
            .map(|(i, _)| i)
            .collect();
        let out_buf = if active_positions.len() >= 2 {
            let buf = self.fresh("rev.douts");
            ctx.push(alloc_inst(
                &buf,
                Operand::ConstInt(8 * active_positions.len() as i64),
                false,
            ));
            call_args.push(vop(&buf));
            Some(buf)
        } else {
            None
        };
        let ret_ty = match active_positions.len() {
            1 => self.operand_ty(&args[active_positions[0]]),
            _ => None,
        };
        let result = ret_ty.map(|_| self.fresh("rev.dscalar"));
        let call = match &rev_target {
            Operand::Global(g) => call_inst(result.clone(), ret_ty, g, call_args),
            other => callind_inst(result.clone(), ret_ty, other.clone(), call_args),
        };
        ctx.push(call);
        match (&out_buf, active_positions.as_slice()) {
            (None, [j]) => {
                let r = result.unwrap();
                self.accumulate(&args[*j].clone(), vop(&r), ctx);
            }
            (Some(buf), positions) => {
                for (k, &j) in positions.iter().enumerate() {
                    let p = self.fresh("rev.doutp");
                    ctx.push(ptradd_inst(
                        &p,
                        vop(buf),
                        Operand::ConstInt(8 * k as i64),
                    ));
                    let ty = self.operand_ty(&args[j]).unwrap_or(IrType::F64);
                    let d = self.fresh("rev.dout");
                    ctx.push(load_inst(&d, ty, vop(&p)));
                    self.accumulate(&args[j].clone(), vop(&d), ctx);
                }
                ctx.push(free_inst(vop(buf)));
            }
            _ => {}
        }
        Ok(())
    }
}

enum MemcpyElems {
    Uniform(IrType),
    Fields(Vec<(i64, IrType)>),
    IntegerOnly,
}

// ---------------------------------------------------------------------
// Reverse blocks and assembly
// ---------------------------------------------------------------------

impl<'s, 'a> Builder<'s, 'a> {
    fn rev_name_of(&self, primal_block: &str) -> String {
        format!("reverse_{primal_block}")
    }

    /// Emits a jump from the current reverse block to the reverse of a
    /// primal block, recording loop-counter phi incomings when the
    /// target is a loop header.
    fn record_rev_edge(
        &mut self,
        target_primal: &str,
        ctx: &mut RevCtx,
    ) -> Result<(), SynthError> {
        if !self.plan.loop_plans.contains_key(target_primal) {
            return Ok(());
        }
        let lp = self.plan.loop_plans[target_primal].clone();
        let src_label = ctx.block.name.clone();
        let fblock = ctx.fblock.clone();
        if lp.body.contains(&fblock) {
            // Iteration edge: the counter decrements.
            let rkdec = self.rkdec_name(target_primal);
            self.loop_rt
                .get_mut(target_primal)
                .unwrap()
                .entries
                .push((src_label, vop(&rkdec)));
        } else {
            let trips = self.trips_operand(target_primal, ctx)?;
            self.loop_rt
                .get_mut(target_primal)
                .unwrap()
                .entries
                .push((src_label, trips));
        }
        Ok(())
    }

    /// Terminator of one reverse block, per the join plan.
    fn emit_rev_terminator(
        &mut self,
        plan: &JoinPlan,
        ctx: &mut RevCtx,
    ) -> Result<(), SynthError> {
        match plan {
            JoinPlan::Entry => unreachable!("entry runs the epilogue"),
            JoinPlan::Single(pred) => {
                self.record_rev_edge(&pred.clone(), ctx)?;
                let t = self.rev_name_of(pred);
                ctx.push(br_inst(&t));
            }
            JoinPlan::CondSelector {
                cond,
                true_pred,
                false_pred,
            } => {
                let c = self.avail(&vop(cond), ctx)?;
                self.record_rev_edge(&true_pred.clone(), ctx)?;
                self.record_rev_edge(&false_pred.clone(), ctx)?;
                let t = self.rev_name_of(true_pred);
                let f = self.rev_name_of(false_pred);
                ctx.push(condbr_inst(c, &t, &f));
            }
            JoinPlan::PredRecord { .. } => {
                unreachable!("predecessor records are dispatched inline")
            }
            JoinPlan::LoopHeader => {
                let header = ctx.fblock.clone();
                let lp = self.plan.loop_plans[&header].clone();
                let done = self.fresh("loop.done");
                ctx.push(icmp_inst(
                    &done,
                    IntPred::Eq,
                    IrType::I64,
                    vop(&self.rk_name(&header)),
                    Operand::ConstInt(0),
                ));
                self.record_rev_edge(&lp.entering, ctx)?;
                self.record_rev_edge(&lp.latch, ctx)?;
                let exit = self.rev_name_of(&lp.entering);
                let again = self.rev_name_of(&lp.latch);
                ctx.push(condbr_inst(vop(&done), &exit, &again));
            }
        }
        Ok(())
    }

    /// Builds all reverse blocks, in reverse primal order.
    fn build_reverse(&mut self) -> Result<(), SynthError> {
        // Pre-create loop counter names so body blocks can reference them.
        for header in self.plan.loop_plans.keys().cloned().collect::<Vec<_>>() {
            let rk = self.rk_name(&header);
            let rkdec = self.rkdec_name(&header);
            self.used.insert(rk.clone());
            self.used.insert(rkdec.clone());
            self.loop_rt.insert(
                header.clone(),
                LoopRt {
                    rk,
                    iv_header: None,
                    iv_body: None,
                    entries: Vec::new(),
                },
            );
        }
        let primal = self.primal.clone();
        for pb in primal.blocks.iter().rev() {
            let rev_name = self.rev_name_of(&pb.name);
            self.used.insert(rev_name.clone());
            let mut ctx = RevCtx::new(&pb.name, rev_name.clone());
            self.rev_label.insert(pb.name.clone(), rev_name);

            // Recorded-loop exit target: pop the trip count first.
            if let Some(header) = self
                .plan
                .loop_plans
                .iter()
                .find(|(_, lp)| {
                    lp.exit_to == pb.name && matches!(lp.trips, TripSource::Recorded)
                })
                .map(|(h, _)| h.clone())
            {
                let popped = self.ctrl_pop(&mut ctx);
                ctx.memo
                    .insert(format!("__popped_trips.{header}"), popped);
            }

            let join = self.plan.joins[&pb.name].clone();
            let is_header = matches!(join, JoinPlan::LoopHeader);
            if is_header {
                self.emit_rev_header_prologue(&pb.name, &mut ctx)?;
            }

            // Predecessor selector shared by phi adjoints and the
            // terminator.
            let sel = match &join {
                JoinPlan::Entry | JoinPlan::Single(_) => PredSel::Single,
                JoinPlan::CondSelector {
                    cond, true_pred, ..
                } => PredSel::Cond {
                    cond: cond.clone(),
                    true_pred: true_pred.clone(),
                },
                JoinPlan::PredRecord { preds } => {
                    let pid = self.ctrl_pop(&mut ctx);
                    PredSel::Record {
                        pid,
                        preds: preds.clone(),
                    }
                }
                JoinPlan::LoopHeader => PredSel::LoopHeader {
                    entering: self.plan.loop_plans[&pb.name].entering.clone(),
                },
            };

            for (ii, inst) in pb.instrs.iter().enumerate().rev() {
                let iid = instr_id(&pb.name, ii, inst);
                self.emit_adjoint(inst, &iid, &sel, &mut ctx)?;
            }

            if matches!(join, JoinPlan::Entry) {
                self.emit_epilogue(&mut ctx)?;
            } else {
                // The pop for PredRecord happened above; the terminator
                // reuses the same pid through the selector.
                match &sel {
                    PredSel::Record { pid, preds } => {
                        for p in preds.clone() {
                            self.record_rev_edge(&p, &mut ctx)?;
                        }
                        let preds = preds.clone();
                        let pid = pid.clone();
                        for k in 0..preds.len() - 1 {
                            let g = self.fresh("disp.eq");
                            ctx.push(icmp_inst(
                                &g,
                                IntPred::Eq,
                                IrType::I64,
                                pid.clone(),
                                Operand::ConstInt(k as i64),
                            ));
                            let target = self.rev_name_of(&preds[k]);
                            if k == preds.len() - 2 {
                                let last = self.rev_name_of(&preds[k + 1]);
                                ctx.push(condbr_inst(vop(&g), &target, &last));
                            } else {
                                let next = self
                                    .fresh(&format!("{}.disp{}", ctx.block.name, k + 1));
                                ctx.push(condbr_inst(vop(&g), &target, &next));
                                let finished = std::mem::replace(
                                    &mut ctx.block,
                                    BasicBlock::new(next),
                                );
                                self.rev.push(finished);
                            }
                        }
                    }
                    _ => self.emit_rev_terminator(&join, &mut ctx)?,
                }
            }
            self.rev.push(ctx.block);
        }
        // Patch the loop-counter phis now that all incomings are known.
        self.patch_rk_phis()?;
        Ok(())
    }

    /// The counter phi and IV reconstructions at the top of a reverse
    /// header block.
    fn emit_rev_header_prologue(
        &mut self,
        header: &str,
        ctx: &mut RevCtx,
    ) -> Result<(), SynthError> {
        let rk = self.rk_name(header);
        let rkdec = self.rkdec_name(header);
        // The phi itself is patched later; reserve its position with a
        // placeholder that lists no incomings yet.
        let mut phi = Instruction::new(Opcode::Phi);
        phi.result = Some(rk.clone());
        phi.ty = Some(IrType::I64);
        ctx.push(phi);
        ctx.push(bin_inst(
            &rkdec,
            Opcode::ISub,
            IrType::I64,
            vop(&rk),
            Operand::ConstInt(1),
        ));
        // Reconstructed IV values, downstream of the counters.
        let lp = self.plan.loop_plans[header].clone();
        if let Some(IvInfo { phi: ivname, init, .. }) = &lp.iv {
            // Record the reconstruction in the shared memo names:
            // in-header value = init + rk, in-body value = init + rkdec.
            let hdr_val = match init {
                Operand::ConstInt(0) => vop(&rk),
                init => {
                    let r = self.fresh(&format!("{ivname}.hdr"));
                    ctx.push(bin_inst(
                        &r,
                        Opcode::IAdd,
                        IrType::I64,
                        vop(&rk),
                        init.clone(),
                    ));
                    vop(&r)
                }
            };
            let body_val = match init {
                Operand::ConstInt(0) => vop(&rkdec),
                init => {
                    let r = self.fresh(&format!("{ivname}.body"));
                    ctx.push(bin_inst(
                        &r,
                        Opcode::IAdd,
                        IrType::I64,
                        vop(&rkdec),
                        init.clone(),
                    ));
                    vop(&r)
                }
            };
            let rt = self.loop_rt.get_mut(header).unwrap();
            rt.iv_header = hdr_val.as_value().map(|s| s.to_string());
            rt.iv_body = body_val.as_value().map(|s| s.to_string());
            ctx.memo.insert(ivname.clone(), hdr_val);
        }
        Ok(())
    }

    fn patch_rk_phis(&mut self) -> Result<(), SynthError> {
        for (header, rt) in &self.loop_rt {
            let rev_name = self.rev_name_of(header);
            let Some(block) = self.rev.iter_mut().find(|b| b.name == rev_name) else {
                continue;
            };
            let Some(phi) = block
                .instrs
                .iter_mut()
                .find(|i| i.opcode == Opcode::Phi && i.result.as_deref() == Some(&rt.rk))
            else {
                continue;
            };
            for (label, op) in &rt.entries {
                phi.operands.push(op.clone());
                phi.targets.push(label.clone());
            }
            if phi.operands.is_empty() {
                return Err(SynthError::Other {
                    function: self.primal.name.clone(),
                    what: format!("reverse counter of {header} has no incomings"),
                });
            }
        }
        Ok(())
    }

    /// Deferred frees and derivative returns, in the reverse of the entry.
    fn emit_epilogue(&mut self, ctx: &mut RevCtx) -> Result<(), SynthError> {
        // Frees of foreign pointers recorded in the forward pass.
        for (_, unit) in self.free_epilogue.clone() {
            let p = self.read_unit("free", &unit, ctx)?;
            ctx.push(free_inst(p));
        }
        // A split reverse half owns the tape: release its buffers.
        if self.shape == Shape::Reverse {
            for (off, kind, _) in self.blob_inits.clone() {
                if matches!(kind, CacheKind::FixedArray { .. } | CacheKind::Growable) {
                    let tape = vop(&self.tape_in_param());
                    let slot = if off == 0 {
                        tape
                    } else {
                        let p = self.fresh("blobfree.off");
                        ctx.push(ptradd_inst(&p, tape, Operand::ConstInt(off as i64)));
                        vop(&p)
                    };
                    let buf = self.fresh("blobfree.ptr");
                    ctx.push(load_inst(&buf, IrType::Ptr, slot));
                    ctx.push(free_inst(vop(&buf)));
                }
            }
            let blob = self.tape_in_param();
            ctx.push(free_inst(vop(&blob)));
        }
        // Derivatives of active scalar parameters.
        let actives: Vec<(String, IrType)> = self
            .primal
            .params
            .iter()
            .zip(&self.spec.params)
            .filter(|(_, t)| **t == ActivityToken::Active)
            .map(|(p, _)| (p.name.clone(), p.ty))
            .collect();
        match actives.as_slice() {
            [] => ctx.push(ret_inst(None, None)),
            [(name, ty)] => {
                let slot = self.dslot_of(name).expect("active scalar has a slot");
                let d = self.fresh("ret.d");
                ctx.push(load_inst(&d, *ty, vop(&slot)));
                ctx.push(ret_inst(Some(*ty), Some(vop(&d))));
            }
            many => {
                let out = self.deriv_out.clone().expect("derivative out-buffer");
                for (k, (name, ty)) in many.iter().enumerate() {
                    let slot = self.dslot_of(name).expect("active scalar has a slot");
                    let d = self.fresh("ret.d");
                    ctx.push(load_inst(&d, *ty, vop(&slot)));
                    let p = self.fresh("ret.dp");
                    ctx.push(ptradd_inst(
                        &p,
                        vop(&out),
                        Operand::ConstInt(8 * k as i64),
                    ));
                    ctx.push(store_inst(*ty, vop(&d), vop(&p)));
                }
                ctx.push(ret_inst(None, None));
            }
        }
        Ok(())
    }

    // ----- prologue and assembly -----

    fn build_prologue(&mut self) {
        // Adjoint accumulator slots for active float values.
        if self.shape != Shape::Augmented {
            let actives: Vec<String> = self.act.active_values.iter().cloned().collect();
            for v in actives {
                let is_float = self
                    .value_ty(&v)
                    .map(|t| t.is_float())
                    .unwrap_or(false);
                if !is_float {
                    continue;
                }
                let slot = self.fresh(&format!("d_{v}"));
                let mut a = alloc_inst(&slot, Operand::ConstInt(8), false);
                a.attrs.shadow = true;
                self.prologue.insert(0, a);
                self.dslot.insert(v, slot);
            }
        }
        // The tape blob of an augmented function.
        if self.shape == Shape::Augmented {
            let out = self.tape_out_param();
            if self.blob_size == 0 {
                self.prologue
                    .push(store_inst(IrType::Ptr, Operand::Null, vop(&out)));
            } else {
                let blob = self.fresh("tape.blob");
                self.prologue.push(alloc_inst(
                    &blob,
                    Operand::ConstInt(self.blob_size as i64),
                    true,
                ));
                self.blob_val = Some(blob.clone());
                for (off, kind, _) in self.blob_inits.clone() {
                    let slot = if off == 0 {
                        vop(&blob)
                    } else {
                        let p = self.fresh("blob.off");
                        self.prologue.push(ptradd_inst(
                            &p,
                            vop(&blob),
                            Operand::ConstInt(off as i64),
                        ));
                        vop(&p)
                    };
                    match kind {
                        CacheKind::ScalarSlot => {}
                        CacheKind::FixedArray { len } => {
                            let buf = self.fresh("blob.buf");
                            self.prologue.push(alloc_inst(
                                &buf,
                                Operand::ConstInt(8 * len as i64),
                                true,
                            ));
                            self.prologue
                                .push(store_inst(IrType::Ptr, vop(&buf), slot));
                        }
                        CacheKind::Growable => {
                            let data = self.fresh("blob.gdata");
                            self.prologue
                                .push(alloc_inst(&data, Operand::ConstInt(64), true));
                            self.prologue
                                .push(store_inst(IrType::Ptr, vop(&data), slot.clone()));
                            let capp = self.fresh("blob.gcap");
                            match &slot {
                                Operand::Value(s) => {
                                    self.prologue.push(ptradd_inst(
                                        &capp,
                                        vop(s),
                                        Operand::ConstInt(8),
                                    ));
                                }
                                _ => unreachable!(),
                            }
                            self.prologue.push(store_inst(
                                IrType::I64,
                                Operand::ConstInt(8),
                                vop(&capp),
                            ));
                        }
                    }
                }
                self.prologue
                    .push(store_inst(IrType::Ptr, vop(&blob), vop(&out)));
            }
        }
    }

    fn gradient_return(&self) -> Option<IrType> {
        match self.shape {
            Shape::Augmented => self.primal.return_type,
            _ => gradient_return_type(&self.primal, &self.spec),
        }
    }

    /// Applies collected label fixes to forward phis.
    fn patch_forward_phis(&mut self) {
        for b in &mut self.fwd {
            let block_primal = b.name.clone();
            for inst in &mut b.instrs {
                if inst.opcode != Opcode::Phi {
                    continue;
                }
                for t in &mut inst.targets {
                    let key = (block_primal.clone(), t.clone());
                    if let Some(ov) = self.edge_override.get(&key) {
                        *t = ov.clone();
                    } else if let Some(fin) = self.final_label.get(t) {
                        *t = fin.clone();
                    }
                }
            }
        }
    }

    fn build(&mut self) -> Result<IrFunction, SynthError> {
        self.build_signature();
        self.build_units()?;
        if self.plan.needs_control_stack() {
            let entry = self.primal.blocks[0].name.clone();
            let unit = self.make_unit("ctrl", CacheKind::Growable, IrType::I64, &entry);
            self.ctrl_unit = Some(unit);
        }
        self.build_prologue();

        let mut blocks: Vec<BasicBlock> = Vec::new();
        match self.shape {
            Shape::Combined => {
                self.build_forward()?;
                self.patch_forward_phis();
                self.build_reverse()?;
                blocks.extend(self.fwd.drain(..));
                blocks.extend(self.rev.drain(..));
            }
            Shape::Augmented => {
                self.build_forward()?;
                self.patch_forward_phis();
                blocks.extend(self.fwd.drain(..));
            }
            Shape::Reverse => {
                self.build_reverse()?;
                let rev: Vec<BasicBlock> = self.rev.drain(..).collect();
                // Entry: dispatch to the reverse of the executed return.
                if self.ret_blocks.len() > 1 {
                    let unit = self.exit_unit.clone().expect("exit unit for multi-ret");
                    let mut entry = BasicBlock::new(self.fresh("dispatch"));
                    let mut ctx = RevCtx::new("", entry.name.clone());
                    std::mem::swap(&mut ctx.block, &mut entry);
                    let id = self.read_unit("exitid", &unit, &mut ctx)?;
                    let rets: Vec<String> = self
                        .ret_blocks
                        .iter()
                        .map(|&r| self.primal.blocks[r].name.clone())
                        .collect();
                    for k in 0..rets.len() - 1 {
                        let g = self.fresh("dispatch.eq");
                        ctx.push(icmp_inst(
                            &g,
                            IntPred::Eq,
                            IrType::I64,
                            id.clone(),
                            Operand::ConstInt(k as i64),
                        ));
                        let t = self.rev_name_of(&rets[k]);
                        if k == rets.len() - 2 {
                            let f = self.rev_name_of(&rets[k + 1]);
                            ctx.push(condbr_inst(vop(&g), &t, &f));
                        } else {
                            let next = self.fresh("dispatch.next");
                            ctx.push(condbr_inst(vop(&g), &t, &next));
                            let finished = std::mem::replace(
                                &mut ctx.block,
                                BasicBlock::new(next),
                            );
                            blocks.push(finished);
                        }
                    }
                    blocks.insert(0, ctx.block);
                } else {
                    // Reverse of the single return block leads; it is
                    // already first in `rev` (reverse primal order puts
                    // later blocks first, and the return block is
                    // reachable top-down), so reorder explicitly.
                    let ret_name = self
                        .rev_name_of(&self.primal.blocks[self.ret_blocks[0]].name);
                    let pos = rev
                        .iter()
                        .position(|b| b.name == ret_name)
                        .expect("reverse of the return block exists");
                    let mut rev = rev;
                    let lead = rev.remove(pos);
                    blocks.push(lead);
                    blocks.extend(rev);
                    // Prologue goes into the lead block below.
                    let f = self.assemble(blocks);
                    return Ok(f);
                }
                blocks.extend(rev);
            }
        }
        Ok(self.assemble(blocks))
    }

    fn assemble(&mut self, mut blocks: Vec<BasicBlock>) -> IrFunction {
        if !self.prologue.is_empty() {
            let entry = &mut blocks[0];
            let mut instrs = std::mem::take(&mut self.prologue);
            // Entry blocks cannot have phis (no predecessors), so a plain
            // prepend is safe.
            instrs.extend(std::mem::take(&mut entry.instrs));
            entry.instrs = instrs;
        }
        IrFunction {
            name: self.new_name.clone(),
            params: self.params.clone(),
            return_type: self.gradient_return(),
            blocks,
            fast: self.primal.fast,
        }
    }
}

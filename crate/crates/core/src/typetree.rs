//! Interprocedural type analysis.
//!
//! Every value gets a type tree: a map from byte-offset paths to the
//! scalar kind known to live at that offset. `{[]:Pointer, [0]:Double,
//! [8]:Integer}` describes a pointer to a struct holding a double then an
//! integer. Trees are seeded from TBAA metadata on memory operations and
//! grown to a least fixed point by per-opcode transfer rules; this is an
//! abstract interpretation over a flat lattice with no top: two distinct
//! concrete kinds meeting at one path is a hard conflict, because a
//! gradient for such a program cannot be synthesized.

use crate::ir::{
    Instruction, IrFunction, IrModule, IrType, Opcode, Operand, TbaaTag,
};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Maximum offset-path depth; deeper entries are dropped (widening), which
/// bounds pointer-to-pointer chains and guarantees termination.
pub const MAX_PATH_DEPTH: usize = 6;

/// Hard cap on fixed-point sweeps; reaching it is a bug, not a widening.
pub const MAX_ITERATIONS: usize = 1000;

/// Scalar kind at a byte offset. Absence from a tree means unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BaseType {
    Float64,
    Float32,
    Integer,
    Pointer,
}

impl BaseType {
    pub fn from_ir(ty: IrType) -> BaseType {
        match ty {
            IrType::F64 => BaseType::Float64,
            IrType::F32 => BaseType::Float32,
            IrType::I1 | IrType::I32 | IrType::I64 => BaseType::Integer,
            IrType::Ptr => BaseType::Pointer,
        }
    }

    pub fn from_tbaa(tag: TbaaTag) -> Option<BaseType> {
        match tag {
            TbaaTag::Double => Some(BaseType::Float64),
            TbaaTag::Float => Some(BaseType::Float32),
            TbaaTag::Int => Some(BaseType::Integer),
            TbaaTag::Ptr => Some(BaseType::Pointer),
            TbaaTag::Any => None,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, BaseType::Float64 | BaseType::Float32)
    }

    /// Byte span the kind occupies for overlap checks. Integer spans a
    /// single byte: integer widths vary and a 1-byte footprint is the
    /// sound minimum.
    pub fn span(self) -> i64 {
        match self {
            BaseType::Float64 | BaseType::Pointer => 8,
            BaseType::Float32 => 4,
            BaseType::Integer => 1,
        }
    }

    pub fn paper_name(self) -> &'static str {
        match self {
            BaseType::Float64 => "Double",
            BaseType::Float32 => "Float",
            BaseType::Integer => "Integer",
            BaseType::Pointer => "Pointer",
        }
    }
}

/// One component of an offset path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PathElem {
    /// Concrete byte offset.
    Byte(i64),
    /// Every offset (unknown-stride indexing).
    Star,
}

pub type Path = Vec<PathElem>;

fn fmt_path(path: &[PathElem]) -> String {
    let mut s = String::from("[");
    for (i, e) in path.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        match e {
            PathElem::Byte(o) => s.push_str(&o.to_string()),
            PathElem::Star => s.push('*'),
        }
    }
    s.push(']');
    s
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("type conflict on %{value}: {} is both {} and {}", fmt_path(path), kind_a.paper_name(), kind_b.paper_name())]
pub struct TypeConflict {
    pub function: String,
    pub value: String,
    pub path: Path,
    pub kind_a: BaseType,
    pub kind_b: BaseType,
}

/// Byte-offset-indexed map of inferred kinds for one value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TypeTree {
    entries: BTreeMap<Path, BaseType>,
}

impl TypeTree {
    pub fn new() -> TypeTree {
        TypeTree::default()
    }

    pub fn of(kind: BaseType) -> TypeTree {
        let mut t = TypeTree::new();
        t.entries.insert(Vec::new(), kind);
        t
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Path, &BaseType)> {
        self.entries.iter()
    }

    pub fn root_kind(&self) -> Option<BaseType> {
        self.entries.get(&Vec::new()).copied()
    }

    /// Kind at a single concrete offset below the root pointer, falling
    /// back to a star entry.
    pub fn pointee_at(&self, offset: i64) -> Option<BaseType> {
        if let Some(k) = self.entries.get(&vec![PathElem::Byte(offset)]) {
            return Some(*k);
        }
        self.entries.get(&vec![PathElem::Star]).copied()
    }

    /// True if any entry (at any depth) is a float kind.
    pub fn contains_float(&self) -> bool {
        self.entries.values().any(|k| k.is_float())
    }

    /// Inserts `kind` at `path`, materializing Pointer prefixes.
    /// Returns whether the tree changed.
    fn insert(
        &mut self,
        path: &[PathElem],
        kind: BaseType,
        ctx: &ConflictCtx,
    ) -> Result<bool, TypeConflict> {
        if path.len() > MAX_PATH_DEPTH {
            return Ok(false); // widened away
        }
        let mut changed = false;
        for k in 0..path.len() {
            changed |= self.insert_one(&path[..k], BaseType::Pointer, ctx)?;
        }
        changed |= self.insert_one(path, kind, ctx)?;
        Ok(changed)
    }

    fn insert_one(
        &mut self,
        path: &[PathElem],
        kind: BaseType,
        ctx: &ConflictCtx,
    ) -> Result<bool, TypeConflict> {
        if let Some(&existing) = self.entries.get(path) {
            if existing == kind {
                return Ok(false);
            }
            return Err(ctx.conflict(path.to_vec(), existing, kind));
        }
        // Check siblings: same prefix, different last component.
        if let Some((last, prefix)) = path.split_last() {
            for (other, &other_kind) in self.entries.iter() {
                let Some((olast, oprefix)) = other.split_last() else {
                    continue;
                };
                if oprefix != prefix {
                    continue;
                }
                let clash = match (last, olast) {
                    (PathElem::Star, PathElem::Byte(_))
                    | (PathElem::Byte(_), PathElem::Star) => other_kind != kind,
                    (PathElem::Byte(a), PathElem::Byte(b)) => {
                        let (sa, sb) = (kind.span(), other_kind.span());
                        let overlap = a < &(b + sb) && b < &(a + sa);
                        overlap && *a != *b
                            || (*a == *b && other_kind != kind)
                    }
                    (PathElem::Star, PathElem::Star) => other_kind != kind,
                };
                if clash {
                    return Err(ctx.conflict(path.to_vec(), other_kind, kind));
                }
            }
        }
        self.entries.insert(path.to_vec(), kind);
        Ok(true)
    }

    /// Lattice join: union of the other tree's entries into this one.
    fn join(&mut self, other: &TypeTree, ctx: &ConflictCtx) -> Result<bool, TypeConflict> {
        let mut changed = false;
        for (path, kind) in &other.entries {
            changed |= self.insert(path, *kind, ctx)?;
        }
        Ok(changed)
    }

    /// The tree seen through a load/deref at constant `offset`: entries
    /// `[offset, rest...]` become `[rest...]`, star entries pass through.
    fn descend(&self, offset: i64) -> TypeTree {
        let mut out = TypeTree::new();
        for (path, kind) in &self.entries {
            match path.split_first() {
                Some((PathElem::Byte(o), rest)) if *o == offset => {
                    out.entries.insert(rest.to_vec(), *kind);
                }
                Some((PathElem::Star, rest)) => {
                    out.entries.insert(rest.to_vec(), *kind);
                }
                _ => {}
            }
        }
        out
    }

    /// Inverse of `descend`: wrap every entry under `[offset, ...]`.
    fn ascend(&self, offset: i64) -> TypeTree {
        let mut out = TypeTree::of(BaseType::Pointer);
        for (path, kind) in &self.entries {
            let mut p = Vec::with_capacity(path.len() + 1);
            p.push(PathElem::Byte(offset));
            p.extend_from_slice(path);
            if p.len() <= MAX_PATH_DEPTH {
                out.entries.insert(p, *kind);
            }
        }
        out
    }

    /// Shift first-level concrete offsets by `delta`, dropping entries
    /// that would become negative. Star entries are preserved.
    fn shift(&self, delta: i64) -> TypeTree {
        let mut out = TypeTree::new();
        for (path, kind) in &self.entries {
            match path.split_first() {
                None => {
                    out.entries.insert(Vec::new(), *kind);
                }
                Some((PathElem::Byte(o), rest)) => {
                    let no = o + delta;
                    if no >= 0 {
                        let mut p = vec![PathElem::Byte(no)];
                        p.extend_from_slice(rest);
                        out.entries.insert(p, *kind);
                    }
                }
                Some((PathElem::Star, rest)) => {
                    let mut p = vec![PathElem::Star];
                    p.extend_from_slice(rest);
                    out.entries.insert(p, *kind);
                }
            }
        }
        out
    }

    /// Collapse first-level entries to a star entry when their kinds
    /// agree; used for pointer arithmetic with a dynamic offset. Deeper
    /// structure is dropped. Returns an empty pointee when kinds differ.
    fn collapse_to_star(&self) -> TypeTree {
        let mut out = TypeTree::new();
        if let Some(k) = self.root_kind() {
            out.entries.insert(Vec::new(), k);
        }
        let mut kinds: Vec<BaseType> = Vec::new();
        for (path, kind) in &self.entries {
            if path.len() == 1 {
                kinds.push(*kind);
            }
        }
        kinds.sort_unstable();
        kinds.dedup();
        if let [k] = kinds.as_slice() {
            out.entries.insert(vec![PathElem::Star], *k);
        }
        out
    }
}

impl fmt::Display for TypeTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (path, kind)) in self.entries.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}:{}", fmt_path(path), kind.paper_name())?;
        }
        write!(f, "}}")
    }
}

struct ConflictCtx {
    function: String,
    value: String,
}

impl ConflictCtx {
    fn conflict(&self, path: Path, a: BaseType, b: BaseType) -> TypeConflict {
        TypeConflict {
            function: self.function.clone(),
            value: self.value.clone(),
            path,
            kind_a: a,
            kind_b: b,
        }
    }
}

/// Per-function value trees plus interprocedural parameter and return
/// summaries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TypeEnv {
    values: BTreeMap<String, BTreeMap<String, TypeTree>>,
    params: BTreeMap<String, Vec<TypeTree>>,
    returns: BTreeMap<String, TypeTree>,
    /// Fixed-point sweeps `propagate` needed.
    pub iterations: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum TypeError {
    #[error(transparent)]
    Conflict(#[from] TypeConflict),
    #[error("type analysis did not converge within {MAX_ITERATIONS} sweeps")]
    NoFixpoint,
    #[error("unknown value %{value} in @{function}")]
    UnknownValue { function: String, value: String },
}

impl TypeEnv {
    pub fn value_tree(&self, function: &str, value: &str) -> Option<&TypeTree> {
        self.values.get(function)?.get(value)
    }

    pub fn param_summary(&self, function: &str) -> Option<&Vec<TypeTree>> {
        self.params.get(function)
    }

    pub fn return_summary(&self, function: &str) -> Option<&TypeTree> {
        self.returns.get(function)
    }

    /// All value trees of one function, for display.
    pub fn function_trees(&self, function: &str) -> Option<&BTreeMap<String, TypeTree>> {
        self.values.get(function)
    }

    fn join_value(
        &mut self,
        function: &str,
        value: &str,
        tree: &TypeTree,
    ) -> Result<bool, TypeConflict> {
        if tree.is_empty() {
            return Ok(false);
        }
        let ctx = ConflictCtx {
            function: function.to_string(),
            value: value.to_string(),
        };
        self.values
            .entry(function.to_string())
            .or_default()
            .entry(value.to_string())
            .or_default()
            .join(tree, &ctx)
    }

    fn tree_of_operand(&self, m: &IrModule, function: &str, op: &Operand) -> TypeTree {
        match op {
            Operand::Value(v) => self
                .value_tree(function, v)
                .cloned()
                .unwrap_or_default(),
            Operand::ConstFloat(_) => TypeTree::of(BaseType::Float64),
            Operand::ConstInt(_) => TypeTree::of(BaseType::Integer),
            Operand::Null => TypeTree::of(BaseType::Pointer),
            Operand::Global(g) => {
                let mut t = TypeTree::of(BaseType::Pointer);
                if let Some(global) = m.global(g) {
                    if let crate::ir::GlobalInit::Scalars(ty, _) = &global.init {
                        let ctx = ConflictCtx {
                            function: function.to_string(),
                            value: format!("@{g}"),
                        };
                        let _ = t.insert(
                            &[PathElem::Star],
                            BaseType::from_ir(*ty),
                            &ctx,
                        );
                    } else {
                        let ctx = ConflictCtx {
                            function: function.to_string(),
                            value: format!("@{g}"),
                        };
                        let _ = t.insert(&[PathElem::Star], BaseType::Pointer, &ctx);
                    }
                }
                t
            }
            Operand::Token(_) => TypeTree::new(),
        }
    }

    /// Joins `tree` into the target of an operand, when the operand is a
    /// named value (literals and globals have fixed trees).
    fn join_operand(
        &mut self,
        function: &str,
        op: &Operand,
        tree: &TypeTree,
    ) -> Result<bool, TypeConflict> {
        match op {
            Operand::Value(v) => self.join_value(function, v, tree),
            _ => Ok(false),
        }
    }
}

/// Initializes type trees from TBAA metadata on loads, stores and memcpy.
/// All other values start unknown.
pub fn seed_from_tbaa(m: &IrModule) -> Result<TypeEnv, TypeError> {
    let mut env = TypeEnv::default();
    for f in &m.functions {
        for b in &f.blocks {
            for inst in &b.instrs {
                let Some(tag) = inst.tbaa else { continue };
                let Some(kind) = BaseType::from_tbaa(tag) else {
                    continue;
                };
                match inst.opcode {
                    Opcode::Load => {
                        let mut addr = TypeTree::of(BaseType::Pointer);
                        addr.insert(
                            &[PathElem::Byte(0)],
                            kind,
                            &ConflictCtx {
                                function: f.name.clone(),
                                value: operand_name(&inst.operands[0]),
                            },
                        )?;
                        env.join_operand(&f.name, &inst.operands[0], &addr)?;
                        if let Some(res) = &inst.result {
                            env.join_value(&f.name, res, &TypeTree::of(kind))?;
                        }
                    }
                    Opcode::Store => {
                        let mut addr = TypeTree::of(BaseType::Pointer);
                        addr.insert(
                            &[PathElem::Byte(0)],
                            kind,
                            &ConflictCtx {
                                function: f.name.clone(),
                                value: operand_name(&inst.operands[1]),
                            },
                        )?;
                        env.join_operand(&f.name, &inst.operands[1], &addr)?;
                        env.join_operand(&f.name, &inst.operands[0], &TypeTree::of(kind))?;
                    }
                    Opcode::Memcpy => {
                        let mut t = TypeTree::of(BaseType::Pointer);
                        t.insert(
                            &[PathElem::Star],
                            kind,
                            &ConflictCtx {
                                function: f.name.clone(),
                                value: operand_name(&inst.operands[0]),
                            },
                        )?;
                        env.join_operand(&f.name, &inst.operands[0], &t)?;
                        env.join_operand(&f.name, &inst.operands[1], &t)?;
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(env)
}

fn operand_name(op: &Operand) -> String {
    match op {
        Operand::Value(v) => v.clone(),
        Operand::Global(g) => format!("@{g}"),
        other => format!("{other:?}"),
    }
}

/// Runs all type propagation rules to a least fixed point.
pub fn propagate(mut env: TypeEnv, m: &IrModule) -> Result<TypeEnv, TypeError> {
    let mut iterations = 0usize;
    loop {
        iterations += 1;
        if iterations > MAX_ITERATIONS {
            return Err(TypeError::NoFixpoint);
        }
        let mut changed = false;
        for f in &m.functions {
            if f.is_declaration() {
                continue;
            }
            changed |= propagate_function(&mut env, m, f)?;
        }
        if !changed {
            break;
        }
    }
    env.iterations = iterations;
    Ok(env)
}

fn propagate_function(
    env: &mut TypeEnv,
    m: &IrModule,
    f: &IrFunction,
) -> Result<bool, TypeError> {
    let mut changed = false;
    // Parameter kinds from the signature, plus interprocedural summaries.
    for (i, p) in f.params.iter().enumerate() {
        changed |= env.join_value(&f.name, &p.name, &TypeTree::of(BaseType::from_ir(p.ty)))?;
        let summary = env
            .params
            .get(&f.name)
            .and_then(|v| v.get(i))
            .cloned()
            .unwrap_or_default();
        changed |= env.join_value(&f.name, &p.name, &summary)?;
        // ... and back: refinements discovered in the body flow out.
        let body_tree = env
            .value_tree(&f.name, &p.name)
            .cloned()
            .unwrap_or_default();
        let slot = env
            .params
            .entry(f.name.clone())
            .or_insert_with(|| vec![TypeTree::new(); f.params.len()]);
        if slot.len() < f.params.len() {
            slot.resize(f.params.len(), TypeTree::new());
        }
        let ctx = ConflictCtx {
            function: f.name.clone(),
            value: p.name.clone(),
        };
        changed |= slot[i].join(&body_tree, &ctx)?;
    }
    let order = crate::analysis::Cfg::build(f).reverse_post_order();
    for bi in order {
        let block = &f.blocks[bi];
        for inst in &block.instrs {
            changed |= transfer(env, m, f, inst)?;
        }
    }
    Ok(changed)
}

fn transfer(
    env: &mut TypeEnv,
    m: &IrModule,
    f: &IrFunction,
    inst: &Instruction,
) -> Result<bool, TypeError> {
    let fname = &f.name;
    let mut changed = false;
    let direct = |env: &mut TypeEnv, op: &Operand, kind: BaseType| {
        env.join_operand(fname, op, &TypeTree::of(kind))
    };
    match inst.opcode {
        Opcode::FAdd | Opcode::FSub | Opcode::FMul | Opcode::FDiv | Opcode::FNeg => {
            let kind = BaseType::from_ir(inst.ty.unwrap());
            for op in &inst.operands {
                changed |= direct(env, op, kind)?;
            }
            if let Some(res) = &inst.result {
                changed |= env.join_value(fname, res, &TypeTree::of(kind))?;
            }
        }
        Opcode::IAdd | Opcode::ISub | Opcode::IMul => {
            for op in &inst.operands {
                changed |= direct(env, op, BaseType::Integer)?;
            }
            if let Some(res) = &inst.result {
                changed |= env.join_value(fname, res, &TypeTree::of(BaseType::Integer))?;
            }
        }
        Opcode::ICmp(_) => {
            for op in &inst.operands {
                changed |= direct(env, op, BaseType::Integer)?;
            }
            if let Some(res) = &inst.result {
                changed |= env.join_value(fname, res, &TypeTree::of(BaseType::Integer))?;
            }
        }
        Opcode::FCmp(_) => {
            let kind = BaseType::from_ir(inst.ty.unwrap());
            for op in &inst.operands {
                changed |= direct(env, op, kind)?;
            }
            if let Some(res) = &inst.result {
                changed |= env.join_value(fname, res, &TypeTree::of(BaseType::Integer))?;
            }
        }
        Opcode::SiToFp => {
            changed |= direct(env, &inst.operands[0], BaseType::Integer)?;
            if let Some(res) = &inst.result {
                changed |= env.join_value(
                    fname,
                    res,
                    &TypeTree::of(BaseType::from_ir(inst.ty.unwrap())),
                )?;
            }
        }
        Opcode::Select | Opcode::Phi => {
            let (cond, vals) = if inst.opcode == Opcode::Select {
                (Some(&inst.operands[0]), &inst.operands[1..])
            } else {
                (None, &inst.operands[..])
            };
            if let Some(c) = cond {
                changed |= direct(env, c, BaseType::Integer)?;
            }
            let kind = BaseType::from_ir(inst.ty.unwrap());
            if let Some(res) = &inst.result {
                changed |= env.join_value(fname, res, &TypeTree::of(kind))?;
                // Join incoming trees into the result and flow the result
                // back into the incomings.
                let res_tree = env.value_tree(fname, res).cloned().unwrap_or_default();
                for op in vals {
                    let t = env.tree_of_operand(m, fname, op);
                    changed |= env.join_value(fname, res, &t)?;
                    changed |= env.join_operand(fname, op, &res_tree)?;
                }
            }
        }
        Opcode::Alloc => {
            changed |= direct(env, &inst.operands[0], BaseType::Integer)?;
            if let Some(res) = &inst.result {
                changed |= env.join_value(fname, res, &TypeTree::of(BaseType::Pointer))?;
            }
        }
        Opcode::Free => {
            changed |= direct(env, &inst.operands[0], BaseType::Pointer)?;
        }
        Opcode::Load => {
            let ty = inst.ty.unwrap();
            let kind = BaseType::from_ir(ty);
            let addr = &inst.operands[0];
            // Address is a pointer to the loaded kind at offset 0.
            let mut addr_tree = TypeTree::of(BaseType::Pointer);
            addr_tree.insert(
                &[PathElem::Byte(0)],
                kind,
                &ConflictCtx {
                    function: fname.clone(),
                    value: operand_name(addr),
                },
            )?;
            changed |= env.join_operand(fname, addr, &addr_tree)?;
            if let Some(res) = &inst.result {
                changed |= env.join_value(fname, res, &TypeTree::of(kind))?;
                // Deep exchange through the dereference.
                let a = env.tree_of_operand(m, fname, addr);
                changed |= env.join_value(fname, res, &a.descend(0))?;
                let r = env.value_tree(fname, res).cloned().unwrap_or_default();
                changed |= env.join_operand(fname, addr, &r.ascend(0))?;
            }
        }
        Opcode::Store => {
            let ty = inst.ty.unwrap();
            let kind = BaseType::from_ir(ty);
            let val = &inst.operands[0];
            let addr = &inst.operands[1];
            let mut addr_tree = TypeTree::of(BaseType::Pointer);
            addr_tree.insert(
                &[PathElem::Byte(0)],
                kind,
                &ConflictCtx {
                    function: fname.clone(),
                    value: operand_name(addr),
                },
            )?;
            changed |= env.join_operand(fname, addr, &addr_tree)?;
            changed |= direct(env, val, kind)?;
            let v = env.tree_of_operand(m, fname, val);
            changed |= env.join_operand(fname, addr, &v.ascend(0))?;
            let a = env.tree_of_operand(m, fname, addr);
            changed |= env.join_operand(fname, val, &a.descend(0))?;
        }
        Opcode::Memcpy => {
            let dst = &inst.operands[0];
            let src = &inst.operands[1];
            changed |= direct(env, dst, BaseType::Pointer)?;
            changed |= direct(env, src, BaseType::Pointer)?;
            changed |= direct(env, &inst.operands[2], BaseType::Integer)?;
            let len = match &inst.operands[2] {
                Operand::ConstInt(n) => Some(*n),
                _ => None,
            };
            let d = env.tree_of_operand(m, fname, dst);
            let s = env.tree_of_operand(m, fname, src);
            changed |= env.join_operand(fname, dst, &clip_pointee(&s, len))?;
            changed |= env.join_operand(fname, src, &clip_pointee(&d, len))?;
        }
        Opcode::PtrAdd => {
            let base = &inst.operands[0];
            changed |= direct(env, base, BaseType::Pointer)?;
            changed |= direct(env, &inst.operands[1], BaseType::Integer)?;
            if let Some(res) = &inst.result {
                changed |= env.join_value(fname, res, &TypeTree::of(BaseType::Pointer))?;
                let b = env.tree_of_operand(m, fname, base);
                let r = env.value_tree(fname, res).cloned().unwrap_or_default();
                match &inst.operands[1] {
                    Operand::ConstInt(k) => {
                        changed |= env.join_value(fname, res, &b.shift(-k))?;
                        changed |= env.join_operand(fname, base, &r.shift(*k))?;
                    }
                    _ => {
                        changed |= env.join_value(fname, res, &b.collapse_to_star())?;
                        changed |= env.join_operand(fname, base, &r.collapse_to_star())?;
                    }
                }
            }
        }
        Opcode::Call => {
            let callee = inst.callee.as_deref().unwrap_or_default();
            if callee == crate::autodiff::AUTODIFF_INTRINSIC {
                return Ok(changed);
            }
            if let Some(res) = &inst.result {
                changed |= env.join_value(
                    fname,
                    res,
                    &TypeTree::of(BaseType::from_ir(inst.ty.unwrap())),
                )?;
            }
            let Some(cf) = m.function(callee) else {
                return Ok(changed);
            };
            let cf_name = cf.name.clone();
            let nparams = cf.params.len();
            for (i, arg) in inst.operands.iter().enumerate().take(nparams) {
                let a = env.tree_of_operand(m, fname, arg);
                let slot = env
                    .params
                    .entry(cf_name.clone())
                    .or_insert_with(|| vec![TypeTree::new(); nparams]);
                if slot.len() < nparams {
                    slot.resize(nparams, TypeTree::new());
                }
                let ctx = ConflictCtx {
                    function: cf_name.clone(),
                    value: format!("param{i}"),
                };
                changed |= slot[i].join(&a, &ctx)?;
                // Callee knowledge flows back to the argument.
                let summary = env.params[&cf_name][i].clone();
                changed |= env.join_operand(fname, arg, &summary)?;
            }
            // Return summary <-> call result.
            if let Some(res) = &inst.result {
                let summary = env.returns.get(&cf_name).cloned().unwrap_or_default();
                changed |= env.join_value(fname, res, &summary)?;
                let r = env.value_tree(fname, res).cloned().unwrap_or_default();
                let ctx = ConflictCtx {
                    function: cf_name.clone(),
                    value: "return".to_string(),
                };
                changed |= env
                    .returns
                    .entry(cf_name.clone())
                    .or_default()
                    .join(&r, &ctx)?;
            }
        }
        Opcode::CallInd => {
            changed |= direct(env, &inst.operands[0], BaseType::Pointer)?;
            if let Some(res) = &inst.result {
                changed |= env.join_value(
                    fname,
                    res,
                    &TypeTree::of(BaseType::from_ir(inst.ty.unwrap())),
                )?;
            }
        }
        Opcode::Ret => {
            if let Some(op) = inst.operands.first() {
                changed |= direct(env, op, BaseType::from_ir(inst.ty.unwrap()))?;
                let t = env.tree_of_operand(m, fname, op);
                let ctx = ConflictCtx {
                    function: fname.clone(),
                    value: "return".to_string(),
                };
                changed |= env
                    .returns
                    .entry(fname.clone())
                    .or_default()
                    .join(&t, &ctx)?;
                let summary = env.returns.get(fname).cloned().unwrap_or_default();
                changed |= env.join_operand(fname, op, &summary)?;
            }
        }
        Opcode::CondBr => {
            changed |= direct(env, &inst.operands[0], BaseType::Integer)?;
        }
        Opcode::Br => {}
        Opcode::Intrinsic(i) => {
            let kind = BaseType::from_ir(inst.ty.unwrap());
            for op in &inst.operands {
                changed |= direct(env, op, kind)?;
            }
            let _ = i;
            if let Some(res) = &inst.result {
                changed |= env.join_value(fname, res, &TypeTree::of(kind))?;
            }
        }
    }
    Ok(changed)
}

/// Restrict a tree's first-level pointee entries to the first `len` bytes
/// when the copy length is known.
fn clip_pointee(t: &TypeTree, len: Option<i64>) -> TypeTree {
    let mut out = TypeTree::new();
    for (path, kind) in &t.entries {
        let keep = match (path.first(), len) {
            (None, _) => true,
            (Some(PathElem::Star), _) => true,
            (Some(PathElem::Byte(o)), Some(n)) => o + kind.span() <= n,
            (Some(PathElem::Byte(_)), None) => true,
        };
        if keep && !path.is_empty() {
            out.entries.insert(path.clone(), *kind);
        } else if keep && path.is_empty() {
            out.entries.insert(Vec::new(), *kind);
        }
    }
    out
}

/// Full analysis: seed, then propagate to a fixed point.
pub fn analyze(m: &IrModule) -> Result<TypeEnv, TypeError> {
    let env = seed_from_tbaa(m)?;
    propagate(env, m)
}

/// Final tree of one value. Errors when the value does not exist in the
/// function.
pub fn query(env: &TypeEnv, m: &IrModule, function: &str, value: &str) -> Result<TypeTree, TypeError> {
    let f = m
        .function(function)
        .ok_or_else(|| TypeError::UnknownValue {
            function: function.to_string(),
            value: value.to_string(),
        })?;
    let exists = f.params.iter().any(|p| p.name == value)
        || f.instrs().any(|i| i.result.as_deref() == Some(value));
    if !exists {
        return Err(TypeError::UnknownValue {
            function: function.to_string(),
            value: value.to_string(),
        });
    }
    Ok(env
        .value_tree(function, value)
        .cloned()
        .unwrap_or_default())
}

//! The execution engine. Modules are resolved once per run into an
//! index-based form (value names to frame slots, blocks and callees to
//! indices), then executed by a small-step loop with an explicit call
//! stack.

use super::*;
use crate::ir::{
    FloatPred, GlobalInit, InstAttrs, Instruction, IntPred, Intrinsic, IrFunction,
    IrModule, IrType, Opcode, Operand,
};
use std::collections::HashMap;

#[derive(Debug, Clone)]
enum ROp {
    Slot(u32),
    Const(Value),
    Func(usize),
    GlobalAddr(usize),
}

#[derive(Debug, Clone)]
struct RPhi {
    dst: u32,
    incoming: Vec<(usize, ROp)>,
    opkey: u32,
}

#[derive(Debug, Clone)]
struct RInst {
    op: Opcode,
    ty: Option<IrType>,
    dst: Option<u32>,
    args: Vec<ROp>,
    t0: usize,
    t1: usize,
    callee: Option<usize>,
    attrs: InstAttrs,
    label: Option<String>,
    opkey: u32,
}

#[derive(Debug, Clone)]
struct RBlock {
    phis: Vec<RPhi>,
    instrs: Vec<RInst>,
}

#[derive(Debug, Clone)]
struct RFunc {
    name: String,
    param_slots: Vec<(u32, IrType)>,
    nslots: usize,
    blocks: Vec<RBlock>,
    is_declaration: bool,
}

struct Resolver<'a> {
    m: &'a IrModule,
    fn_index: HashMap<&'a str, usize>,
    global_index: HashMap<&'a str, usize>,
    opkeys: Vec<String>,
    opkey_index: HashMap<String, u32>,
}

impl<'a> Resolver<'a> {
    fn opkey(&mut self, op: Opcode, ty: Option<IrType>) -> u32 {
        let key = match ty {
            Some(t) => format!("{}.{t}", op.mnemonic()),
            None => op.mnemonic().to_string(),
        };
        if let Some(&i) = self.opkey_index.get(&key) {
            return i;
        }
        let i = self.opkeys.len() as u32;
        self.opkeys.push(key.clone());
        self.opkey_index.insert(key, i);
        i
    }

    fn resolve_function(&mut self, f: &IrFunction) -> Result<RFunc, RuntimeError> {
        let mut slots: HashMap<&str, u32> = HashMap::new();
        for p in &f.params {
            let idx = slots.len() as u32;
            slots.insert(&p.name, idx);
        }
        for b in &f.blocks {
            for inst in &b.instrs {
                if let Some(r) = &inst.result {
                    let idx = slots.len() as u32;
                    slots.insert(r, idx);
                }
            }
        }
        let block_index: HashMap<&str, usize> = f
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.name.as_str(), i))
            .collect();
        let mut blocks = Vec::with_capacity(f.blocks.len());
        for b in &f.blocks {
            let mut phis = Vec::new();
            let mut instrs = Vec::new();
            for inst in &b.instrs {
                if inst.opcode == Opcode::Phi {
                    let ty = inst.ty.unwrap();
                    let incoming = inst
                        .operands
                        .iter()
                        .zip(&inst.targets)
                        .map(|(op, label)| {
                            (block_index[label.as_str()], self.rop(&slots, op, Some(ty)))
                        })
                        .collect();
                    phis.push(RPhi {
                        dst: slots[inst.result.as_deref().unwrap()],
                        incoming,
                        opkey: self.opkey(Opcode::Phi, inst.ty),
                    });
                } else {
                    instrs.push(self.rinst(f, &slots, &block_index, inst));
                }
            }
            blocks.push(RBlock { phis, instrs });
        }
        Ok(RFunc {
            name: f.name.clone(),
            param_slots: f
                .params
                .iter()
                .map(|p| (slots[p.name.as_str()], p.ty))
                .collect(),
            nslots: slots.len(),
            blocks,
            is_declaration: f.is_declaration(),
        })
    }

    fn rop(&self, slots: &HashMap<&str, u32>, op: &Operand, ty: Option<IrType>) -> ROp {
        match op {
            Operand::Value(v) => ROp::Slot(slots[v.as_str()]),
            Operand::ConstFloat(x) => ROp::Const(match ty {
                Some(IrType::F32) => Value::F32(*x as f32),
                _ => Value::F64(*x),
            }),
            Operand::ConstInt(x) => ROp::Const(match ty {
                Some(IrType::I32) => Value::I32(*x as i32),
                Some(IrType::I1) => Value::I1(*x != 0),
                _ => Value::I64(*x),
            }),
            Operand::Null => ROp::Const(Value::Ptr(PtrVal::Null)),
            Operand::Global(g) => {
                if let Some(&fi) = self.fn_index.get(g.as_str()) {
                    ROp::Func(fi)
                } else if let Some(&gi) = self.global_index.get(g.as_str()) {
                    ROp::GlobalAddr(gi)
                } else {
                    ROp::Const(Value::Ptr(PtrVal::Null))
                }
            }
            Operand::Token(_) => ROp::Const(Value::I64(0)),
        }
    }

    fn rinst(
        &mut self,
        f: &IrFunction,
        slots: &HashMap<&str, u32>,
        blocks: &HashMap<&str, usize>,
        inst: &Instruction,
    ) -> RInst {
        let ty = inst.ty;
        let dst = inst.result.as_deref().map(|r| slots[r]);
        let opkey = self.opkey(inst.opcode, ty);
        let mut args: Vec<ROp> = Vec::with_capacity(inst.operands.len());
        match inst.opcode {
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
            | Opcode::Intrinsic(_)
            | Opcode::SiToFp
            | Opcode::Ret => {
                for op in &inst.operands {
                    args.push(self.rop(slots, op, ty));
                }
            }
            Opcode::Select => {
                args.push(self.rop(slots, &inst.operands[0], Some(IrType::I1)));
                args.push(self.rop(slots, &inst.operands[1], ty));
                args.push(self.rop(slots, &inst.operands[2], ty));
            }
            Opcode::CondBr => {
                args.push(self.rop(slots, &inst.operands[0], Some(IrType::I1)));
            }
            Opcode::Alloc => {
                args.push(self.rop(slots, &inst.operands[0], Some(IrType::I64)));
            }
            Opcode::Free | Opcode::Load => {
                args.push(self.rop(slots, &inst.operands[0], Some(IrType::Ptr)));
            }
            Opcode::Store => {
                args.push(self.rop(slots, &inst.operands[0], ty));
                args.push(self.rop(slots, &inst.operands[1], Some(IrType::Ptr)));
            }
            Opcode::Memcpy => {
                args.push(self.rop(slots, &inst.operands[0], Some(IrType::Ptr)));
                args.push(self.rop(slots, &inst.operands[1], Some(IrType::Ptr)));
                args.push(self.rop(slots, &inst.operands[2], Some(IrType::I64)));
            }
            Opcode::PtrAdd => {
                args.push(self.rop(slots, &inst.operands[0], Some(IrType::Ptr)));
                args.push(self.rop(slots, &inst.operands[1], Some(IrType::I64)));
            }
            Opcode::Call => {
                let callee = inst.callee.as_deref().unwrap_or_default();
                let params = self.m.function(callee).map(|cf| &cf.params);
                for (i, op) in inst.operands.iter().enumerate() {
                    let pty = params.and_then(|ps| ps.get(i)).map(|p| p.ty);
                    args.push(self.rop(slots, op, pty));
                }
            }
            Opcode::CallInd => {
                args.push(self.rop(slots, &inst.operands[0], Some(IrType::Ptr)));
                for op in &inst.operands[1..] {
                    // Constant argument widths default to 64-bit; slot
                    // values carry their own width.
                    args.push(self.rop(slots, op, None));
                }
            }
            Opcode::Br | Opcode::Phi => {}
        }
        let t0 = inst
            .targets
            .first()
            .and_then(|t| blocks.get(t.as_str()).copied())
            .unwrap_or(usize::MAX);
        let t1 = inst
            .targets
            .get(1)
            .and_then(|t| blocks.get(t.as_str()).copied())
            .unwrap_or(usize::MAX);
        let callee = inst
            .callee
            .as_deref()
            .and_then(|c| self.fn_index.get(c).copied());
        let label = if inst.opcode == Opcode::Alloc {
            inst.result.clone()
        } else {
            None
        };
        let _ = f;
        RInst {
            op: inst.opcode,
            ty,
            dst,
            args,
            t0,
            t1,
            callee,
            attrs: inst.attrs,
            label,
            opkey,
        }
    }
}

struct Allocation {
    bytes: Vec<u8>,
    ptr_slots: std::collections::BTreeMap<i64, PtrVal>,
    freed: bool,
    read_only: bool,
    shadow: bool,
    cache: bool,
    label: String,
    free_step: Option<u64>,
    last_access_step: Option<u64>,
    init: Option<Vec<bool>>,
}

impl Allocation {
    fn new(label: String, size: usize, instrument: bool) -> Allocation {
        Allocation {
            bytes: vec![0; size],
            ptr_slots: std::collections::BTreeMap::new(),
            freed: false,
            read_only: false,
            shadow: false,
            cache: false,
            label,
            free_step: None,
            last_access_step: None,
            init: if instrument { Some(vec![false; size]) } else { None },
        }
    }
}

struct Frame {
    func: usize,
    block: usize,
    ip: usize,
    slots: Vec<Option<Value>>,
    dst_in_caller: Option<u32>,
    ret_width: Option<IrType>,
}

struct Machine<'a> {
    funcs: &'a [RFunc],
    frames: Vec<Frame>,
    mem: Vec<Allocation>,
    global_alloc: Vec<usize>,
    stream: &'a [f64],
    stream_pos: usize,
    steps: u64,
    counts: Vec<u64>,
    read_count: u64,
    cfg: &'a ExecConfig,
    violations: Vec<String>,
}

enum Outcome {
    Done(Option<Value>),
    Fault(RuntimeError),
}

impl<'a> Machine<'a> {
    fn slot(&self, r: &ROp) -> Value {
        let frame = self.frames.last().unwrap();
        match r {
            ROp::Slot(i) => frame.slots[*i as usize].expect("read of unset SSA value"),
            ROp::Const(v) => *v,
            ROp::Func(fi) => Value::Ptr(PtrVal::Func(*fi)),
            ROp::GlobalAddr(gi) => Value::Ptr(PtrVal::Mem {
                alloc: self.global_alloc[*gi],
                offset: 0,
            }),
        }
    }

    fn write(&mut self, dst: Option<u32>, v: Value) {
        if let Some(d) = dst {
            let frame = self.frames.last_mut().unwrap();
            frame.slots[d as usize] = Some(v);
        }
    }

    fn f(&self, r: &ROp) -> f64 {
        match self.slot(r) {
            Value::F64(v) => v,
            Value::F32(v) => v as f64,
            other => panic!("expected float, got {other:?}"),
        }
    }

    fn i(&self, r: &ROp) -> i64 {
        self.slot(r).as_i64().expect("expected integer")
    }

    fn b(&self, r: &ROp) -> bool {
        match self.slot(r) {
            Value::I1(v) => v,
            Value::I64(v) => v != 0,
            Value::I32(v) => v != 0,
            other => panic!("expected i1, got {other:?}"),
        }
    }

    fn ptr(&self, r: &ROp) -> PtrVal {
        match self.slot(r) {
            Value::Ptr(p) => p,
            other => panic!("expected ptr, got {other:?}"),
        }
    }

    fn float_bin(&self, ty: IrType, a: &ROp, b: &ROp, f64op: fn(f64, f64) -> f64, f32op: fn(f32, f32) -> f32) -> Value {
        match ty {
            IrType::F32 => {
                let (x, y) = (self.f(a) as f32, self.f(b) as f32);
                Value::F32(f32op(x, y))
            }
            _ => Value::F64(f64op(self.f(a), self.f(b))),
        }
    }

    fn touch(&mut self, alloc: usize) {
        self.mem[alloc].last_access_step = Some(self.steps);
    }

    fn check_access(
        &mut self,
        access: &'static str,
        p: PtrVal,
        size: u64,
    ) -> Result<(usize, i64), RuntimeError> {
        let PtrVal::Mem { alloc, offset } = p else {
            return Err(match p {
                PtrVal::Null => RuntimeError::NullDeref,
                _ => RuntimeError::Other("memory access through a function pointer".into()),
            });
        };
        let a = &self.mem[alloc];
        if a.freed {
            return Err(RuntimeError::UseAfterFree(a.label.clone()));
        }
        if offset < 0 || offset as u64 + size > a.bytes.len() as u64 {
            return Err(RuntimeError::OutOfBounds {
                access,
                alloc: a.label.clone(),
                offset,
                size,
                alloc_size: a.bytes.len() as u64,
            });
        }
        Ok((alloc, offset))
    }

    fn load_scalar(&mut self, p: PtrVal, ty: IrType) -> Result<Value, RuntimeError> {
        let w = ty.byte_width();
        let (alloc, off) = self.check_access("load", p, w)?;
        self.touch(alloc);
        let a = &self.mem[alloc];
        if ty == IrType::Ptr {
            if let Some(v) = a.ptr_slots.get(&off) {
                return Ok(Value::Ptr(*v));
            }
            let range = &a.bytes[off as usize..(off + 8) as usize];
            if range.iter().all(|&b| b == 0) {
                return Ok(Value::Ptr(PtrVal::Null));
            }
            return Err(RuntimeError::LoadNonPointer);
        }
        // Scalar load overlapping a stored pointer is type punning.
        let overlaps_ptr = a
            .ptr_slots
            .range((off - 7)..(off + w as i64))
            .next()
            .is_some();
        if overlaps_ptr && self.cfg.trap_mode == TrapMode::Strict {
            return Err(RuntimeError::TypePun);
        }
        if let Some(init) = &a.init {
            if a.cache {
                let uninit = (off as usize..(off + w as i64) as usize)
                    .any(|i| !init[i]);
                if uninit {
                    self.violations.push(format!(
                        "uninitialized cache read: {} bytes at offset {off} of `{}`",
                        w, a.label
                    ));
                }
            }
        }
        let bytes = &a.bytes[off as usize..(off + w as i64) as usize];
        Ok(match ty {
            IrType::F64 => Value::F64(f64::from_le_bytes(bytes.try_into().unwrap())),
            IrType::F32 => Value::F32(f32::from_le_bytes(bytes.try_into().unwrap())),
            IrType::I64 => Value::I64(i64::from_le_bytes(bytes.try_into().unwrap())),
            IrType::I32 => Value::I32(i32::from_le_bytes(bytes.try_into().unwrap())),
            IrType::I1 => Value::I1(bytes[0] != 0),
            IrType::Ptr => unreachable!(),
        })
    }

    fn store_scalar(&mut self, p: PtrVal, v: Value) -> Result<(), RuntimeError> {
        let (w, bytes, ptrval) = match v {
            Value::F64(x) => (8, x.to_le_bytes().to_vec(), None),
            Value::F32(x) => (4, x.to_le_bytes().to_vec(), None),
            Value::I64(x) => (8, x.to_le_bytes().to_vec(), None),
            Value::I32(x) => (4, x.to_le_bytes().to_vec(), None),
            Value::I1(x) => (1, vec![x as u8], None),
            Value::Ptr(pv) => (8, vec![0u8; 8], Some(pv)),
        };
        let (alloc, off) = self.check_access("store", p, w)?;
        self.touch(alloc);
        let a = &mut self.mem[alloc];
        if a.read_only {
            return Err(RuntimeError::ReadOnlyWrite(a.label.clone()));
        }
        // Clear any pointer slots the scalar bytes overlap.
        let stale: Vec<i64> = a
            .ptr_slots
            .range((off - 7)..(off + w as i64))
            .map(|(k, _)| *k)
            .collect();
        for k in stale {
            a.ptr_slots.remove(&k);
        }
        a.bytes[off as usize..(off + w as i64) as usize].copy_from_slice(&bytes);
        if let Some(pv) = ptrval {
            a.ptr_slots.insert(off, pv);
        }
        if let Some(init) = &mut a.init {
            for i in off as usize..(off + w as i64) as usize {
                init[i] = true;
            }
        }
        Ok(())
    }

    fn memcpy(&mut self, dst: PtrVal, src: PtrVal, len: i64) -> Result<(), RuntimeError> {
        if len < 0 {
            return Err(RuntimeError::Other("memcpy with negative length".into()));
        }
        if len == 0 {
            return Ok(());
        }
        let (sa, so) = self.check_access("memcpy read", src, len as u64)?;
        let (da, doff) = self.check_access("memcpy write", dst, len as u64)?;
        self.touch(sa);
        self.touch(da);
        if self.mem[da].read_only {
            return Err(RuntimeError::ReadOnlyWrite(self.mem[da].label.clone()));
        }
        let data: Vec<u8> =
            self.mem[sa].bytes[so as usize..(so + len) as usize].to_vec();
        let slots: Vec<(i64, PtrVal)> = self.mem[sa]
            .ptr_slots
            .range(so..(so + len))
            .filter(|(k, _)| *k + 8 <= so + len)
            .map(|(k, v)| (*k - so + doff, *v))
            .collect();
        let d = &mut self.mem[da];
        d.bytes[doff as usize..(doff + len) as usize].copy_from_slice(&data);
        let stale: Vec<i64> = d
            .ptr_slots
            .range((doff - 7)..(doff + len))
            .map(|(k, _)| *k)
            .collect();
        for k in stale {
            d.ptr_slots.remove(&k);
        }
        for (k, v) in slots {
            d.ptr_slots.insert(k, v);
        }
        if let Some(init) = &mut d.init {
            for i in doff as usize..(doff + len) as usize {
                init[i] = true;
            }
        }
        Ok(())
    }

    fn recover_value(&self, ty: Option<IrType>) -> Value {
        match ty {
            Some(IrType::F64) => Value::F64(0.0),
            Some(IrType::F32) => Value::F32(0.0),
            Some(IrType::I1) => Value::I1(false),
            Some(IrType::I32) => Value::I32(0),
            Some(IrType::I64) => Value::I64(0),
            _ => Value::Ptr(PtrVal::Null),
        }
    }

    fn enter_block(&mut self, target: usize) -> Result<(), RuntimeError> {
        let funcs = self.funcs;
        let frame = self.frames.last().unwrap();
        let from = frame.block;
        let func = frame.func;
        let phis = &funcs[func].blocks[target].phis;
        // Two-phase: gather all incoming values before writing any, so
        // phis that reference other phis of the same block read the
        // previous iteration's values.
        let mut writes: Vec<(u32, Value)> = Vec::with_capacity(phis.len());
        for phi in phis {
            self.steps += 1;
            self.counts[phi.opkey as usize] += 1;
            let (_, rop) = phi
                .incoming
                .iter()
                .find(|(p, _)| *p == from)
                .expect("phi has no entry for executed predecessor");
            writes.push((phi.dst, self.slot(rop)));
        }
        let frame = self.frames.last_mut().unwrap();
        for (dst, v) in writes {
            frame.slots[dst as usize] = Some(v);
        }
        frame.block = target;
        frame.ip = 0;
        if self.steps >= self.cfg.step_limit {
            return Err(RuntimeError::StepLimit(self.cfg.step_limit));
        }
        Ok(())
    }

    fn push_call(
        &mut self,
        callee: usize,
        argvals: Vec<Value>,
        dst: Option<u32>,
        ret_width: Option<IrType>,
    ) -> Result<(), RuntimeError> {
        let cf = &self.funcs[callee];
        if cf.is_declaration {
            return Err(RuntimeError::MissingBody(cf.name.clone()));
        }
        if argvals.len() != cf.param_slots.len() {
            return Err(RuntimeError::Arity {
                callee: cf.name.clone(),
                passed: argvals.len(),
                expected: cf.param_slots.len(),
            });
        }
        let mut slots = vec![None; cf.nslots];
        for ((slot, ty), v) in cf.param_slots.iter().zip(argvals) {
            slots[*slot as usize] = Some(coerce(v, *ty).ok_or(RuntimeError::Other(
                format!("argument type mismatch calling @{}", cf.name),
            ))?);
        }
        self.frames.push(Frame {
            func: callee,
            block: 0,
            ip: 0,
            slots,
            dst_in_caller: dst,
            ret_width,
        });
        Ok(())
    }

    fn run(&mut self) -> Outcome {
        loop {
            let funcs = self.funcs;
            let frame = self.frames.last().unwrap();
            let inst: &RInst = &funcs[frame.func].blocks[frame.block].instrs[frame.ip];
            self.steps += 1;
            self.counts[inst.opkey as usize] += 1;
            if self.steps >= self.cfg.step_limit {
                return Outcome::Fault(RuntimeError::StepLimit(self.cfg.step_limit));
            }
            match self.step(inst) {
                Ok(Some(out)) => return Outcome::Done(out),
                Ok(None) => {}
                Err(e) => {
                    if self.cfg.trap_mode == TrapMode::Strict
                        || matches!(
                            e,
                            RuntimeError::StepLimit(_) | RuntimeError::MissingBody(_)
                        )
                    {
                        return Outcome::Fault(e);
                    }
                    // Counting mode: record, fabricate a value, move on.
                    self.violations.push(e.to_string());
                    let v = self.recover_value(inst.ty);
                    self.write(inst.dst, v);
                    self.frames.last_mut().unwrap().ip += 1;
                }
            }
        }
    }

    /// Executes one instruction. `Ok(Some(_))` is program completion.
    fn step(&mut self, inst: &RInst) -> Result<Option<Option<Value>>, RuntimeError> {
        let mut advance = true;
        match inst.op {
            Opcode::FAdd => {
                let v = self.float_bin(inst.ty.unwrap(), &inst.args[0], &inst.args[1], |a, b| a + b, |a, b| a + b);
                self.write(inst.dst, v);
            }
            Opcode::FSub => {
                let v = self.float_bin(inst.ty.unwrap(), &inst.args[0], &inst.args[1], |a, b| a - b, |a, b| a - b);
                self.write(inst.dst, v);
            }
            Opcode::FMul => {
                let v = self.float_bin(inst.ty.unwrap(), &inst.args[0], &inst.args[1], |a, b| a * b, |a, b| a * b);
                self.write(inst.dst, v);
            }
            Opcode::FDiv => {
                let v = self.float_bin(inst.ty.unwrap(), &inst.args[0], &inst.args[1], |a, b| a / b, |a, b| a / b);
                self.write(inst.dst, v);
            }
            Opcode::FNeg => {
                let v = match inst.ty.unwrap() {
                    IrType::F32 => Value::F32(-(self.f(&inst.args[0]) as f32)),
                    _ => Value::F64(-self.f(&inst.args[0])),
                };
                self.write(inst.dst, v);
            }
            Opcode::IAdd | Opcode::ISub | Opcode::IMul => {
                let (a, b) = (self.i(&inst.args[0]), self.i(&inst.args[1]));
                let r = match inst.op {
                    Opcode::IAdd => a.wrapping_add(b),
                    Opcode::ISub => a.wrapping_sub(b),
                    _ => a.wrapping_mul(b),
                };
                let v = match inst.ty.unwrap() {
                    IrType::I32 => Value::I32(r as i32),
                    _ => Value::I64(r),
                };
                self.write(inst.dst, v);
            }
            Opcode::ICmp(p) => {
                let r = eval_icmp(p, self.i(&inst.args[0]), self.i(&inst.args[1]));
                self.write(inst.dst, Value::I1(r));
            }
            Opcode::FCmp(p) => {
                let r = eval_fcmp(p, self.f(&inst.args[0]), self.f(&inst.args[1]));
                self.write(inst.dst, Value::I1(r));
            }
            Opcode::Select => {
                let v = if self.b(&inst.args[0]) {
                    self.slot(&inst.args[1])
                } else {
                    self.slot(&inst.args[2])
                };
                self.write(inst.dst, v);
            }
            Opcode::SiToFp => {
                let x = self.i(&inst.args[0]);
                let v = match inst.ty.unwrap() {
                    IrType::F32 => Value::F32(x as f32),
                    _ => Value::F64(x as f64),
                };
                self.write(inst.dst, v);
            }
            Opcode::Intrinsic(i) => {
                let v = self.eval_intrinsic(i, inst)?;
                self.write(inst.dst, v);
            }
            Opcode::Br => {
                self.enter_block(inst.t0)?;
                advance = false;
            }
            Opcode::CondBr => {
                let t = if self.b(&inst.args[0]) { inst.t0 } else { inst.t1 };
                self.enter_block(t)?;
                advance = false;
            }
            Opcode::Ret => {
                let v = inst.args.first().map(|a| self.slot(a));
                let frame = self.frames.pop().unwrap();
                if self.frames.is_empty() {
                    return Ok(Some(v));
                }
                if let Some(dst) = frame.dst_in_caller {
                    let v = v.expect("value-returning call got ret void");
                    let v = match frame.ret_width {
                        Some(t) => coerce(v, t)
                            .ok_or(RuntimeError::Other("return type mismatch".into()))?,
                        None => v,
                    };
                    let caller = self.frames.last_mut().unwrap();
                    caller.slots[dst as usize] = Some(v);
                }
                self.frames.last_mut().unwrap().ip += 1;
                advance = false;
            }
            Opcode::Call => {
                let callee = inst
                    .callee
                    .ok_or_else(|| RuntimeError::Other("unresolved call target".into()))?;
                let argvals: Vec<Value> = inst.args.iter().map(|a| self.slot(a)).collect();
                self.push_call(callee, argvals, inst.dst, inst.ty)?;
                advance = false;
            }
            Opcode::CallInd => {
                let p = self.ptr(&inst.args[0]);
                let PtrVal::Func(callee) = p else {
                    return Err(RuntimeError::BadIndirectCallee);
                };
                let argvals: Vec<Value> =
                    inst.args[1..].iter().map(|a| self.slot(a)).collect();
                self.push_call(callee, argvals, inst.dst, inst.ty)?;
                advance = false;
            }
            Opcode::Alloc => {
                let size = self.i(&inst.args[0]);
                if size < 0 || size > (1 << 32) {
                    return Err(RuntimeError::Other(format!(
                        "allocation of {size} bytes rejected"
                    )));
                }
                let mut a = Allocation::new(
                    inst.label.clone().unwrap_or_else(|| "alloc".into()),
                    size as usize,
                    self.cfg.instrument,
                );
                a.shadow = inst.attrs.shadow;
                a.cache = inst.attrs.cache;
                // Allocations are defined to be zeroed, hence pre-initialized.
                if let Some(init) = &mut a.init {
                    init.iter_mut().for_each(|b| *b = true);
                }
                if a.cache && self.cfg.instrument {
                    // For cache buffers the zero fill does not count as
                    // initialization: the reverse pass must never consume
                    // a slot the forward pass did not write.
                    a.init.as_mut().unwrap().iter_mut().for_each(|b| *b = false);
                }
                self.mem.push(a);
                self.write(
                    inst.dst,
                    Value::Ptr(PtrVal::Mem {
                        alloc: self.mem.len() - 1,
                        offset: 0,
                    }),
                );
            }
            Opcode::Free => {
                let p = self.ptr(&inst.args[0]);
                match p {
                    PtrVal::Null => {}
                    PtrVal::Mem { alloc, offset: 0 } => {
                        let a = &mut self.mem[alloc];
                        if a.freed {
                            return Err(RuntimeError::DoubleFree(a.label.clone()));
                        }
                        if a.read_only {
                            return Err(RuntimeError::BadFree);
                        }
                        a.freed = true;
                        a.free_step = Some(self.steps);
                    }
                    _ => return Err(RuntimeError::BadFree),
                }
            }
            Opcode::Load => {
                let p = self.ptr(&inst.args[0]);
                let v = self.load_scalar(p, inst.ty.unwrap())?;
                self.write(inst.dst, v);
            }
            Opcode::Store => {
                let v = self.slot(&inst.args[0]);
                let v = coerce(v, inst.ty.unwrap())
                    .ok_or(RuntimeError::Other("store type mismatch".into()))?;
                let p = self.ptr(&inst.args[1]);
                self.store_scalar(p, v)?;
            }
            Opcode::Memcpy => {
                let d = self.ptr(&inst.args[0]);
                let s = self.ptr(&inst.args[1]);
                let len = self.i(&inst.args[2]);
                self.memcpy(d, s, len)?;
            }
            Opcode::PtrAdd => {
                let p = self.ptr(&inst.args[0]);
                let k = self.i(&inst.args[1]);
                let v = match p {
                    PtrVal::Mem { alloc, offset } => Value::Ptr(PtrVal::Mem {
                        alloc,
                        offset: offset + k,
                    }),
                    PtrVal::Null if k == 0 => Value::Ptr(PtrVal::Null),
                    _ => return Err(RuntimeError::Other(
                        "pointer arithmetic on a non-memory pointer".into(),
                    )),
                };
                self.write(inst.dst, v);
            }
            Opcode::Phi => unreachable!("phis are evaluated at block entry"),
        }
        if advance {
            self.frames.last_mut().unwrap().ip += 1;
        }
        Ok(None)
    }

    fn eval_intrinsic(&mut self, i: Intrinsic, inst: &RInst) -> Result<Value, RuntimeError> {
        if i == Intrinsic::Read {
            self.read_count += 1;
            if self.stream_pos >= self.stream.len() {
                return Err(RuntimeError::ReadExhausted);
            }
            let v = self.stream[self.stream_pos];
            self.stream_pos += 1;
            return Ok(match inst.ty.unwrap() {
                IrType::F32 => Value::F32(v as f32),
                _ => Value::F64(v),
            });
        }
        let single = inst.ty == Some(IrType::F32);
        if single {
            let x = self.f(&inst.args[0]) as f32;
            let v = match i {
                Intrinsic::Pow => x.powf(self.f(&inst.args[1]) as f32),
                Intrinsic::Sin => x.sin(),
                Intrinsic::Cos => x.cos(),
                Intrinsic::Exp => x.exp(),
                Intrinsic::Log => x.ln(),
                Intrinsic::Sqrt => x.sqrt(),
                Intrinsic::Fabs => x.abs(),
                Intrinsic::Read => unreachable!(),
            };
            Ok(Value::F32(v))
        } else {
            let x = self.f(&inst.args[0]);
            let v = match i {
                Intrinsic::Pow => x.powf(self.f(&inst.args[1])),
                Intrinsic::Sin => x.sin(),
                Intrinsic::Cos => x.cos(),
                Intrinsic::Exp => x.exp(),
                Intrinsic::Log => x.ln(),
                Intrinsic::Sqrt => x.sqrt(),
                Intrinsic::Fabs => x.abs(),
                Intrinsic::Read => unreachable!(),
            };
            Ok(Value::F64(v))
        }
    }
}

fn eval_icmp(p: IntPred, a: i64, b: i64) -> bool {
    p.eval(a, b)
}

fn eval_fcmp(p: FloatPred, a: f64, b: f64) -> bool {
    p.eval(a, b)
}

fn coerce(v: Value, ty: IrType) -> Option<Value> {
    Some(match (v, ty) {
        (Value::F64(x), IrType::F64) => Value::F64(x),
        (Value::F32(x), IrType::F32) => Value::F32(x),
        (Value::F64(x), IrType::F32) => Value::F32(x as f32),
        (Value::F32(x), IrType::F64) => Value::F64(x as f64),
        (Value::I64(x), IrType::I64) => Value::I64(x),
        (Value::I64(x), IrType::I32) => Value::I32(x as i32),
        (Value::I64(x), IrType::I1) => Value::I1(x != 0),
        (Value::I32(x), IrType::I32) => Value::I32(x),
        (Value::I32(x), IrType::I64) => Value::I64(x as i64),
        (Value::I1(x), IrType::I1) => Value::I1(x),
        (Value::I1(x), IrType::I64) => Value::I64(x as i64),
        (Value::I1(x), IrType::I32) => Value::I32(x as i32),
        (Value::Ptr(p), IrType::Ptr) => Value::Ptr(p),
        _ => return None,
    })
}

/// Executes `cfg.entry` and returns the trace. Errors land in
/// `ExecTrace::error`; in strict mode they halt execution, in counting
/// mode recoverable ones are logged to `violations` instead.
pub fn run(m: &IrModule, cfg: &ExecConfig) -> ExecTrace {
    let mut trace = ExecTrace::default();

    let fn_index: HashMap<&str, usize> = m
        .functions
        .iter()
        .enumerate()
        .map(|(i, f)| (f.name.as_str(), i))
        .collect();
    let global_index: HashMap<&str, usize> = m
        .globals
        .iter()
        .enumerate()
        .map(|(i, g)| (g.name.as_str(), i))
        .collect();
    let mut resolver = Resolver {
        m,
        fn_index,
        global_index,
        opkeys: Vec::new(),
        opkey_index: HashMap::new(),
    };
    let mut funcs = Vec::with_capacity(m.functions.len());
    for f in &m.functions {
        match resolver.resolve_function(f) {
            Ok(rf) => funcs.push(rf),
            Err(e) => {
                trace.error = Some(e);
                return trace;
            }
        }
    }

    // Materialize globals as read-only allocations.
    let mut mem: Vec<Allocation> = Vec::new();
    let mut global_alloc = Vec::with_capacity(m.globals.len());
    for g in &m.globals {
        let mut a = Allocation::new(
            format!("@{}", g.name),
            g.init.byte_len() as usize,
            cfg.instrument,
        );
        match &g.init {
            GlobalInit::Scalars(ty, vals) => {
                let w = ty.byte_width() as usize;
                for (i, v) in vals.iter().enumerate() {
                    let bytes: Vec<u8> = match ty {
                        IrType::F64 => v.to_le_bytes().to_vec(),
                        IrType::F32 => (*v as f32).to_le_bytes().to_vec(),
                        IrType::I64 => (*v as i64).to_le_bytes().to_vec(),
                        IrType::I32 => (*v as i32).to_le_bytes().to_vec(),
                        IrType::I1 => vec![(*v != 0.0) as u8],
                        IrType::Ptr => unreachable!(),
                    };
                    a.bytes[i * w..i * w + w].copy_from_slice(&bytes);
                }
            }
            GlobalInit::Functions(fs) => {
                for (i, fname) in fs.iter().enumerate() {
                    if let Some(&fi) = resolver.fn_index.get(fname.as_str()) {
                        a.ptr_slots.insert(i as i64 * 8, PtrVal::Func(fi));
                    }
                }
            }
        }
        if let Some(init) = &mut a.init {
            init.iter_mut().for_each(|b| *b = true);
        }
        a.read_only = true;
        mem.push(a);
        global_alloc.push(mem.len() - 1);
    }

    // Entry frame.
    let Some(&entry_idx) = resolver.fn_index.get(cfg.entry.as_str()) else {
        trace.error = Some(RuntimeError::UnknownEntry(cfg.entry.clone()));
        return trace;
    };
    let entry_fn = m.function(&cfg.entry).unwrap();
    if entry_fn.is_declaration() {
        trace.error = Some(RuntimeError::MissingBody(cfg.entry.clone()));
        return trace;
    }
    if cfg.args.len() != entry_fn.params.len() {
        trace.error = Some(RuntimeError::Arity {
            callee: cfg.entry.clone(),
            passed: cfg.args.len(),
            expected: entry_fn.params.len(),
        });
        return trace;
    }
    let mut argvals = Vec::with_capacity(cfg.args.len());
    let mut arg_allocs: Vec<Option<(usize, IrType)>> = Vec::with_capacity(cfg.args.len());
    for (k, (arg, p)) in cfg.args.iter().zip(&entry_fn.params).enumerate() {
        let v = match arg {
            ArgValue::F64(x) => Value::F64(*x),
            ArgValue::F32(x) => Value::F32(*x),
            ArgValue::I1(x) => Value::I1(*x),
            ArgValue::I32(x) => Value::I32(*x),
            ArgValue::I64(x) => Value::I64(*x),
            ArgValue::Null => Value::Ptr(PtrVal::Null),
            ArgValue::FuncRef(name) => match resolver.fn_index.get(name.as_str()) {
                Some(&fi) => Value::Ptr(PtrVal::Func(fi)),
                None => {
                    trace.error = Some(RuntimeError::Other(format!(
                        "unknown function @{name} passed as argument"
                    )));
                    return trace;
                }
            },
            ArgValue::BufF64(vals) => {
                let mut a =
                    Allocation::new(p.name.clone(), vals.len() * 8, cfg.instrument);
                for (i, v) in vals.iter().enumerate() {
                    a.bytes[i * 8..i * 8 + 8].copy_from_slice(&v.to_le_bytes());
                }
                if let Some(init) = &mut a.init {
                    init.iter_mut().for_each(|b| *b = true);
                }
                mem.push(a);
                arg_allocs.push(Some((mem.len() - 1, IrType::F64)));
                argvals.push(Value::Ptr(PtrVal::Mem {
                    alloc: mem.len() - 1,
                    offset: 0,
                }));
                continue;
            }
            ArgValue::BufF32(vals) => {
                let mut a =
                    Allocation::new(p.name.clone(), vals.len() * 4, cfg.instrument);
                for (i, v) in vals.iter().enumerate() {
                    a.bytes[i * 4..i * 4 + 4].copy_from_slice(&v.to_le_bytes());
                }
                if let Some(init) = &mut a.init {
                    init.iter_mut().for_each(|b| *b = true);
                }
                mem.push(a);
                arg_allocs.push(Some((mem.len() - 1, IrType::F32)));
                argvals.push(Value::Ptr(PtrVal::Mem {
                    alloc: mem.len() - 1,
                    offset: 0,
                }));
                continue;
            }
            ArgValue::BufI64(vals) => {
                let mut a =
                    Allocation::new(p.name.clone(), vals.len() * 8, cfg.instrument);
                for (i, v) in vals.iter().enumerate() {
                    a.bytes[i * 8..i * 8 + 8].copy_from_slice(&v.to_le_bytes());
                }
                if let Some(init) = &mut a.init {
                    init.iter_mut().for_each(|b| *b = true);
                }
                mem.push(a);
                arg_allocs.push(Some((mem.len() - 1, IrType::I64)));
                argvals.push(Value::Ptr(PtrVal::Mem {
                    alloc: mem.len() - 1,
                    offset: 0,
                }));
                continue;
            }
        };
        match coerce(v, p.ty) {
            Some(v) => {
                arg_allocs.push(None);
                argvals.push(v);
            }
            None => {
                trace.error = Some(RuntimeError::BadArgument(k));
                return trace;
            }
        }
    }

    let mut machine = Machine {
        funcs: &funcs,
        frames: Vec::new(),
        mem,
        global_alloc,
        stream: &cfg.read_stream,
        stream_pos: 0,
        steps: 0,
        counts: vec![0; resolver.opkeys.len()],
        read_count: 0,
        cfg,
        violations: Vec::new(),
    };
    if let Err(e) = machine.push_call(entry_idx, argvals, None, None) {
        trace.error = Some(e);
        return trace;
    }
    let outcome = machine.run();
    match outcome {
        Outcome::Done(v) => trace.ret = v,
        Outcome::Fault(e) => trace.error = Some(e),
    }
    trace.steps = machine.steps;
    trace.read_count = machine.read_count;
    for (key, count) in resolver.opkeys.iter().zip(&machine.counts) {
        if *count > 0 {
            trace.op_counts.insert(key.clone(), *count);
        }
    }
    trace.violations = machine.violations;
    // Final buffer contents, widened to f64.
    trace.buffers = arg_allocs
        .iter()
        .map(|entry| {
            entry.map(|(alloc, ty)| {
                let bytes = &machine.mem[alloc].bytes;
                match ty {
                    IrType::F64 => bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                    IrType::F32 => bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect(),
                    _ => bytes
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect(),
                }
            })
        })
        .collect();
    trace.allocations = machine
        .mem
        .iter()
        .map(|a| AllocRecord {
            label: a.label.clone(),
            size: a.bytes.len() as u64,
            shadow: a.shadow,
            cache: a.cache,
            freed: a.freed,
            free_step: a.free_step,
            last_access_step: a.last_access_step,
            final_bytes: if cfg.instrument {
                Some(a.bytes.clone())
            } else {
                None
            },
        })
        .collect();
    trace
}

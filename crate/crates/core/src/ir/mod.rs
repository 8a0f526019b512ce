//! The miniature SSA intermediate representation.
//!
//! A module is a list of functions plus named constant globals and
//! `custom_adjoint` registrations. Functions are lists of basic blocks,
//! each ending in exactly one terminator. Pointers are opaque: `ptr`
//! carries no pointee type, so the type of the data behind a pointer has
//! to be recovered by type analysis. Memory is byte addressed and
//! `ptradd` is the only address arithmetic.
//!
//! The textual grammar is LLVM-flavored but simplified to one
//! instruction per line; see `docs/IR.md` for the EBNF.

mod parse;
mod print;
mod validate;

pub use parse::{parse, parse_files, ParseError};
pub use print::print;
pub use validate::{validate, Diagnostic};

use std::collections::BTreeMap;
use std::fmt;

/// Scalar and pointer types a value can have.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IrType {
    F64,
    F32,
    I1,
    I32,
    I64,
    /// Opaque pointer; no pointee type.
    Ptr,
}

impl IrType {
    pub fn is_float(self) -> bool {
        matches!(self, IrType::F64 | IrType::F32)
    }

    pub fn is_int(self) -> bool {
        matches!(self, IrType::I1 | IrType::I32 | IrType::I64)
    }

    /// Byte width of a value of this type when stored to memory.
    pub fn byte_width(self) -> u64 {
        match self {
            IrType::F64 | IrType::I64 | IrType::Ptr => 8,
            IrType::F32 | IrType::I32 => 4,
            IrType::I1 => 1,
        }
    }
}

impl fmt::Display for IrType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            IrType::F64 => "f64",
            IrType::F32 => "f32",
            IrType::I1 => "i1",
            IrType::I32 => "i32",
            IrType::I64 => "i64",
            IrType::Ptr => "ptr",
        };
        f.write_str(s)
    }
}

/// Base kind named by a `!tbaa.<base>` tag on loads, stores and memcpy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TbaaTag {
    Double,
    Float,
    Int,
    Ptr,
    Any,
}

impl fmt::Display for TbaaTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TbaaTag::Double => "double",
            TbaaTag::Float => "float",
            TbaaTag::Int => "int",
            TbaaTag::Ptr => "ptr",
            TbaaTag::Any => "any",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntPred {
    Eq,
    Ne,
    Slt,
    Sle,
    Sgt,
    Sge,
}

impl IntPred {
    pub fn eval(self, a: i64, b: i64) -> bool {
        match self {
            IntPred::Eq => a == b,
            IntPred::Ne => a != b,
            IntPred::Slt => a < b,
            IntPred::Sle => a <= b,
            IntPred::Sgt => a > b,
            IntPred::Sge => a >= b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IntPred::Eq => "eq",
            IntPred::Ne => "ne",
            IntPred::Slt => "slt",
            IntPred::Sle => "sle",
            IntPred::Sgt => "sgt",
            IntPred::Sge => "sge",
        }
    }
}

/// Ordered float predicates (false on NaN operands).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FloatPred {
    Oeq,
    One,
    Olt,
    Ole,
    Ogt,
    Oge,
}

impl FloatPred {
    pub fn eval(self, a: f64, b: f64) -> bool {
        match self {
            FloatPred::Oeq => a == b,
            FloatPred::One => a < b || a > b,
            FloatPred::Olt => a < b,
            FloatPred::Ole => a <= b,
            FloatPred::Ogt => a > b,
            FloatPred::Oge => a >= b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FloatPred::Oeq => "oeq",
            FloatPred::One => "one",
            FloatPred::Olt => "olt",
            FloatPred::Ole => "ole",
            FloatPred::Ogt => "ogt",
            FloatPred::Oge => "oge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Intrinsic {
    Pow,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Fabs,
    /// Consumes the next value of the interpreter's input stream.
    /// No operands; not recomputable, not differentiable.
    Read,
}

impl Intrinsic {
    pub fn name(self) -> &'static str {
        match self {
            Intrinsic::Pow => "pow",
            Intrinsic::Sin => "sin",
            Intrinsic::Cos => "cos",
            Intrinsic::Exp => "exp",
            Intrinsic::Log => "log",
            Intrinsic::Sqrt => "sqrt",
            Intrinsic::Fabs => "fabs",
            Intrinsic::Read => "read",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Intrinsic::Pow => 2,
            Intrinsic::Read => 0,
            _ => 1,
        }
    }

    pub const ALL: [Intrinsic; 8] = [
        Intrinsic::Pow,
        Intrinsic::Sin,
        Intrinsic::Cos,
        Intrinsic::Exp,
        Intrinsic::Log,
        Intrinsic::Sqrt,
        Intrinsic::Fabs,
        Intrinsic::Read,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    FAdd,
    FSub,
    FMul,
    FDiv,
    FNeg,
    IAdd,
    ISub,
    IMul,
    ICmp(IntPred),
    FCmp(FloatPred),
    Select,
    Phi,
    Br,
    CondBr,
    Ret,
    Call,
    CallInd,
    Alloc,
    Free,
    Load,
    Store,
    Memcpy,
    PtrAdd,
    SiToFp,
    Intrinsic(Intrinsic),
}

impl Opcode {
    pub fn is_terminator(self) -> bool {
        matches!(self, Opcode::Br | Opcode::CondBr | Opcode::Ret)
    }

    /// Pure operations have no side effects and depend only on operands.
    /// `read` is excluded: it consumes external state.
    pub fn is_pure(self) -> bool {
        match self {
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
            | Opcode::SiToFp => true,
            Opcode::Intrinsic(i) => !matches!(i, Intrinsic::Read),
            _ => false,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::FAdd => "fadd",
            Opcode::FSub => "fsub",
            Opcode::FMul => "fmul",
            Opcode::FDiv => "fdiv",
            Opcode::FNeg => "fneg",
            Opcode::IAdd => "iadd",
            Opcode::ISub => "isub",
            Opcode::IMul => "imul",
            Opcode::ICmp(_) => "icmp",
            Opcode::FCmp(_) => "fcmp",
            Opcode::Select => "select",
            Opcode::Phi => "phi",
            Opcode::Br => "br",
            Opcode::CondBr => "condbr",
            Opcode::Ret => "ret",
            Opcode::Call => "call",
            Opcode::CallInd => "callind",
            Opcode::Alloc => "alloc",
            Opcode::Free => "free",
            Opcode::Load => "load",
            Opcode::Store => "store",
            Opcode::Memcpy => "memcpy",
            Opcode::PtrAdd => "ptradd",
            Opcode::SiToFp => "sitofp",
            Opcode::Intrinsic(i) => i.name(),
        }
    }
}

/// An instruction operand: an SSA value, a literal, or a module-level
/// symbol. `@name` evaluates to the address of a global or to a function
/// value usable by `callind`.
#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Value(String),
    ConstFloat(f64),
    ConstInt(i64),
    Null,
    Global(String),
    /// Activity token inside a `@__enzyme_autodiff` argument list.
    Token(ActivityToken),
}

impl Operand {
    pub fn as_value(&self) -> Option<&str> {
        match self {
            Operand::Value(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_const(&self) -> bool {
        matches!(
            self,
            Operand::ConstFloat(_) | Operand::ConstInt(_) | Operand::Null
        )
    }
}

/// Parameter activity tokens of the autodiff calling convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityToken {
    /// Active float scalar passed by value; its derivative is returned.
    Active,
    /// Duplicated pointer: the primal address is paired with a shadow
    /// address that accumulates derivatives.
    Dup,
    /// Duplicated pointer whose primal output is not needed; primal
    /// stores through it may be elided.
    DupNoNeed,
    /// Inactive argument.
    Const,
}

impl ActivityToken {
    pub fn name(self) -> &'static str {
        match self {
            ActivityToken::Active => "active",
            ActivityToken::Dup => "dup",
            ActivityToken::DupNoNeed => "dupnoneed",
            ActivityToken::Const => "const",
        }
    }

    pub fn is_dup(self) -> bool {
        matches!(self, ActivityToken::Dup | ActivityToken::DupNoNeed)
    }
}

impl std::str::FromStr for ActivityToken {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "active" => Ok(ActivityToken::Active),
            "dup" => Ok(ActivityToken::Dup),
            "dupnoneed" => Ok(ActivityToken::DupNoNeed),
            "const" => Ok(ActivityToken::Const),
            _ => Err(format!("unknown activity token `{s}`")),
        }
    }
}

/// Marker flags attached to an instruction (`!cache`, `!shadow`).
/// Synthesis tags tape storage and shadow allocations so that tests and
/// the instrumented interpreter can identify them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InstAttrs {
    pub cache: bool,
    pub shadow: bool,
}

impl InstAttrs {
    pub fn is_empty(self) -> bool {
        !self.cache && !self.shadow
    }
}

#[derive(Debug, Clone)]
pub struct Instruction {
    /// Result value name, without the `%` sigil. None for void operations.
    pub result: Option<String>,
    pub opcode: Opcode,
    /// Result type, or the operand type for `icmp`/`fcmp`/`store`.
    /// None for untyped operations (`br`, `condbr`, `ret void`, `free`,
    /// `memcpy`).
    pub ty: Option<IrType>,
    pub operands: Vec<Operand>,
    /// Block targets: `br` has one, `condbr` two, `phi` one per incoming
    /// operand (parallel to `operands`).
    pub targets: Vec<String>,
    /// Direct call target for `call`.
    pub callee: Option<String>,
    pub tbaa: Option<TbaaTag>,
    pub attrs: InstAttrs,
    /// 1-based source line, 0 for synthesized instructions.
    pub line: u32,
}

/// Structural equality; source line numbers are not part of it.
impl PartialEq for Instruction {
    fn eq(&self, other: &Self) -> bool {
        self.result == other.result
            && self.opcode == other.opcode
            && self.ty == other.ty
            && self.operands == other.operands
            && self.targets == other.targets
            && self.callee == other.callee
            && self.tbaa == other.tbaa
            && self.attrs == other.attrs
    }
}

impl Instruction {
    pub fn new(opcode: Opcode) -> Self {
        Instruction {
            result: None,
            opcode,
            ty: None,
            operands: Vec::new(),
            targets: Vec::new(),
            callee: None,
            tbaa: None,
            attrs: InstAttrs::default(),
            line: 0,
        }
    }

    pub fn is_terminator(&self) -> bool {
        self.opcode.is_terminator()
    }

    /// The type of the produced value. Differs from `ty` for compares,
    /// where `ty` is the operand type and the result is `i1`.
    pub fn result_type(&self) -> Option<IrType> {
        match self.opcode {
            Opcode::ICmp(_) | Opcode::FCmp(_) => Some(IrType::I1),
            _ => self.ty,
        }
    }

    /// Operand values read by this instruction (excludes block labels).
    pub fn value_uses(&self) -> impl Iterator<Item = &str> {
        self.operands.iter().filter_map(|o| o.as_value())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub name: String,
    pub instrs: Vec<Instruction>,
}

impl BasicBlock {
    pub fn new(name: impl Into<String>) -> Self {
        BasicBlock {
            name: name.into(),
            instrs: Vec::new(),
        }
    }

    pub fn terminator(&self) -> Option<&Instruction> {
        self.instrs.last().filter(|i| i.is_terminator())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub ty: IrType,
    pub noalias: bool,
    pub readonly: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrFunction {
    pub name: String,
    pub params: Vec<Param>,
    pub return_type: Option<IrType>,
    /// Empty for declarations. The first block is the entry.
    pub blocks: Vec<BasicBlock>,
    /// Permits algebraic float simplifications in the optimizer.
    pub fast: bool,
}

impl IrFunction {
    pub fn is_declaration(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn entry(&self) -> &BasicBlock {
        &self.blocks[0]
    }

    pub fn block(&self, name: &str) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut BasicBlock> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Number of instructions across all blocks.
    pub fn instr_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instrs.len()).sum()
    }

    pub fn instrs(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.instrs.iter())
    }

    /// The defining instruction of a value, if any.
    pub fn def_of(&self, value: &str) -> Option<&Instruction> {
        self.instrs()
            .find(|i| i.result.as_deref() == Some(value))
    }
}

/// Initializer of a named module-level constant.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalInit {
    /// Typed array of scalar constants, e.g. `[f64 1.0, 2.0]`.
    Scalars(IrType, Vec<f64>),
    /// Array of function references, 8 bytes each, e.g. `functions(@a, @b)`.
    Functions(Vec<String>),
}

impl GlobalInit {
    pub fn byte_len(&self) -> u64 {
        match self {
            GlobalInit::Scalars(ty, vals) => ty.byte_width() * vals.len() as u64,
            GlobalInit::Functions(fs) => 8 * fs.len() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalData {
    pub name: String,
    pub init: GlobalInit,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IrModule {
    pub functions: Vec<IrFunction>,
    pub globals: Vec<GlobalData>,
    /// Function name -> (augmented name, gradient name).
    pub custom_adjoints: BTreeMap<String, (String, String)>,
}

impl IrModule {
    pub fn function(&self, name: &str) -> Option<&IrFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut IrFunction> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&GlobalData> {
        self.globals.iter().find(|g| g.name == name)
    }

    pub fn has_symbol(&self, name: &str) -> bool {
        self.function(name).is_some() || self.global(name).is_some()
    }
}

/// Renames all values and blocks of a function to a canonical scheme
/// (`b0, b1, ...` in block order, `v0, v1, ...` in definition order).
/// Two functions that differ only in naming normalize to equal ASTs.
pub fn alpha_normalize(f: &IrFunction) -> IrFunction {
    let mut value_map: BTreeMap<String, String> = BTreeMap::new();
    let mut block_map: BTreeMap<String, String> = BTreeMap::new();
    let mut next_value = 0usize;
    for (i, b) in f.blocks.iter().enumerate() {
        block_map.insert(b.name.clone(), format!("b{i}"));
    }
    for p in &f.params {
        value_map.insert(p.name.clone(), format!("v{next_value}"));
        next_value += 1;
    }
    for b in &f.blocks {
        for inst in &b.instrs {
            if let Some(r) = &inst.result {
                value_map.insert(r.clone(), format!("v{next_value}"));
                next_value += 1;
            }
        }
    }
    let map_operand = |o: &Operand| match o {
        Operand::Value(v) => Operand::Value(
            value_map.get(v).cloned().unwrap_or_else(|| v.clone()),
        ),
        other => other.clone(),
    };
    IrFunction {
        name: f.name.clone(),
        params: f
            .params
            .iter()
            .map(|p| Param {
                name: value_map[&p.name].clone(),
                ..p.clone()
            })
            .collect(),
        return_type: f.return_type,
        fast: f.fast,
        blocks: f
            .blocks
            .iter()
            .map(|b| BasicBlock {
                name: block_map[&b.name].clone(),
                instrs: b
                    .instrs
                    .iter()
                    .map(|inst| Instruction {
                        result: inst
                            .result
                            .as_ref()
                            .map(|r| value_map[r].clone()),
                        opcode: inst.opcode,
                        ty: inst.ty,
                        operands: inst.operands.iter().map(map_operand).collect(),
                        targets: inst
                            .targets
                            .iter()
                            .map(|t| {
                                block_map.get(t).cloned().unwrap_or_else(|| t.clone())
                            })
                            .collect(),
                        callee: inst.callee.clone(),
                        tbaa: inst.tbaa,
                        attrs: inst.attrs,
                        line: 0,
                    })
                    .collect(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RELU3: &str = r#"
define f64 @relu3(f64 %x) {
entry:
  %cmp = fcmp ogt f64 %x, 0.0
  condbr %cmp, if.true, if.end
if.true:
  %call = pow f64 %x, 3.0
  br if.end
if.end:
  %res = phi f64 [ %call, if.true ], [ 0.0, entry ]
  ret f64 %res
}
"#;

    #[test]
    fn parses_identity() {
        let m = parse("define f64 @id(f64 %x) { entry: ret f64 %x }").unwrap();
        assert_eq!(m.functions.len(), 1);
        assert_eq!(m.functions[0].blocks.len(), 1);
        assert!(validate(&m).is_empty());
    }

    #[test]
    fn parses_relu3_shape() {
        let m = parse(RELU3).unwrap();
        let f = m.function("relu3").unwrap();
        assert_eq!(f.blocks.len(), 3);
        let phi = &f.block("if.end").unwrap().instrs[0];
        assert_eq!(phi.opcode, Opcode::Phi);
        assert!(validate(&m).is_empty());
    }

    #[test]
    fn use_before_definition_is_rejected() {
        let src = r#"
define f64 @bad(f64 %x) {
entry:
  %y = fadd f64 %z, %x
  %z = fadd f64 %x, %x
  ret f64 %y
}
"#;
        let m = parse(src).unwrap();
        let diags = validate(&m);
        assert!(diags.iter().any(|d| d.msg.contains("%z")), "{diags:?}");
    }

    #[test]
    fn print_parse_is_a_fixed_point() {
        let srcs = [
            RELU3,
            "define f64 @id(f64 %x) { entry: ret f64 %x }",
            r#"
global @tbl = [f64 1.0, 2.5, -3.0]
define void @k(ptr %out noalias, ptr %in noalias readonly, i64 %n) fast {
entry:
  br loop
loop:
  %i = phi i64 [ 0, entry ], [ %i1, loop ]
  %off = imul i64 %i, 8
  %p = ptradd %in, %off
  %v = load f64, %p !tbaa.double
  %q = ptradd %out, %off
  store f64 %v, %q !tbaa.double
  %i1 = iadd i64 %i, 1
  %c = icmp slt i64 %i1, %n
  condbr %c, loop, done
done:
  ret void
}
"#,
        ];
        for src in srcs {
            let m1 = parse(src).unwrap();
            let text1 = print(&m1);
            let m2 = parse(&text1).unwrap();
            assert_eq!(m1, m2, "round trip changed the module for {src}");
            assert_eq!(text1, print(&m2), "printing is not deterministic");
        }
    }

    #[test]
    fn phi_with_missing_incoming_is_diagnosed() {
        let src = r#"
define f64 @bad(f64 %x) {
entry:
  %c = fcmp ogt f64 %x, 0.0
  condbr %c, a, b
a:
  br join
b:
  br join
join:
  %v = phi f64 [ 1.0, a ]
  ret f64 %v
}
"#;
        let m = parse(src).unwrap();
        let diags = validate(&m);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert!(diags[0].msg.contains("predecessors"));
    }

    #[test]
    fn condbr_condition_must_be_i1() {
        let src = r#"
define void @bad(i64 %n) {
entry:
  condbr %n, a, b
a:
  ret void
b:
  ret void
}
"#;
        let m = parse(src).unwrap();
        let diags = validate(&m);
        assert_eq!(diags.len(), 1, "{diags:?}");
    }

    #[test]
    fn duplicate_definitions_are_rejected() {
        let err = parse(
            "define f64 @f(f64 %x) { entry: ret f64 %x }\n\
             define f64 @f(f64 %y) { entry: ret f64 %y }",
        )
        .unwrap_err();
        assert!(err.msg.contains("duplicate"));
    }

    #[test]
    fn multi_file_merge_resolves_declarations() {
        let a = "declare f64 @g(f64 %x)\n\
                 define f64 @f(f64 %x) { entry: %r = call f64 @g(f64 %x) ret f64 %r }";
        let b = "define f64 @g(f64 %x) { entry: ret f64 %x }";
        let m = parse_files(&[("a.ir".into(), a.into()), ("b.ir".into(), b.into())]).unwrap();
        assert!(!m.function("g").unwrap().is_declaration());
        assert!(validate(&m).is_empty());

        let dup = parse_files(&[("a.ir".into(), b.into()), ("b.ir".into(), b.into())]);
        assert!(dup.is_err());
    }

    #[test]
    fn custom_adjoint_directive_round_trips() {
        let src = r#"
custom_adjoint @square = (@aug_square, @rev_square)
define f64 @square(f64 %x) { entry: %r = fmul f64 %x, %x ret f64 %r }
define f64 @aug_square(f64 %x, ptr %t) { entry: %r = fmul f64 %x, %x store f64 %x, %t ret f64 %r }
define f64 @rev_square(f64 %x, f64 %dret, f64 %cache) {
entry:
  %t = fmul f64 2.0, %cache
  %r = fmul f64 %t, %dret
  ret f64 %r
}
"#;
        let m = parse(src).unwrap();
        assert_eq!(
            m.custom_adjoints.get("square"),
            Some(&("aug_square".to_string(), "rev_square".to_string()))
        );
        assert!(validate(&m).is_empty(), "{:?}", validate(&m));
        let m2 = parse(&print(&m)).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn alpha_normalize_ignores_names() {
        let a = parse("define f64 @f(f64 %x) { entry: %y = fadd f64 %x, 1.0 ret f64 %y }")
            .unwrap();
        let b = parse("define f64 @f(f64 %q) { start: %z = fadd f64 %q, 1.0 ret f64 %z }")
            .unwrap();
        assert_eq!(
            alpha_normalize(&a.functions[0]),
            alpha_normalize(&b.functions[0])
        );
    }
}

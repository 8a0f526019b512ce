//! Parser for the textual IR. Hand-rolled tokenizer plus recursive
//! descent; errors carry line and column.

use super::*;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{line}:{col}: {msg}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),   // bare identifier or keyword
    Local(String),   // %name
    Symbol(String),  // @name
    Meta(String),    // !tbaa.double, !cache, !shadow
    Int(i64),
    Float(f64),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Colon,
    Equals,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: u32,
    col: u32,
}

fn is_ident_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_' || c == b'.'
}

fn is_ident_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c == b'.'
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
            line: 1,
            col: 1,
        }
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            col: self.col,
            msg: msg.into(),
        }
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.src.get(self.pos).copied()?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws_and_comments(&mut self) {
        loop {
            match self.peek() {
                Some(c) if c.is_ascii_whitespace() => {
                    self.bump();
                }
                Some(b';') => {
                    while let Some(c) = self.peek() {
                        if c == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => break,
            }
        }
    }

    fn take_ident(&mut self) -> String {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if is_ident_char(c) {
                self.bump();
            } else {
                break;
            }
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn take_number(&mut self) -> Result<Tok, ParseError> {
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.bump();
        }
        let mut is_float = false;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() {
                self.bump();
            } else if c == b'.' || c == b'e' || c == b'E' {
                is_float = true;
                self.bump();
                if (c == b'e' || c == b'E')
                    && matches!(self.peek(), Some(b'+') | Some(b'-'))
                {
                    self.bump();
                }
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        if is_float {
            text.parse::<f64>()
                .map(Tok::Float)
                .map_err(|_| self.err(format!("bad float literal `{text}`")))
        } else {
            text.parse::<i64>()
                .map(Tok::Int)
                .map_err(|_| self.err(format!("bad integer literal `{text}`")))
        }
    }

    fn next(&mut self) -> Result<Option<Spanned>, ParseError> {
        self.skip_ws_and_comments();
        let (line, col) = (self.line, self.col);
        let Some(c) = self.peek() else {
            return Ok(None);
        };
        let tok = match c {
            b'(' => {
                self.bump();
                Tok::LParen
            }
            b')' => {
                self.bump();
                Tok::RParen
            }
            b'{' => {
                self.bump();
                Tok::LBrace
            }
            b'}' => {
                self.bump();
                Tok::RBrace
            }
            b'[' => {
                self.bump();
                Tok::LBracket
            }
            b']' => {
                self.bump();
                Tok::RBracket
            }
            b',' => {
                self.bump();
                Tok::Comma
            }
            b':' => {
                self.bump();
                Tok::Colon
            }
            b'=' => {
                self.bump();
                Tok::Equals
            }
            b'%' => {
                self.bump();
                if !self.peek().map(is_ident_start).unwrap_or(false) {
                    return Err(self.err("expected value name after `%`"));
                }
                Tok::Local(self.take_ident())
            }
            b'@' => {
                self.bump();
                if !self.peek().map(is_ident_start).unwrap_or(false) {
                    return Err(self.err("expected symbol name after `@`"));
                }
                Tok::Symbol(self.take_ident())
            }
            b'!' => {
                self.bump();
                if !self.peek().map(is_ident_start).unwrap_or(false) {
                    return Err(self.err("expected metadata name after `!`"));
                }
                Tok::Meta(self.take_ident())
            }
            b'-' => self.take_number()?,
            c if c.is_ascii_digit() => self.take_number()?,
            c if is_ident_start(c) => Tok::Ident(self.take_ident()),
            other => {
                return Err(self.err(format!("unexpected character `{}`", other as char)))
            }
        };
        Ok(Some(Spanned { tok, line, col }))
    }
}

fn lex(src: &str) -> Result<Vec<Spanned>, ParseError> {
    let mut lx = Lexer::new(src);
    let mut out = Vec::new();
    while let Some(t) = lx.next()? {
        out.push(t);
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn here(&self) -> (u32, u32) {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map(|s| (s.line, s.col))
            .unwrap_or((1, 1))
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        let (line, col) = self.here();
        ParseError {
            line,
            col,
            msg: msg.into(),
        }
    }

    fn bump(&mut self) -> Option<Spanned> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if *t == want => {
                self.bump();
                Ok(())
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn eat(&mut self, want: &Tok) -> bool {
        if self.peek() == Some(want) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(_)) => {
                let Some(Spanned {
                    tok: Tok::Ident(s), ..
                }) = self.bump()
                else {
                    unreachable!()
                };
                Ok(s)
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn symbol(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Symbol(_)) => {
                let Some(Spanned {
                    tok: Tok::Symbol(s),
                    ..
                }) = self.bump()
                else {
                    unreachable!()
                };
                Ok(s)
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn local(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Local(_)) => {
                let Some(Spanned {
                    tok: Tok::Local(s), ..
                }) = self.bump()
                else {
                    unreachable!()
                };
                Ok(s)
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn parse_type(&mut self) -> Result<IrType, ParseError> {
        let name = self.ident("type")?;
        type_from_name(&name).ok_or_else(|| self.err(format!("unknown type `{name}`")))
    }

    /// A plain operand: `%v`, literal, `null`, or `@sym`.
    fn operand(&mut self) -> Result<Operand, ParseError> {
        match self.peek() {
            Some(Tok::Local(_)) => Ok(Operand::Value(self.local("value")?)),
            Some(Tok::Int(_)) => {
                let Some(Spanned { tok: Tok::Int(v), .. }) = self.bump() else {
                    unreachable!()
                };
                Ok(Operand::ConstInt(v))
            }
            Some(Tok::Float(_)) => {
                let Some(Spanned {
                    tok: Tok::Float(v), ..
                }) = self.bump()
                else {
                    unreachable!()
                };
                Ok(Operand::ConstFloat(v))
            }
            Some(Tok::Symbol(_)) => Ok(Operand::Global(self.symbol("symbol")?)),
            Some(Tok::Ident(s)) if s == "null" => {
                self.bump();
                Ok(Operand::Null)
            }
            Some(Tok::Ident(s)) if s == "inf" => {
                self.bump();
                Ok(Operand::ConstFloat(f64::INFINITY))
            }
            Some(Tok::Ident(s)) if s == "nan" => {
                self.bump();
                Ok(Operand::ConstFloat(f64::NAN))
            }
            Some(Tok::Ident(s)) if s == "true" => {
                self.bump();
                Ok(Operand::ConstInt(1))
            }
            Some(Tok::Ident(s)) if s == "false" => {
                self.bump();
                Ok(Operand::ConstInt(0))
            }
            _ => Err(self.err("expected operand")),
        }
    }

    fn metadata(&mut self, inst: &mut Instruction) -> Result<(), ParseError> {
        while let Some(Tok::Meta(_)) = self.peek() {
            let Some(Spanned { tok: Tok::Meta(m), .. }) = self.bump() else {
                unreachable!()
            };
            if let Some(base) = m.strip_prefix("tbaa.") {
                let tag = match base {
                    "double" => TbaaTag::Double,
                    "float" => TbaaTag::Float,
                    "int" => TbaaTag::Int,
                    "ptr" => TbaaTag::Ptr,
                    "any" => TbaaTag::Any,
                    other => {
                        return Err(self.err(format!("unknown tbaa base `{other}`")))
                    }
                };
                if !matches!(
                    inst.opcode,
                    Opcode::Load | Opcode::Store | Opcode::Memcpy
                ) {
                    return Err(
                        self.err("!tbaa is only valid on load, store and memcpy")
                    );
                }
                inst.tbaa = Some(tag);
            } else if m == "cache" {
                inst.attrs.cache = true;
            } else if m == "shadow" {
                inst.attrs.shadow = true;
            } else {
                return Err(self.err(format!("unknown metadata `!{m}`")));
            }
        }
        Ok(())
    }

    /// Call argument list: `(` [arg {"," arg}] `)`. Arguments are either
    /// `ty operand`, a bare `@sym`, or an activity token (autodiff form).
    fn call_args(&mut self) -> Result<Vec<Operand>, ParseError> {
        self.expect(Tok::LParen, "`(`")?;
        let mut args = Vec::new();
        if self.eat(&Tok::RParen) {
            return Ok(args);
        }
        loop {
            match self.peek() {
                Some(Tok::Symbol(_)) => {
                    args.push(Operand::Global(self.symbol("symbol")?));
                }
                Some(Tok::Ident(s)) if s.starts_with("diffe_") => {
                    let token = match s.as_str() {
                        "diffe_active" => ActivityToken::Active,
                        "diffe_dup" => ActivityToken::Dup,
                        "diffe_dupnoneed" => ActivityToken::DupNoNeed,
                        "diffe_const" => ActivityToken::Const,
                        other => {
                            return Err(
                                self.err(format!("unknown activity token `{other}`"))
                            )
                        }
                    };
                    self.bump();
                    args.push(Operand::Token(token));
                }
                _ => {
                    // typed argument
                    let _ty = self.parse_type()?;
                    args.push(self.operand()?);
                }
            }
            if self.eat(&Tok::RParen) {
                return Ok(args);
            }
            self.expect(Tok::Comma, "`,` or `)`")?;
        }
    }

    fn instruction(&mut self) -> Result<Instruction, ParseError> {
        let (line, _) = self.here();
        let result = if let Some(Tok::Local(_)) = self.peek() {
            let name = self.local("value")?;
            self.expect(Tok::Equals, "`=`")?;
            Some(name)
        } else {
            None
        };
        let op_name = self.ident("opcode")?;
        let mut inst = Instruction::new(Opcode::Br); // placeholder
        inst.result = result;
        inst.line = line;

        match op_name.as_str() {
            "fadd" | "fsub" | "fmul" | "fdiv" => {
                inst.opcode = match op_name.as_str() {
                    "fadd" => Opcode::FAdd,
                    "fsub" => Opcode::FSub,
                    "fmul" => Opcode::FMul,
                    _ => Opcode::FDiv,
                };
                inst.ty = Some(self.parse_type()?);
                inst.operands.push(self.operand()?);
                self.expect(Tok::Comma, "`,`")?;
                inst.operands.push(self.operand()?);
            }
            "fneg" => {
                inst.opcode = Opcode::FNeg;
                inst.ty = Some(self.parse_type()?);
                inst.operands.push(self.operand()?);
            }
            "iadd" | "isub" | "imul" => {
                inst.opcode = match op_name.as_str() {
                    "iadd" => Opcode::IAdd,
                    "isub" => Opcode::ISub,
                    _ => Opcode::IMul,
                };
                inst.ty = Some(self.parse_type()?);
                inst.operands.push(self.operand()?);
                self.expect(Tok::Comma, "`,`")?;
                inst.operands.push(self.operand()?);
            }
            "icmp" => {
                let p = self.ident("integer predicate")?;
                let pred = match p.as_str() {
                    "eq" => IntPred::Eq,
                    "ne" => IntPred::Ne,
                    "slt" => IntPred::Slt,
                    "sle" => IntPred::Sle,
                    "sgt" => IntPred::Sgt,
                    "sge" => IntPred::Sge,
                    other => {
                        return Err(self.err(format!("unknown predicate `{other}`")))
                    }
                };
                inst.opcode = Opcode::ICmp(pred);
                inst.ty = Some(self.parse_type()?);
                inst.operands.push(self.operand()?);
                self.expect(Tok::Comma, "`,`")?;
                inst.operands.push(self.operand()?);
            }
            "fcmp" => {
                let p = self.ident("float predicate")?;
                let pred = match p.as_str() {
                    "oeq" => FloatPred::Oeq,
                    "one" => FloatPred::One,
                    "olt" => FloatPred::Olt,
                    "ole" => FloatPred::Ole,
                    "ogt" => FloatPred::Ogt,
                    "oge" => FloatPred::Oge,
                    other => {
                        return Err(self.err(format!("unknown predicate `{other}`")))
                    }
                };
                inst.opcode = Opcode::FCmp(pred);
                inst.ty = Some(self.parse_type()?);
                inst.operands.push(self.operand()?);
                self.expect(Tok::Comma, "`,`")?;
                inst.operands.push(self.operand()?);
            }
            "select" => {
                inst.opcode = Opcode::Select;
                inst.ty = Some(self.parse_type()?);
                inst.operands.push(self.operand()?); // condition
                self.expect(Tok::Comma, "`,`")?;
                inst.operands.push(self.operand()?);
                self.expect(Tok::Comma, "`,`")?;
                inst.operands.push(self.operand()?);
            }
            "phi" => {
                inst.opcode = Opcode::Phi;
                inst.ty = Some(self.parse_type()?);
                loop {
                    self.expect(Tok::LBracket, "`[`")?;
                    inst.operands.push(self.operand()?);
                    self.expect(Tok::Comma, "`,`")?;
                    inst.targets.push(self.ident("block label")?);
                    self.expect(Tok::RBracket, "`]`")?;
                    if !self.eat(&Tok::Comma) {
                        break;
                    }
                }
            }
            "br" => {
                inst.opcode = Opcode::Br;
                inst.targets.push(self.ident("block label")?);
            }
            "condbr" => {
                inst.opcode = Opcode::CondBr;
                inst.operands.push(self.operand()?);
                self.expect(Tok::Comma, "`,`")?;
                inst.targets.push(self.ident("block label")?);
                self.expect(Tok::Comma, "`,`")?;
                inst.targets.push(self.ident("block label")?);
            }
            "ret" => {
                inst.opcode = Opcode::Ret;
                if let Some(Tok::Ident(s)) = self.peek() {
                    if s == "void" {
                        self.bump();
                        return self.finish_instruction(inst);
                    }
                }
                inst.ty = Some(self.parse_type()?);
                inst.operands.push(self.operand()?);
            }
            "call" => {
                inst.opcode = Opcode::Call;
                if let Some(Tok::Ident(s)) = self.peek() {
                    if s == "void" {
                        self.bump();
                        inst.ty = None;
                    } else {
                        inst.ty = Some(self.parse_type()?);
                    }
                } else {
                    inst.ty = Some(self.parse_type()?);
                }
                inst.callee = Some(self.symbol("callee `@name`")?);
                inst.operands = self.call_args()?;
            }
            "callind" => {
                inst.opcode = Opcode::CallInd;
                if let Some(Tok::Ident(s)) = self.peek() {
                    if s == "void" {
                        self.bump();
                        inst.ty = None;
                    } else {
                        inst.ty = Some(self.parse_type()?);
                    }
                } else {
                    inst.ty = Some(self.parse_type()?);
                }
                // callee value, then args
                let callee = self.operand()?;
                inst.operands.push(callee);
                let args = self.call_args()?;
                inst.operands.extend(args);
            }
            "alloc" => {
                inst.opcode = Opcode::Alloc;
                inst.ty = Some(IrType::Ptr);
                inst.operands.push(self.operand()?);
            }
            "free" => {
                inst.opcode = Opcode::Free;
                inst.operands.push(self.operand()?);
            }
            "load" => {
                inst.opcode = Opcode::Load;
                inst.ty = Some(self.parse_type()?);
                self.expect(Tok::Comma, "`,`")?;
                inst.operands.push(self.operand()?);
            }
            "store" => {
                inst.opcode = Opcode::Store;
                inst.ty = Some(self.parse_type()?);
                inst.operands.push(self.operand()?); // value
                self.expect(Tok::Comma, "`,`")?;
                inst.operands.push(self.operand()?); // address
            }
            "memcpy" => {
                inst.opcode = Opcode::Memcpy;
                inst.operands.push(self.operand()?); // dst
                self.expect(Tok::Comma, "`,`")?;
                inst.operands.push(self.operand()?); // src
                self.expect(Tok::Comma, "`,`")?;
                inst.operands.push(self.operand()?); // byte length
            }
            "ptradd" => {
                inst.opcode = Opcode::PtrAdd;
                inst.ty = Some(IrType::Ptr);
                inst.operands.push(self.operand()?);
                self.expect(Tok::Comma, "`,`")?;
                inst.operands.push(self.operand()?);
            }
            "sitofp" => {
                inst.opcode = Opcode::SiToFp;
                inst.ty = Some(self.parse_type()?);
                inst.operands.push(self.operand()?);
            }
            name => {
                let intr = Intrinsic::ALL
                    .iter()
                    .copied()
                    .find(|i| i.name() == name)
                    .ok_or_else(|| self.err(format!("unknown opcode `{name}`")))?;
                inst.opcode = Opcode::Intrinsic(intr);
                inst.ty = Some(self.parse_type()?);
                for k in 0..intr.arity() {
                    if k > 0 {
                        self.expect(Tok::Comma, "`,`")?;
                    }
                    inst.operands.push(self.operand()?);
                }
            }
        }
        self.finish_instruction(inst)
    }

    fn finish_instruction(&mut self, mut inst: Instruction) -> Result<Instruction, ParseError> {
        self.metadata(&mut inst)?;
        Ok(inst)
    }

    fn function(&mut self) -> Result<IrFunction, ParseError> {
        // "define" already consumed
        let return_type = if let Some(Tok::Ident(s)) = self.peek() {
            if s == "void" {
                self.bump();
                None
            } else {
                Some(self.parse_type()?)
            }
        } else {
            Some(self.parse_type()?)
        };
        let name = self.symbol("function name `@name`")?;
        self.expect(Tok::LParen, "`(`")?;
        let mut params = Vec::new();
        if !self.eat(&Tok::RParen) {
            loop {
                let ty = self.parse_type()?;
                let pname = self.local("parameter name `%name`")?;
                let mut noalias = false;
                let mut readonly = false;
                while let Some(Tok::Ident(s)) = self.peek() {
                    match s.as_str() {
                        "noalias" => {
                            noalias = true;
                            self.bump();
                        }
                        "readonly" => {
                            readonly = true;
                            self.bump();
                        }
                        _ => break,
                    }
                }
                params.push(Param {
                    name: pname,
                    ty,
                    noalias,
                    readonly,
                });
                if self.eat(&Tok::RParen) {
                    break;
                }
                self.expect(Tok::Comma, "`,` or `)`")?;
            }
        }
        let mut fast = false;
        if let Some(Tok::Ident(s)) = self.peek() {
            if s == "fast" {
                fast = true;
                self.bump();
            }
        }
        self.expect(Tok::LBrace, "`{`")?;
        let mut blocks: Vec<BasicBlock> = Vec::new();
        loop {
            if self.eat(&Tok::RBrace) {
                break;
            }
            // Block label: ident ":"
            if blocks.is_empty() || matches!((self.peek(), self.toks.get(self.pos + 1).map(|s| &s.tok)), (Some(Tok::Ident(_)), Some(Tok::Colon)))
            {
                let label = self.ident("block label")?;
                self.expect(Tok::Colon, "`:` after block label")?;
                if blocks.iter().any(|b| b.name == label) {
                    return Err(self.err(format!("duplicate block label `{label}`")));
                }
                blocks.push(BasicBlock::new(label));
                continue;
            }
            let inst = self.instruction()?;
            blocks
                .last_mut()
                .expect("instruction outside of block")
                .instrs
                .push(inst);
        }
        if blocks.is_empty() {
            return Err(self.err(format!("function `@{name}` has no blocks")));
        }
        Ok(IrFunction {
            name,
            params,
            return_type,
            blocks,
            fast,
        })
    }

    fn declaration(&mut self) -> Result<IrFunction, ParseError> {
        // "declare" already consumed
        let return_type = if let Some(Tok::Ident(s)) = self.peek() {
            if s == "void" {
                self.bump();
                None
            } else {
                Some(self.parse_type()?)
            }
        } else {
            Some(self.parse_type()?)
        };
        let name = self.symbol("function name `@name`")?;
        self.expect(Tok::LParen, "`(`")?;
        let mut params = Vec::new();
        if !self.eat(&Tok::RParen) {
            let mut idx = 0usize;
            loop {
                let ty = self.parse_type()?;
                // parameter names are optional in declarations
                let pname = if let Some(Tok::Local(_)) = self.peek() {
                    self.local("parameter name")?
                } else {
                    format!("arg{idx}")
                };
                let mut noalias = false;
                let mut readonly = false;
                while let Some(Tok::Ident(s)) = self.peek() {
                    match s.as_str() {
                        "noalias" => {
                            noalias = true;
                            self.bump();
                        }
                        "readonly" => {
                            readonly = true;
                            self.bump();
                        }
                        _ => break,
                    }
                }
                params.push(Param {
                    name: pname,
                    ty,
                    noalias,
                    readonly,
                });
                idx += 1;
                if self.eat(&Tok::RParen) {
                    break;
                }
                self.expect(Tok::Comma, "`,` or `)`")?;
            }
        }
        Ok(IrFunction {
            name,
            params,
            return_type,
            blocks: Vec::new(),
            fast: false,
        })
    }

    fn global(&mut self) -> Result<GlobalData, ParseError> {
        // "global" already consumed
        let name = self.symbol("global name `@name`")?;
        self.expect(Tok::Equals, "`=`")?;
        match self.peek() {
            Some(Tok::LBracket) => {
                self.bump();
                let ty = self.parse_type()?;
                if ty == IrType::Ptr {
                    return Err(self.err("global arrays hold scalars, not pointers"));
                }
                let mut vals = Vec::new();
                loop {
                    match self.operand()? {
                        Operand::ConstFloat(v) => vals.push(v),
                        Operand::ConstInt(v) => vals.push(v as f64),
                        _ => return Err(self.err("expected scalar constant")),
                    }
                    if self.eat(&Tok::RBracket) {
                        break;
                    }
                    self.expect(Tok::Comma, "`,` or `]`")?;
                }
                Ok(GlobalData {
                    name,
                    init: GlobalInit::Scalars(ty, vals),
                })
            }
            Some(Tok::Ident(s)) if s == "functions" => {
                self.bump();
                self.expect(Tok::LParen, "`(`")?;
                let mut fns = Vec::new();
                loop {
                    fns.push(self.symbol("function reference `@name`")?);
                    if self.eat(&Tok::RParen) {
                        break;
                    }
                    self.expect(Tok::Comma, "`,` or `)`")?;
                }
                Ok(GlobalData {
                    name,
                    init: GlobalInit::Functions(fns),
                })
            }
            _ => Err(self.err("expected `[ty v, ...]` or `functions(@a, ...)`")),
        }
    }

    fn module(&mut self) -> Result<IrModule, ParseError> {
        let mut m = IrModule::default();
        while let Some(tok) = self.peek() {
            match tok {
                Tok::Ident(s) if s == "define" => {
                    self.bump();
                    let f = self.function()?;
                    if m.has_symbol(&f.name) {
                        return Err(self.err(format!("duplicate definition of `@{}`", f.name)));
                    }
                    m.functions.push(f);
                }
                Tok::Ident(s) if s == "declare" => {
                    self.bump();
                    let f = self.declaration()?;
                    if m.has_symbol(&f.name) {
                        return Err(self.err(format!("duplicate definition of `@{}`", f.name)));
                    }
                    m.functions.push(f);
                }
                Tok::Ident(s) if s == "global" => {
                    self.bump();
                    let g = self.global()?;
                    if m.has_symbol(&g.name) {
                        return Err(self.err(format!("duplicate definition of `@{}`", g.name)));
                    }
                    m.globals.push(g);
                }
                Tok::Ident(s) if s == "custom_adjoint" => {
                    self.bump();
                    let target = self.symbol("target function `@name`")?;
                    self.expect(Tok::Equals, "`=`")?;
                    self.expect(Tok::LParen, "`(`")?;
                    let aug = self.symbol("augmented function `@name`")?;
                    self.expect(Tok::Comma, "`,`")?;
                    let grad = self.symbol("gradient function `@name`")?;
                    self.expect(Tok::RParen, "`)`")?;
                    if m.custom_adjoints.contains_key(&target) {
                        return Err(self.err(format!(
                            "duplicate custom_adjoint for `@{target}`"
                        )));
                    }
                    m.custom_adjoints.insert(target, (aug, grad));
                }
                _ => {
                    return Err(self.err(
                        "expected `define`, `declare`, `global` or `custom_adjoint`",
                    ))
                }
            }
        }
        Ok(m)
    }
}

fn type_from_name(s: &str) -> Option<IrType> {
    match s {
        "f64" => Some(IrType::F64),
        "f32" => Some(IrType::F32),
        "i1" => Some(IrType::I1),
        "i32" => Some(IrType::I32),
        "i64" => Some(IrType::I64),
        "ptr" => Some(IrType::Ptr),
        _ => None,
    }
}

/// Parses a module from source text. The result is syntactically well
/// formed; run [`validate`] for the structural (SSA, CFG, typing) rules.
pub fn parse(src: &str) -> Result<IrModule, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0 };
    p.module()
}

/// Parses several sources and merges them into one module. Symbols are
/// merged by name; duplicate definitions are an error. A declaration and
/// a definition of the same function merge to the definition.
pub fn parse_files(sources: &[(String, String)]) -> Result<IrModule, ParseError> {
    let mut merged = IrModule::default();
    for (name, src) in sources {
        let m = parse(src).map_err(|e| ParseError {
            line: e.line,
            col: e.col,
            msg: format!("{name}: {}", e.msg),
        })?;
        for f in m.functions {
            match merged.function_mut(&f.name) {
                Some(existing) => {
                    if existing.is_declaration() && !f.is_declaration() {
                        *existing = f;
                    } else if !existing.is_declaration() && !f.is_declaration() {
                        return Err(ParseError {
                            line: 0,
                            col: 0,
                            msg: format!(
                                "{name}: duplicate definition of `@{}`",
                                f.name
                            ),
                        });
                    }
                    // definition + declaration: keep the definition
                }
                None => merged.functions.push(f),
            }
        }
        for g in m.globals {
            if merged.has_symbol(&g.name) {
                return Err(ParseError {
                    line: 0,
                    col: 0,
                    msg: format!("{name}: duplicate definition of `@{}`", g.name),
                });
            }
            merged.globals.push(g);
        }
        for (k, v) in m.custom_adjoints {
            if merged.custom_adjoints.contains_key(&k) {
                return Err(ParseError {
                    line: 0,
                    col: 0,
                    msg: format!("{name}: duplicate custom_adjoint for `@{k}`"),
                });
            }
            merged.custom_adjoints.insert(k, v);
        }
    }
    Ok(merged)
}

//! Text format parser. Parsing happens in two stages: a syntactic pass that
//! produces raw items with unresolved names, and a lowering pass that
//! resolves names, interns types and validates the program.
//!
//! Lowering interns types in a fixed order (named structs, globals, then per
//! function: parameters, return type, registers, instructions) so that
//! printing and reparsing a program yields identical type ids.

use std::collections::{HashMap, HashSet, VecDeque};

use super::*;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{col}: {message}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
struct Pos {
    line: u32,
    col: u32,
}

impl Pos {
    fn err(self, message: impl Into<String>) -> ParseError {
        ParseError { line: self.line, col: self.col, message: message.into() }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Local(String),
    Global(String),
    Int(i64),
    Str(String),
    Punct(char),
    Arrow,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Local(s) => format!("`%{s}`"),
            Tok::Global(s) => format!("`@{s}`"),
            Tok::Int(v) => format!("`{v}`"),
            Tok::Str(s) => format!("{s:?}"),
            Tok::Punct(c) => format!("`{c}`"),
            Tok::Arrow => "`->`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(src: &str) -> Result<Vec<(Tok, Pos)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        let start = i;
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
                continue;
            }
            c if c.is_whitespace() => {
                i += 1;
                col += 1;
                continue;
            }
            ';' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            '%' | '@' => {
                i += 1;
                while i < chars.len() && is_name_char(chars[i]) {
                    i += 1;
                }
                let name: String = chars[start + 1..i].iter().collect();
                if name.is_empty() {
                    return Err(pos.err(format!("expected a name after `{c}`")));
                }
                out.push((if c == '%' { Tok::Local(name) } else { Tok::Global(name) }, pos));
            }
            '"' => {
                i += 1;
                let mut s = String::new();
                loop {
                    match chars.get(i) {
                        None | Some('\n') => return Err(pos.err("unterminated string literal")),
                        Some('"') => break,
                        Some('\\') => {
                            match chars.get(i + 1) {
                                Some('n') => s.push('\n'),
                                Some(&e @ ('"' | '\\')) => s.push(e),
                                _ => return Err(pos.err("invalid escape in string literal")),
                            }
                            i += 2;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                i += 1;
                out.push((Tok::Str(s), pos));
            }
            '-' if chars.get(i + 1) == Some(&'>') => {
                i += 2;
                out.push((Tok::Arrow, pos));
            }
            c if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) => {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let (neg, body) = match text.strip_prefix('-') {
                    Some(rest) => (true, rest),
                    None => (false, text.as_str()),
                };
                let parsed = match body.strip_prefix("0x") {
                    Some(hex) => u64::from_str_radix(hex, 16).map(|v| v as i64),
                    None => body.parse::<u64>().map(|v| v as i64),
                };
                let value = parsed.map_err(|_| pos.err(format!("invalid integer literal `{text}`")))?;
                out.push((Tok::Int(if neg { value.wrapping_neg() } else { value }), pos));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                out.push((Tok::Ident(chars[start..i].iter().collect()), pos));
            }
            '{' | '}' | '(' | ')' | '[' | ']' | ',' | ':' | '=' | '!' => {
                i += 1;
                out.push((Tok::Punct(c), pos));
            }
            other => return Err(pos.err(format!("unexpected character `{other}`"))),
        }
        col += (i - start) as u32;
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

#[derive(Clone, Debug)]
enum RawType {
    Prim(u8),
    Named(String),
    Ptr(Box<RawType>),
    Array(u32, Box<RawType>),
}

#[derive(Clone, Debug)]
enum RawOperand {
    Reg(String),
    Imm(i64),
    Null,
    Global(String),
}

#[derive(Clone, Debug)]
enum RawOp {
    Const { ty: RawType, dst: String, value: RawOperand },
    Bin { kind: BinKind, ty: RawType, dst: String, a: RawOperand, b: RawOperand },
    ICmp { rel: CmpRel, ty: RawType, dst: String, a: RawOperand, b: RawOperand },
    Alloca { dst: String, size: u32 },
    Malloc { dst: String, size: RawOperand },
    Free { ptr: RawOperand },
    Load { ty: RawType, dst: String, ptr: RawOperand, offset: i64 },
    Store { ty: RawType, src: RawOperand, ptr: RawOperand, offset: i64 },
    PtrAdd { dst: String, ptr: RawOperand, index: RawOperand, stride: i64, base: i64 },
    Br { target: String },
    CondBr { cond: RawOperand, then_to: String, else_to: String },
    Call { dst: Option<String>, callee: String, args: Vec<RawOperand> },
    Ret { value: Option<(RawType, RawOperand)> },
    Choose { dst: String, total: i64 },
    Interrupt,
    Spawn { callee: String, args: Vec<RawOperand> },
    Fault { message: String },
}

#[derive(Default, Debug)]
struct Annots {
    line: Option<u32>,
    var: Option<String>,
    src: Option<String>,
}

struct RawInstr {
    op: RawOp,
    annots: Annots,
    pos: Pos,
}

struct RawBlock {
    label: String,
    instrs: Vec<RawInstr>,
    pos: Pos,
}

struct RawReg {
    name: String,
    ty: RawType,
    var: Option<String>,
    pos: Pos,
}

struct RawFn {
    name: String,
    params: Vec<RawReg>,
    ret: Option<RawType>,
    src: Option<String>,
    regs: Vec<RawReg>,
    blocks: Vec<RawBlock>,
    pos: Pos,
}

struct RawStruct {
    name: String,
    fields: Vec<(String, RawType, u32, Pos)>,
    size: u32,
    pos: Pos,
}

struct RawGlobal {
    name: String,
    ty: RawType,
    init: GlobalInit,
    var: Option<String>,
    pos: Pos,
}

#[derive(Default)]
struct RawProgram {
    structs: Vec<RawStruct>,
    globals: Vec<RawGlobal>,
    fns: Vec<RawFn>,
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn unexpected<T>(&self, what: &str) -> Result<T, ParseError> {
        Err(self.pos().err(format!("expected {what}, found {}", self.peek().describe())))
    }

    fn punct(&mut self, c: char) -> Result<(), ParseError> {
        if *self.peek() == Tok::Punct(c) {
            self.bump();
            Ok(())
        } else {
            self.unexpected(&format!("`{c}`"))
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if *self.peek() == Tok::Punct(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Ident(s) if s == kw => {
                self.bump();
                Ok(())
            }
            _ => self.unexpected(&format!("`{kw}`")),
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => self.unexpected("an identifier"),
        }
    }

    fn local(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Local(s) => {
                self.bump();
                Ok(s)
            }
            _ => self.unexpected("a register name"),
        }
    }

    fn global(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Global(s) => {
                self.bump();
                Ok(s)
            }
            _ => self.unexpected("a global name"),
        }
    }

    fn int(&mut self) -> Result<i64, ParseError> {
        match *self.peek() {
            Tok::Int(v) => {
                self.bump();
                Ok(v)
            }
            _ => self.unexpected("an integer"),
        }
    }

    fn uint(&mut self) -> Result<u32, ParseError> {
        let pos = self.pos();
        let v = self.int()?;
        u32::try_from(v).map_err(|_| pos.err(format!("integer {v} out of range")))
    }

    fn string(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Str(s) => {
                self.bump();
                Ok(s)
            }
            _ => self.unexpected("a string literal"),
        }
    }

    fn ty(&mut self) -> Result<RawType, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) if s == "i8" || s == "i32" || s == "i64" => {
                self.bump();
                Ok(RawType::Prim(match s.as_str() {
                    "i8" => 1,
                    "i32" => 4,
                    _ => 8,
                }))
            }
            Tok::Ident(s) if s == "ptr" => {
                self.bump();
                Ok(RawType::Ptr(Box::new(self.ty()?)))
            }
            Tok::Local(name) => {
                self.bump();
                Ok(RawType::Named(name))
            }
            Tok::Punct('[') => {
                self.bump();
                let count = self.uint()?;
                self.keyword("x")?;
                let elem = self.ty()?;
                self.punct(']')?;
                Ok(RawType::Array(count, Box::new(elem)))
            }
            _ => self.unexpected("a type"),
        }
    }

    fn operand(&mut self) -> Result<RawOperand, ParseError> {
        match self.peek().clone() {
            Tok::Local(s) => {
                self.bump();
                Ok(RawOperand::Reg(s))
            }
            Tok::Global(s) => {
                self.bump();
                Ok(RawOperand::Global(s))
            }
            Tok::Int(v) => {
                self.bump();
                Ok(RawOperand::Imm(v))
            }
            Tok::Ident(s) if s == "null" => {
                self.bump();
                Ok(RawOperand::Null)
            }
            _ => self.unexpected("an operand"),
        }
    }

    fn annots(&mut self) -> Result<Annots, ParseError> {
        let mut a = Annots::default();
        while self.eat_punct('!') {
            let pos = self.pos();
            let name = self.ident()?;
            self.punct('(')?;
            match name.as_str() {
                "line" => {
                    let lpos = self.pos();
                    let line = self.uint()?;
                    if line == 0 {
                        return Err(lpos.err("line numbers start at 1"));
                    }
                    a.line = Some(line);
                }
                "var" => a.var = Some(self.string()?),
                "src" => a.src = Some(self.string()?),
                other => return Err(pos.err(format!("unknown annotation `!{other}`"))),
            }
            self.punct(')')?;
        }
        Ok(a)
    }

    fn program(&mut self) -> Result<RawProgram, ParseError> {
        let mut prog = RawProgram::default();
        loop {
            let pos = self.pos();
            match self.peek().clone() {
                Tok::Eof => return Ok(prog),
                Tok::Ident(kw) if kw == "type" => {
                    self.bump();
                    prog.structs.push(self.struct_decl(pos)?);
                }
                Tok::Ident(kw) if kw == "global" => {
                    self.bump();
                    prog.globals.push(self.global_decl(pos)?);
                }
                Tok::Ident(kw) if kw == "fn" => {
                    self.bump();
                    prog.fns.push(self.fn_decl(pos)?);
                }
                _ => return self.unexpected("`type`, `global` or `fn`"),
            }
        }
    }

    fn struct_decl(&mut self, pos: Pos) -> Result<RawStruct, ParseError> {
        let name = self.local()?;
        self.punct('=')?;
        self.keyword("struct")?;
        self.punct('{')?;
        let mut fields = Vec::new();
        if !self.eat_punct('}') {
            loop {
                let fpos = self.pos();
                let fname = self.ident()?;
                self.punct(':')?;
                let fty = self.ty()?;
                let off = match self.bump() {
                    Tok::Global(s) => s.parse::<u32>().map_err(|_| fpos.err(format!("invalid field offset `@{s}`")))?,
                    _ => return Err(fpos.err("expected field offset `@<bytes>`")),
                };
                fields.push((fname, fty, off, fpos));
                if self.eat_punct('}') {
                    break;
                }
                self.punct(',')?;
            }
        }
        self.keyword("size")?;
        let size = self.uint()?;
        Ok(RawStruct { name, fields, size, pos })
    }

    fn global_decl(&mut self, pos: Pos) -> Result<RawGlobal, ParseError> {
        let name = self.global()?;
        self.punct(':')?;
        let ty = self.ty()?;
        self.punct('=')?;
        let init = match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                GlobalInit::Int(v)
            }
            Tok::Ident(s) if s == "null" => {
                self.bump();
                GlobalInit::Null
            }
            Tok::Ident(s) if s == "zero" => {
                self.bump();
                GlobalInit::Zero
            }
            _ => return self.unexpected("an initializer (integer, `null` or `zero`)"),
        };
        let a = self.annots()?;
        Ok(RawGlobal { name, ty, init, var: a.var, pos })
    }

    fn fn_decl(&mut self, pos: Pos) -> Result<RawFn, ParseError> {
        let name = self.global()?;
        self.punct('(')?;
        let mut params = Vec::new();
        if !self.eat_punct(')') {
            loop {
                let ppos = self.pos();
                let pname = self.local()?;
                self.punct(':')?;
                let ty = self.ty()?;
                let a = self.annots()?;
                params.push(RawReg { name: pname, ty, var: a.var, pos: ppos });
                if self.eat_punct(')') {
                    break;
                }
                self.punct(',')?;
            }
        }
        let ret = if *self.peek() == Tok::Arrow {
            self.bump();
            match self.peek() {
                Tok::Ident(s) if s == "void" => {
                    self.bump();
                    None
                }
                _ => Some(self.ty()?),
            }
        } else {
            None
        };
        let a = self.annots()?;
        self.punct('{')?;
        let mut regs = Vec::new();
        while matches!(self.peek(), Tok::Ident(s) if s == "reg") {
            let rpos = self.pos();
            self.bump();
            let rname = self.local()?;
            self.punct(':')?;
            let ty = self.ty()?;
            let ra = self.annots()?;
            regs.push(RawReg { name: rname, ty, var: ra.var, pos: rpos });
        }
        let mut blocks: Vec<RawBlock> = Vec::new();
        loop {
            if self.eat_punct('}') {
                break;
            }
            if matches!(self.peek(), Tok::Ident(_)) && *self.peek2() == Tok::Punct(':') {
                let bpos = self.pos();
                let label = self.ident()?;
                self.punct(':')?;
                blocks.push(RawBlock { label, instrs: Vec::new(), pos: bpos });
                continue;
            }
            let ipos = self.pos();
            let op = self.instr()?;
            let annots = self.annots()?;
            match blocks.last_mut() {
                Some(b) => b.instrs.push(RawInstr { op, annots, pos: ipos }),
                None => return Err(ipos.err("instruction outside of a block (missing label)")),
            }
        }
        Ok(RawFn { name, params, ret, src: a.src, regs, blocks, pos })
    }

    fn call_args(&mut self) -> Result<Vec<RawOperand>, ParseError> {
        self.punct('(')?;
        let mut args = Vec::new();
        if !self.eat_punct(')') {
            loop {
                args.push(self.operand()?);
                if self.eat_punct(')') {
                    break;
                }
                self.punct(',')?;
            }
        }
        Ok(args)
    }

    fn instr(&mut self) -> Result<RawOp, ParseError> {
        let pos = self.pos();
        let opcode = match self.peek().clone() {
            Tok::Ident(s) => s,
            _ => return self.unexpected("an instruction"),
        };
        self.bump();
        let bin = match opcode.as_str() {
            "add" => Some(BinKind::Add),
            "sub" => Some(BinKind::Sub),
            "mul" => Some(BinKind::Mul),
            "sdiv" => Some(BinKind::SDiv),
            "and" => Some(BinKind::And),
            "or" => Some(BinKind::Or),
            "xor" => Some(BinKind::Xor),
            _ => None,
        };
        if let Some(kind) = bin {
            let ty = self.ty()?;
            let dst = self.local()?;
            self.punct(',')?;
            let a = self.operand()?;
            self.punct(',')?;
            let b = self.operand()?;
            return Ok(RawOp::Bin { kind, ty, dst, a, b });
        }
        Ok(match opcode.as_str() {
            "const" => {
                let ty = self.ty()?;
                let dst = self.local()?;
                self.punct(',')?;
                RawOp::Const { ty, dst, value: self.operand()? }
            }
            "icmp" => {
                let rpos = self.pos();
                let rel = match self.ident()?.as_str() {
                    "eq" => CmpRel::Eq,
                    "ne" => CmpRel::Ne,
                    "slt" => CmpRel::Slt,
                    "sle" => CmpRel::Sle,
                    "sgt" => CmpRel::Sgt,
                    "sge" => CmpRel::Sge,
                    other => return Err(rpos.err(format!("unknown comparison `{other}`"))),
                };
                let ty = self.ty()?;
                let dst = self.local()?;
                self.punct(',')?;
                let a = self.operand()?;
                self.punct(',')?;
                let b = self.operand()?;
                RawOp::ICmp { rel, ty, dst, a, b }
            }
            "alloca" => {
                let dst = self.local()?;
                self.punct(',')?;
                RawOp::Alloca { dst, size: self.uint()? }
            }
            "malloc" => {
                let dst = self.local()?;
                self.punct(',')?;
                RawOp::Malloc { dst, size: self.operand()? }
            }
            "free" => RawOp::Free { ptr: self.operand()? },
            "load" => {
                let ty = self.ty()?;
                let dst = self.local()?;
                self.punct(',')?;
                let ptr = self.operand()?;
                self.punct(',')?;
                RawOp::Load { ty, dst, ptr, offset: self.int()? }
            }
            "store" => {
                let ty = self.ty()?;
                let src = self.operand()?;
                self.punct(',')?;
                let ptr = self.operand()?;
                self.punct(',')?;
                RawOp::Store { ty, src, ptr, offset: self.int()? }
            }
            "ptradd" => {
                let dst = self.local()?;
                self.punct(',')?;
                let ptr = self.operand()?;
                self.punct(',')?;
                let index = self.operand()?;
                self.punct(',')?;
                let stride = self.int()?;
                self.punct(',')?;
                RawOp::PtrAdd { dst, ptr, index, stride, base: self.int()? }
            }
            "br" => RawOp::Br { target: self.ident()? },
            "condbr" => {
                let cond = self.operand()?;
                self.punct(',')?;
                let then_to = self.ident()?;
                self.punct(',')?;
                RawOp::CondBr { cond, then_to, else_to: self.ident()? }
            }
            "call" => {
                let dst = match self.peek() {
                    Tok::Local(_) => {
                        let d = self.local()?;
                        self.punct(',')?;
                        Some(d)
                    }
                    _ => None,
                };
                let callee = self.global()?;
                RawOp::Call { dst, callee, args: self.call_args()? }
            }
            "ret" => {
                let value = match self.peek() {
                    Tok::Ident(s) if matches!(s.as_str(), "i8" | "i32" | "i64" | "ptr") => {
                        let ty = self.ty()?;
                        Some((ty, self.operand()?))
                    }
                    _ => None,
                };
                RawOp::Ret { value }
            }
            "choose" => {
                let dst = self.local()?;
                self.punct(',')?;
                RawOp::Choose { dst, total: self.int()? }
            }
            "interrupt" => RawOp::Interrupt,
            "spawn" => {
                let callee = self.global()?;
                RawOp::Spawn { callee, args: self.call_args()? }
            }
            "fault" => RawOp::Fault { message: self.string()? },
            other => return Err(pos.err(format!("unknown opcode `{other}`"))),
        })
    }
}

/// Operand class used by the type checker.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Int(Option<u32>),
    Ptr,
}

struct Lowering {
    types: Vec<TypeDesc>,
    interned: HashMap<TypeDesc, TypeId>,
    struct_ids: HashMap<String, TypeId>,
    files: Vec<String>,
}

impl Lowering {
    fn new() -> Self {
        let types = vec![TypeDesc::Prim { width: 1 }, TypeDesc::Prim { width: 4 }, TypeDesc::Prim { width: 8 }];
        let interned = types.iter().enumerate().map(|(i, t)| (t.clone(), TypeId(i as u32))).collect();
        Lowering { types, interned, struct_ids: HashMap::new(), files: Vec::new() }
    }

    fn intern(&mut self, desc: TypeDesc) -> TypeId {
        if let Some(&id) = self.interned.get(&desc) {
            return id;
        }
        let id = TypeId(self.types.len() as u32);
        self.types.push(desc.clone());
        self.interned.insert(desc, id);
        id
    }

    fn resolve(&mut self, t: &RawType, pos: Pos) -> Result<TypeId, ParseError> {
        Ok(match t {
            RawType::Prim(1) => TypeId::I8,
            RawType::Prim(4) => TypeId::I32,
            RawType::Prim(_) => TypeId::I64,
            RawType::Named(n) => {
                *self.struct_ids.get(n).ok_or_else(|| pos.err(format!("unknown type `%{n}`")))?
            }
            RawType::Ptr(base) => {
                let base = self.resolve(base, pos)?;
                self.intern(TypeDesc::Ptr { base })
            }
            RawType::Array(count, elem) => {
                let elem = self.resolve(elem, pos)?;
                self.intern(TypeDesc::Array { elem, count: *count })
            }
        })
    }

    fn file(&mut self, name: &str) -> FileId {
        match self.files.iter().position(|f| f == name) {
            Some(i) => FileId(i as u32),
            None => {
                self.files.push(name.to_string());
                FileId(self.files.len() as u32 - 1)
            }
        }
    }

    fn size(&self, id: TypeId) -> u32 {
        match &self.types[id.0 as usize] {
            TypeDesc::Prim { width } => u32::from(*width),
            TypeDesc::Ptr { .. } => PTR_SIZE,
            TypeDesc::Struct { size, .. } => *size,
            TypeDesc::Array { elem, count } => self.size(*elem).saturating_mul(*count),
        }
    }

    fn class_of_type(&self, id: TypeId) -> Option<Class> {
        match &self.types[id.0 as usize] {
            TypeDesc::Prim { width } => Some(Class::Int(Some(u32::from(*width)))),
            TypeDesc::Ptr { .. } => Some(Class::Ptr),
            _ => None,
        }
    }
}

fn compatible(expected: Class, actual: Class) -> bool {
    match (expected, actual) {
        (Class::Ptr, Class::Ptr) => true,
        (Class::Int(a), Class::Int(b)) => a.is_none() || b.is_none() || a == b,
        _ => false,
    }
}

fn class_name(c: Class) -> String {
    match c {
        Class::Ptr => "pointer".into(),
        Class::Int(Some(w)) => format!("i{}", w * 8),
        Class::Int(None) => "integer".into(),
    }
}

struct FnCtx<'a> {
    regs: Vec<Register>,
    reg_ids: HashMap<String, RegId>,
    globals: &'a HashMap<String, GlobalId>,
}

impl FnCtx<'_> {
    fn operand(&self, o: &RawOperand, pos: Pos) -> Result<Operand, ParseError> {
        Ok(match o {
            RawOperand::Reg(n) => {
                Operand::Reg(*self.reg_ids.get(n).ok_or_else(|| pos.err(format!("undeclared register `%{n}`")))?)
            }
            RawOperand::Imm(v) => Operand::Imm(*v),
            RawOperand::Null => Operand::Null,
            RawOperand::Global(n) => {
                Operand::Global(*self.globals.get(n).ok_or_else(|| pos.err(format!("unknown global `@{n}`")))?)
            }
        })
    }

    fn reg(&self, n: &str, pos: Pos) -> Result<RegId, ParseError> {
        self.reg_ids.get(n).copied().ok_or_else(|| pos.err(format!("undeclared register `%{n}`")))
    }
}

/// Parses and validates a MIR program.
pub fn parse_program(text: &str) -> Result<ProgramUnit, ParseError> {
    let toks = lex(text)?;
    let raw = Parser { toks, at: 0 }.program()?;
    lower(raw)
}

fn lower(raw: RawProgram) -> Result<ProgramUnit, ParseError> {
    let mut lw = Lowering::new();

    // Named structs get ids in declaration order before any field is resolved,
    // so fields may refer to later (or the same) structs.
    for s in &raw.structs {
        if lw.struct_ids.contains_key(&s.name) {
            return Err(s.pos.err(format!("duplicate type name `%{}`", s.name)));
        }
        let id = TypeId(lw.types.len() as u32);
        lw.types.push(TypeDesc::Struct { name: s.name.clone(), size: s.size, fields: Vec::new() });
        lw.struct_ids.insert(s.name.clone(), id);
    }
    for s in &raw.structs {
        let mut fields = Vec::new();
        let mut seen = HashSet::new();
        let mut prev_end: Option<u32> = None;
        let mut prev_off: Option<u32> = None;
        for (name, fty, off, fpos) in &s.fields {
            if !seen.insert(name.clone()) {
                return Err(fpos.err(format!("duplicate field `{name}` in `%{}`", s.name)));
            }
            let ty = lw.resolve(fty, *fpos)?;
            if prev_off.is_some_and(|p| *off <= p) {
                return Err(fpos.err(format!("field offsets of `%{}` must be strictly increasing", s.name)));
            }
            if prev_end.is_some_and(|e| *off < e) {
                return Err(fpos.err(format!("field `{name}` overlaps the previous field")));
            }
            fields.push(Field { name: name.clone(), offset: *off, ty });
            prev_off = Some(*off);
            prev_end = Some(*off + lw.size(ty));
        }
        let id = lw.struct_ids[&s.name];
        if let TypeDesc::Struct { fields: slot, .. } = &mut lw.types[id.0 as usize] {
            *slot = fields;
        }
        // Field sizes may depend on other structs, so check the fit once all are known.
    }
    for s in &raw.structs {
        let id = lw.struct_ids[&s.name];
        if let TypeDesc::Struct { fields, size, .. } = lw.types[id.0 as usize].clone() {
            for f in &fields {
                if f.offset.saturating_add(lw.size(f.ty)) > size {
                    return Err(s.pos.err(format!("field `{}` does not fit in `%{}` of size {size}", f.name, s.name)));
                }
            }
        }
    }

    let mut globals = Vec::new();
    let mut global_ids = HashMap::new();
    let mut offset = 0u32;
    for g in &raw.globals {
        if global_ids.contains_key(&g.name) {
            return Err(g.pos.err(format!("duplicate global `@{}`", g.name)));
        }
        let ty = lw.resolve(&g.ty, g.pos)?;
        match (&g.init, lw.class_of_type(ty)) {
            (GlobalInit::Zero, _) => {}
            (GlobalInit::Int(_), Some(Class::Int(_))) => {}
            (GlobalInit::Null, Some(Class::Ptr)) => {}
            _ => return Err(g.pos.err(format!("initializer does not match the type of `@{}`", g.name))),
        }
        offset = offset.next_multiple_of(8);
        global_ids.insert(g.name.clone(), GlobalId(globals.len() as u32));
        globals.push(GlobalDef { name: g.name.clone(), ty, init: g.init.clone(), var: g.var.clone(), offset });
        offset += lw.size(ty);
    }

    let mut func_ids = HashMap::new();
    for (i, f) in raw.fns.iter().enumerate() {
        if func_ids.insert(f.name.clone(), FuncId(i as u32)).is_some() {
            return Err(f.pos.err(format!("duplicate function `@{}`", f.name)));
        }
    }
    // Signatures are needed to type call destinations.
    let mut sigs: Vec<(Vec<TypeId>, Option<TypeId>)> = Vec::new();
    let mut functions = Vec::new();
    for f in &raw.fns {
        let mut params = Vec::new();
        for p in &f.params {
            params.push(lw.resolve(&p.ty, p.pos)?);
        }
        let ret = f.ret.as_ref().map(|t| lw.resolve(t, f.pos)).transpose()?;
        sigs.push((params, ret));
    }
    let global_tys: Vec<TypeId> = globals.iter().map(|g| g.ty).collect();
    for (fi, f) in raw.fns.iter().enumerate() {
        functions.push(lower_fn(&mut lw, f, fi, &sigs, &func_ids, &global_ids, &global_tys)?);
    }

    let entry = *func_ids
        .get("main")
        .ok_or_else(|| Pos { line: 1, col: 1 }.err("program has no entry function `@main`"))?;
    let main = &functions[entry.0 as usize];
    if main.param_count != 0 || main.ret != Some(TypeId::I32) {
        let pos = raw.fns[entry.0 as usize].pos;
        return Err(pos.err("`@main` must take no parameters and return i32"));
    }

    let mut program = ProgramUnit { types: lw.types, globals, functions, entry, files: lw.files, warnings: Vec::new() };
    program.warnings = unreachable_blocks(&program);
    Ok(program)
}

fn lower_fn(
    lw: &mut Lowering,
    f: &RawFn,
    fi: usize,
    sigs: &[(Vec<TypeId>, Option<TypeId>)],
    func_ids: &HashMap<String, FuncId>,
    global_ids: &HashMap<String, GlobalId>,
    global_tys: &[TypeId],
) -> Result<FunctionDef, ParseError> {
    let mut ctx = FnCtx { regs: Vec::new(), reg_ids: HashMap::new(), globals: global_ids };
    let declare = |ctx: &mut FnCtx, name: &str, ty: TypeId, var: Option<String>, pos: Pos| -> Result<RegId, ParseError> {
        if ctx.reg_ids.contains_key(name) {
            return Err(pos.err(format!("duplicate register `%{name}`")));
        }
        let id = RegId(ctx.regs.len() as u32);
        ctx.regs.push(Register { name: name.to_string(), ty, var });
        ctx.reg_ids.insert(name.to_string(), id);
        Ok(id)
    };
    let (param_tys, ret) = sigs[fi].clone();
    for (p, ty) in f.params.iter().zip(param_tys) {
        declare(&mut ctx, &p.name, ty, p.var.clone(), p.pos)?;
    }
    let src = f.src.as_ref().map(|s| lw.file(s));
    for r in &f.regs {
        let ty = lw.resolve(&r.ty, r.pos)?;
        declare(&mut ctx, &r.name, ty, r.var.clone(), r.pos)?;
    }
    if f.blocks.is_empty() {
        return Err(f.pos.err(format!("function `@{}` has no blocks", f.name)));
    }

    // Registers first written without a declaration take the type implied by
    // their defining instruction.
    for b in &f.blocks {
        for ins in &b.instrs {
            let pos = ins.pos;
            let implied = match &ins.op {
                RawOp::Const { dst, ty, .. } | RawOp::Bin { dst, ty, .. } | RawOp::Load { dst, ty, .. } => {
                    Some((dst, Some(ty.clone())))
                }
                RawOp::ICmp { dst, .. } => Some((dst, Some(RawType::Prim(1)))),
                RawOp::Choose { dst, .. } => Some((dst, Some(RawType::Prim(4)))),
                RawOp::Alloca { dst, .. } | RawOp::Malloc { dst, .. } => {
                    Some((dst, Some(RawType::Ptr(Box::new(RawType::Prim(1))))))
                }
                RawOp::PtrAdd { dst, .. } => Some((dst, None)),
                RawOp::Call { dst: Some(dst), .. } => Some((dst, None)),
                _ => None,
            };
            let Some((dst, ty)) = implied else { continue };
            if ctx.reg_ids.contains_key(dst.as_str()) {
                if let (Some(var), Some(&id)) = (&ins.annots.var, ctx.reg_ids.get(dst.as_str())) {
                    let reg = &mut ctx.regs[id.0 as usize];
                    if reg.var.is_none() {
                        reg.var = Some(var.clone());
                    }
                }
                continue;
            }
            let ty = match (ty, &ins.op) {
                (Some(t), _) => lw.resolve(&t, pos)?,
                (None, RawOp::PtrAdd { ptr, .. }) => match ptr {
                    RawOperand::Reg(n) if ctx.reg_ids.contains_key(n) => ctx.regs[ctx.reg_ids[n].0 as usize].ty,
                    RawOperand::Global(n) if global_ids.contains_key(n) => {
                        let gty = global_tys[global_ids[n].0 as usize];
                        lw.intern(TypeDesc::Ptr { base: gty })
                    }
                    _ => lw.intern(TypeDesc::Ptr { base: TypeId::I8 }),
                },
                (None, RawOp::Call { callee, .. }) => {
                    let cid = func_ids.get(callee).ok_or_else(|| pos.err(format!("unknown function `@{callee}`")))?;
                    sigs[cid.0 as usize]
                        .1
                        .ok_or_else(|| pos.err(format!("`@{callee}` returns no value")))?
                }
                (None, _) => unreachable!(),
            };
            declare(&mut ctx, dst, ty, ins.annots.var.clone(), pos)?;
        }
    }

    let mut block_ids = HashMap::new();
    for (i, b) in f.blocks.iter().enumerate() {
        if block_ids.insert(b.label.clone(), BlockId(i as u32)).is_some() {
            return Err(b.pos.err(format!("duplicate block label `{}`", b.label)));
        }
    }
    let label = |name: &str, pos: Pos| -> Result<BlockId, ParseError> {
        block_ids.get(name).copied().ok_or_else(|| pos.err(format!("unresolved label `{name}`")))
    };

    let mut blocks = Vec::new();
    for b in &f.blocks {
        if b.instrs.is_empty() {
            return Err(b.pos.err(format!("block `{}` is empty", b.label)));
        }
        let mut instrs = Vec::new();
        for (k, ins) in b.instrs.iter().enumerate() {
            let pos = ins.pos;
            let op = lower_op(lw, &ctx, &ins.op, pos, &label, func_ids, sigs, ret)?;
            let is_last = k + 1 == b.instrs.len();
            if op.is_terminator() && !is_last {
                return Err(b.instrs[k + 1].pos.err("instruction after a block terminator"));
            }
            if is_last && !op.is_terminator() {
                return Err(pos.err(format!("block `{}` does not end with a terminator", b.label)));
            }
            let file = match &ins.annots.src {
                Some(s) => Some(lw.file(s)),
                None => src,
            };
            let loc = match (ins.annots.line, file) {
                (Some(line), Some(file)) => Some(SrcLoc { file, line }),
                (Some(_), None) => return Err(pos.err("`!line` used in a function without `!src`")),
                (None, _) => None,
            };
            instrs.push(Instr { op, loc });
        }
        blocks.push(Block { label: b.label.clone(), instrs });
    }

    Ok(FunctionDef {
        name: f.name.clone(),
        param_count: f.params.len() as u32,
        ret,
        src,
        regs: ctx.regs,
        blocks,
    })
}

#[allow(clippy::too_many_arguments)]
fn class_of(lw: &Lowering, ctx: &FnCtx, o: &Operand) -> Class {
    match o {
        Operand::Reg(r) => lw.class_of_type(ctx.regs[r.0 as usize].ty).unwrap_or(Class::Int(None)),
        Operand::Imm(_) => Class::Int(None),
        Operand::Null | Operand::Global(_) => Class::Ptr,
    }
}

fn expect(lw: &Lowering, ctx: &FnCtx, pos: Pos, what: &str, expected: Class, o: &Operand) -> Result<(), ParseError> {
    let actual = class_of(lw, ctx, o);
    if compatible(expected, actual) {
        Ok(())
    } else {
        Err(pos.err(format!("{what}: expected {}, found {}", class_name(expected), class_name(actual))))
    }
}

fn value_class(lw: &Lowering, pos: Pos, ty: TypeId, what: &str) -> Result<Class, ParseError> {
    lw.class_of_type(ty).ok_or_else(|| pos.err(format!("{what}: aggregate types cannot be held in registers")))
}

fn lower_op(
    lw: &mut Lowering,
    ctx: &FnCtx,
    op: &RawOp,
    pos: Pos,
    label: &dyn Fn(&str, Pos) -> Result<BlockId, ParseError>,
    func_ids: &HashMap<String, FuncId>,
    sigs: &[(Vec<TypeId>, Option<TypeId>)],
    ret: Option<TypeId>,
) -> Result<Op, ParseError> {
    let callee = |name: &str| -> Result<FuncId, ParseError> {
        func_ids.get(name).copied().ok_or_else(|| pos.err(format!("unknown function `@{name}`")))
    };

    Ok(match op {
        RawOp::Const { ty, dst, value } => {
            let ty = lw.resolve(ty, pos)?;
            let dst = ctx.reg(dst, pos)?;
            let value = ctx.operand(value, pos)?;
            if matches!(value, Operand::Reg(_)) {
                return Err(pos.err("const: operand must be an immediate, `null` or a global"));
            }
            let c = value_class(lw, pos, ty, "const")?;
            expect(lw, ctx, pos, "const destination", c, &Operand::Reg(dst))?;
            expect(lw, ctx, pos, "const value", c, &value)?;
            Op::Const { ty, dst, value }
        }
        RawOp::Bin { kind, ty, dst, a, b } => {
            let ty = lw.resolve(ty, pos)?;
            let c = value_class(lw, pos, ty, kind.mnemonic())?;
            if c == Class::Ptr {
                return Err(pos.err(format!("{}: pointer arithmetic must use ptradd", kind.mnemonic())));
            }
            let (dst, a, b) = (ctx.reg(dst, pos)?, ctx.operand(a, pos)?, ctx.operand(b, pos)?);
            expect(lw, ctx, pos, "destination", c, &Operand::Reg(dst))?;
            expect(lw, ctx, pos, "first operand", c, &a)?;
            expect(lw, ctx, pos, "second operand", c, &b)?;
            Op::Bin { kind: *kind, ty, dst, a, b }
        }
        RawOp::ICmp { rel, ty, dst, a, b } => {
            let ty = lw.resolve(ty, pos)?;
            let c = value_class(lw, pos, ty, "icmp")?;
            let (dst, a, b) = (ctx.reg(dst, pos)?, ctx.operand(a, pos)?, ctx.operand(b, pos)?);
            expect(lw, ctx, pos, "icmp destination", Class::Int(Some(1)), &Operand::Reg(dst))?;
            expect(lw, ctx, pos, "first operand", c, &a)?;
            expect(lw, ctx, pos, "second operand", c, &b)?;
            Op::ICmp { rel: *rel, ty, dst, a, b }
        }
        RawOp::Alloca { dst, size } => {
            let dst = ctx.reg(dst, pos)?;
            expect(lw, ctx, pos, "alloca destination", Class::Ptr, &Operand::Reg(dst))?;
            Op::Alloca { dst, size: *size }
        }
        RawOp::Malloc { dst, size } => {
            let (dst, size) = (ctx.reg(dst, pos)?, ctx.operand(size, pos)?);
            expect(lw, ctx, pos, "malloc destination", Class::Ptr, &Operand::Reg(dst))?;
            expect(lw, ctx, pos, "malloc size", Class::Int(None), &size)?;
            Op::Malloc { dst, size }
        }
        RawOp::Free { ptr } => {
            let ptr = ctx.operand(ptr, pos)?;
            expect(lw, ctx, pos, "free operand", Class::Ptr, &ptr)?;
            Op::Free { ptr }
        }
        RawOp::Load { ty, dst, ptr, offset } => {
            let ty = lw.resolve(ty, pos)?;
            let c = value_class(lw, pos, ty, "load")?;
            let (dst, ptr) = (ctx.reg(dst, pos)?, ctx.operand(ptr, pos)?);
            expect(lw, ctx, pos, "load destination", c, &Operand::Reg(dst))?;
            expect(lw, ctx, pos, "load address", Class::Ptr, &ptr)?;
            Op::Load { ty, dst, ptr, offset: *offset }
        }
        RawOp::Store { ty, src, ptr, offset } => {
            let ty = lw.resolve(ty, pos)?;
            let c = value_class(lw, pos, ty, "store")?;
            let (src, ptr) = (ctx.operand(src, pos)?, ctx.operand(ptr, pos)?);
            expect(lw, ctx, pos, "stored value", c, &src)?;
            expect(lw, ctx, pos, "store address", Class::Ptr, &ptr)?;
            Op::Store { ty, src, ptr, offset: *offset }
        }
        RawOp::PtrAdd { dst, ptr, index, stride, base } => {
            let (dst, ptr, index) = (ctx.reg(dst, pos)?, ctx.operand(ptr, pos)?, ctx.operand(index, pos)?);
            expect(lw, ctx, pos, "ptradd destination", Class::Ptr, &Operand::Reg(dst))?;
            expect(lw, ctx, pos, "ptradd base pointer", Class::Ptr, &ptr)?;
            expect(lw, ctx, pos, "ptradd index", Class::Int(None), &index)?;
            Op::PtrAdd { dst, ptr, index, stride: *stride, base: *base }
        }
        RawOp::Br { target } => Op::Br { target: label(target, pos)? },
        RawOp::CondBr { cond, then_to, else_to } => {
            let cond = ctx.operand(cond, pos)?;
            expect(lw, ctx, pos, "branch condition", Class::Int(None), &cond)?;
            Op::CondBr { cond, then_to: label(then_to, pos)?, else_to: label(else_to, pos)? }
        }
        RawOp::Call { dst, callee: name, args } => {
            let cid = callee(name)?;
            let (params, cret) = &sigs[cid.0 as usize];
            if params.len() != args.len() {
                return Err(pos.err(format!("`@{name}` takes {} argument(s), {} given", params.len(), args.len())));
            }
            let mut lowered = Vec::new();
            for (a, &pty) in args.iter().zip(params) {
                let a = ctx.operand(a, pos)?;
                expect(lw, ctx, pos, "argument", value_class(lw, pos, pty, "parameter")?, &a)?;
                lowered.push(a);
            }
            let dst = match dst {
                Some(d) => {
                    let d = ctx.reg(d, pos)?;
                    let rty = cret.ok_or_else(|| pos.err(format!("`@{name}` returns no value")))?;
                    expect(lw, ctx, pos, "call destination", value_class(lw, pos, rty, "return")?, &Operand::Reg(d))?;
                    Some(d)
                }
                None => None,
            };
            Op::Call { dst, callee: cid, args: lowered }
        }
        RawOp::Ret { value } => {
            let value = match (value, ret) {
                (None, None) => None,
                (Some((ty, v)), Some(fret)) => {
                    let ty = lw.resolve(ty, pos)?;
                    let c = value_class(lw, pos, ty, "ret")?;
                    if !compatible(value_class(lw, pos, fret, "ret")?, c) {
                        return Err(pos.err("ret: type does not match the function's return type"));
                    }
                    let v = ctx.operand(v, pos)?;
                    expect(lw, ctx, pos, "returned value", c, &v)?;
                    Some((ty, v))
                }
                (None, Some(_)) => return Err(pos.err("ret: missing return value")),
                (Some(_), None) => return Err(pos.err("ret: function returns void")),
            };
            Op::Ret { value }
        }
        RawOp::Choose { dst, total } => {
            if *total < 1 || *total > i64::from(u32::MAX) {
                return Err(pos.err("choose: total must be at least 1"));
            }
            let dst = ctx.reg(dst, pos)?;
            expect(lw, ctx, pos, "choose destination", Class::Int(None), &Operand::Reg(dst))?;
            Op::Choose { dst, total: *total as u32 }
        }
        RawOp::Interrupt => Op::Interrupt,
        RawOp::Spawn { callee: name, args } => {
            let cid = callee(name)?;
            let (params, _) = &sigs[cid.0 as usize];
            if params.len() != args.len() || args.len() > 1 {
                return Err(pos.err(format!("spawn: `@{name}` must take exactly the given argument (at most one)")));
            }
            let arg = match args.first() {
                Some(a) => {
                    let a = ctx.operand(a, pos)?;
                    expect(lw, ctx, pos, "spawn argument", value_class(lw, pos, params[0], "parameter")?, &a)?;
                    Some(a)
                }
                None => None,
            };
            Op::Spawn { callee: cid, arg }
        }
        RawOp::Fault { message } => Op::Fault { message: message.clone() },
    })
}

/// Blocks not reachable from the entry block through branch targets. Falling
/// off a block is impossible since every block ends in a terminator.
fn unreachable_blocks(p: &ProgramUnit) -> Vec<String> {
    let mut warnings = Vec::new();
    for f in &p.functions {
        let mut seen = vec![false; f.blocks.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(b) = queue.pop_front() {
            let succ: Vec<BlockId> = match &f.blocks[b].instrs.last().map(|i| &i.op) {
                Some(Op::Br { target }) => vec![*target],
                Some(Op::CondBr { then_to, else_to, .. }) => vec![*then_to, *else_to],
                _ => vec![],
            };
            for s in succ {
                let s = s.0 as usize;
                if !seen[s] {
                    seen[s] = true;
                    queue.push_back(s);
                }
            }
        }
        for (i, reached) in seen.iter().enumerate() {
            if !reached {
                warnings.push(format!("@{}: block `{}` is unreachable", f.name, f.blocks[i].label));
            }
        }
    }
    warnings
}

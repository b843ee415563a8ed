//! The miniature IR ("MIR"): types, instructions, functions and the
//! debug metadata attached to them.
//!
//! Programs are built by [`parse_program`] and are immutable afterwards.
//! Registers are mutable frame slots (there are no phi nodes); locals that
//! live in memory are obtained through `alloca`.

mod layout;
mod parse;
mod print;

use std::fmt;

pub use layout::{frame_layout, FrameLayout, Slot, FRAME_HEADER_SIZE};
pub use parse::{parse_program, ParseError};

/// Width of a pointer value in bytes.
pub const PTR_SIZE: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypeId(pub u32);

impl TypeId {
    pub const I8: TypeId = TypeId(0);
    pub const I32: TypeId = TypeId(1);
    pub const I64: TypeId = TypeId(2);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FuncId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GlobalId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FileId(pub u32);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Field {
    pub name: String,
    pub offset: u32,
    pub ty: TypeId,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TypeDesc {
    /// Signed integer of 1, 4 or 8 bytes.
    Prim { width: u8 },
    Ptr { base: TypeId },
    Struct { name: String, size: u32, fields: Vec<Field> },
    Array { elem: TypeId, count: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SrcLoc {
    pub file: FileId,
    pub line: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    SDiv,
    And,
    Or,
    Xor,
}

impl BinKind {
    pub fn mnemonic(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::SDiv => "sdiv",
            BinKind::And => "and",
            BinKind::Or => "or",
            BinKind::Xor => "xor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpRel {
    Eq,
    Ne,
    Slt,
    Sle,
    Sgt,
    Sge,
}

impl CmpRel {
    pub fn mnemonic(self) -> &'static str {
        match self {
            CmpRel::Eq => "eq",
            CmpRel::Ne => "ne",
            CmpRel::Slt => "slt",
            CmpRel::Sle => "sle",
            CmpRel::Sgt => "sgt",
            CmpRel::Sge => "sge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    Reg(RegId),
    Imm(i64),
    Null,
    /// Address of a global variable.
    Global(GlobalId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Const { ty: TypeId, dst: RegId, value: Operand },
    Bin { kind: BinKind, ty: TypeId, dst: RegId, a: Operand, b: Operand },
    ICmp { rel: CmpRel, ty: TypeId, dst: RegId, a: Operand, b: Operand },
    Alloca { dst: RegId, size: u32 },
    /// Heap allocation not owned by any frame.
    Malloc { dst: RegId, size: Operand },
    Free { ptr: Operand },
    Load { ty: TypeId, dst: RegId, ptr: Operand, offset: i64 },
    Store { ty: TypeId, src: Operand, ptr: Operand, offset: i64 },
    PtrAdd { dst: RegId, ptr: Operand, index: Operand, stride: i64, base: i64 },
    Br { target: BlockId },
    CondBr { cond: Operand, then_to: BlockId, else_to: BlockId },
    Call { dst: Option<RegId>, callee: FuncId, args: Vec<Operand> },
    Ret { value: Option<(TypeId, Operand)> },
    Choose { dst: RegId, total: u32 },
    Interrupt,
    Spawn { callee: FuncId, arg: Option<Operand> },
    Fault { message: String },
}

impl Op {
    pub fn is_terminator(&self) -> bool {
        matches!(self, Op::Br { .. } | Op::CondBr { .. } | Op::Ret { .. } | Op::Fault { .. })
    }

    /// Register written by this instruction, if any.
    pub fn dst(&self) -> Option<RegId> {
        match self {
            Op::Const { dst, .. }
            | Op::Bin { dst, .. }
            | Op::ICmp { dst, .. }
            | Op::Alloca { dst, .. }
            | Op::Malloc { dst, .. }
            | Op::Load { dst, .. }
            | Op::PtrAdd { dst, .. }
            | Op::Choose { dst, .. } => Some(*dst),
            Op::Call { dst, .. } => *dst,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instr {
    pub op: Op,
    pub loc: Option<SrcLoc>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Register {
    pub name: String,
    pub ty: TypeId,
    /// Source-level variable this register holds.
    pub var: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub instrs: Vec<Instr>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionDef {
    pub name: String,
    /// Parameters occupy the first `param_count` registers.
    pub param_count: u32,
    pub ret: Option<TypeId>,
    pub src: Option<FileId>,
    pub regs: Vec<Register>,
    pub blocks: Vec<Block>,
}

impl FunctionDef {
    pub fn reg(&self, r: RegId) -> &Register {
        &self.regs[r.0 as usize]
    }

    pub fn reg_by_name(&self, name: &str) -> Option<RegId> {
        self.regs.iter().position(|r| r.name == name).map(|i| RegId(i as u32))
    }

    pub fn params(&self) -> impl Iterator<Item = RegId> {
        (0..self.param_count).map(RegId)
    }

    /// Display name of a register: its source variable if known.
    pub fn var_name(&self, r: RegId) -> &str {
        let reg = self.reg(r);
        reg.var.as_deref().unwrap_or(&reg.name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GlobalInit {
    Zero,
    Int(i64),
    Null,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalDef {
    pub name: String,
    pub ty: TypeId,
    pub init: GlobalInit,
    pub var: Option<String>,
    /// Offset within the globals object.
    pub offset: u32,
}

impl GlobalDef {
    pub fn var_name(&self) -> &str {
        self.var.as_deref().unwrap_or(&self.name)
    }
}

/// Location of an instruction. Encoded into frame headers as a pointer into
/// the reserved code namespace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodePtr {
    pub func: FuncId,
    pub block: BlockId,
    pub instr: u32,
}

impl CodePtr {
    /// "No instruction".
    pub const NULL: CodePtr = CodePtr { func: FuncId(u32::MAX), block: BlockId(u32::MAX), instr: u32::MAX };

    pub fn new(func: FuncId, block: u32, instr: u32) -> Self {
        CodePtr { func, block: BlockId(block), instr }
    }

    pub fn entry(func: FuncId) -> Self {
        CodePtr::new(func, 0, 0)
    }

    pub fn is_null(&self) -> bool {
        *self == CodePtr::NULL
    }

    pub fn next(self) -> Self {
        CodePtr { instr: self.instr + 1, ..self }
    }
}

#[derive(Clone, Debug, thiserror::Error, PartialEq, Eq)]
#[error("internal error: {0}")]
pub struct InternalError(pub String);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgramUnit {
    pub types: Vec<TypeDesc>,
    pub globals: Vec<GlobalDef>,
    pub functions: Vec<FunctionDef>,
    pub entry: FuncId,
    pub files: Vec<String>,
    /// Non-fatal validation findings (unreachable blocks).
    pub warnings: Vec<String>,
}

impl ProgramUnit {
    pub fn ty(&self, id: TypeId) -> &TypeDesc {
        &self.types[id.0 as usize]
    }

    pub fn type_size(&self, id: TypeId) -> u32 {
        match self.ty(id) {
            TypeDesc::Prim { width } => u32::from(*width),
            TypeDesc::Ptr { .. } => PTR_SIZE,
            TypeDesc::Struct { size, .. } => *size,
            TypeDesc::Array { elem, count } => self.type_size(*elem).saturating_mul(*count),
        }
    }

    pub fn is_ptr(&self, id: TypeId) -> bool {
        matches!(self.ty(id), TypeDesc::Ptr { .. })
    }

    pub fn type_name(&self, id: TypeId) -> String {
        match self.ty(id) {
            TypeDesc::Prim { width } => format!("i{}", u32::from(*width) * 8),
            TypeDesc::Ptr { base } => format!("ptr {}", self.type_name(*base)),
            TypeDesc::Struct { name, .. } => format!("%{name}"),
            TypeDesc::Array { elem, count } => format!("[{count} x {}]", self.type_name(*elem)),
        }
    }

    pub fn func(&self, id: FuncId) -> &FunctionDef {
        &self.functions[id.0 as usize]
    }

    pub fn func_by_name(&self, name: &str) -> Option<FuncId> {
        self.functions.iter().position(|f| f.name == name).map(|i| FuncId(i as u32))
    }

    pub fn file_name(&self, id: FileId) -> &str {
        &self.files[id.0 as usize]
    }

    pub fn globals_size(&self) -> u32 {
        self.globals
            .iter()
            .map(|g| g.offset + self.type_size(g.ty))
            .max()
            .map_or(0, |end| end.next_multiple_of(8))
    }

    pub fn instr_at(&self, pc: CodePtr) -> Result<&Instr, InternalError> {
        if pc.is_null() {
            return Err(InternalError("null program counter".into()));
        }
        self.functions
            .get(pc.func.0 as usize)
            .and_then(|f| f.blocks.get(pc.block.0 as usize))
            .and_then(|b| b.instrs.get(pc.instr as usize))
            .ok_or_else(|| InternalError(format!("program counter out of range: {pc:?}")))
    }

    /// Source location of `pc`, falling back to the nearest preceding
    /// annotated instruction of the same block chain (in block order).
    pub fn loc_at(&self, pc: CodePtr) -> Option<SrcLoc> {
        let f = self.functions.get(pc.func.0 as usize)?;
        let mut block = pc.block.0 as usize;
        let mut idx = pc.instr as usize;
        loop {
            let instrs = &f.blocks.get(block)?.instrs;
            for i in (0..=idx.min(instrs.len().checked_sub(1)?)).rev() {
                if let Some(loc) = instrs[i].loc {
                    return Some(loc);
                }
            }
            if block == 0 {
                return None;
            }
            block -= 1;
            idx = usize::MAX;
        }
    }

    pub fn describe_pc(&self, pc: CodePtr) -> String {
        if pc.is_null() {
            return "<null>".into();
        }
        match self.functions.get(pc.func.0 as usize) {
            Some(f) => match f.blocks.get(pc.block.0 as usize) {
                Some(b) => format!("{}:{}:{}", f.name, b.label, pc.instr),
                None => format!("{}:?{}:{}", f.name, pc.block.0, pc.instr),
            },
            None => format!("?{}", pc.func.0),
        }
    }

    pub fn describe_loc(&self, loc: SrcLoc) -> String {
        format!("{}:{}", self.file_name(loc.file), loc.line)
    }
}

impl fmt::Display for ProgramUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        print::write_program(self, f)
    }
}

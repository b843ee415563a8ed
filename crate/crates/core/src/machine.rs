//! Deterministic evaluator for MIR programs.
//!
//! All guest state lives in the heap: a root state object points at the
//! globals object and at a thread table, each thread table word points at
//! the top activation frame of that thread, and frames point at their
//! parents. A frame is an ordinary heap object: a 16-byte header (program
//! counter, parent frame) followed by one slot per register.
//!
//! The program counter is stored as a pointer into a reserved code
//! namespace: object id `CODE_BASE + function index`, offset
//! `(block << 16) | instruction`.
//!
//! Nondeterminism comes from exactly one place, the [`Chooser`]: it answers
//! `choose` instructions and picks the next thread at interrupt points.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::heap::{HeapState, MemFault, ObjId, PtrVal, SnapshotRef, StateDigest, Value};
use crate::mir::{
    frame_layout, BinKind, CmpRel, CodePtr, FrameLayout, FuncId, GlobalInit, InternalError, Op, Operand, ProgramUnit,
    RegId, SrcLoc, TypeDesc,
};

/// Default bound on instructions executed by [`MachineState::run_until_state`].
pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;

/// Size of the root state object: globals pointer, thread table pointer.
const ROOT_SIZE: u32 = 16;

pub fn encode_pc(pc: CodePtr) -> PtrVal {
    if pc.is_null() {
        return PtrVal::NULL;
    }
    PtrVal::new(ObjId(ObjId::CODE_BASE + pc.func.0), (pc.block.0 << 16) | pc.instr)
}

pub fn decode_pc(p: PtrVal) -> Option<CodePtr> {
    if !p.obj.is_code() {
        return None;
    }
    Some(CodePtr::new(FuncId(p.obj.0 - ObjId::CODE_BASE), p.offset >> 16, p.offset & 0xffff))
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum FaultReason {
    Memory(MemFault),
    DivByZero,
    /// A `fault` instruction.
    Explicit(String),
}

impl fmt::Display for FaultReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultReason::Memory(m) => write!(f, "{m}"),
            FaultReason::DivByZero => f.write_str("div-by-zero"),
            FaultReason::Explicit(msg) => write!(f, "explicit: {msg}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Status {
    Running,
    /// Stopped at a scheduling point with this many runnable threads.
    AtInterrupt { runnable: u32 },
    Faulted { reason: FaultReason, at: CodePtr },
    Finished { exit: i64 },
}

impl Status {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Status::Faulted { .. } | Status::Finished { .. })
    }

    /// A point where a state is recorded.
    pub fn is_boundary(&self) -> bool {
        !matches!(self, Status::Running)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Running => f.write_str("running"),
            Status::AtInterrupt { runnable } => write!(f, "at-interrupt({runnable})"),
            Status::Faulted { reason, .. } => write!(f, "faulted({reason})"),
            Status::Finished { exit } => write!(f, "finished({exit})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChoiceKind {
    /// A `choose` instruction.
    Choose,
    /// Thread selection at an interrupt point.
    Thread,
}

impl fmt::Display for ChoiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChoiceKind::Choose => "choose",
            ChoiceKind::Thread => "thread",
        })
    }
}

/// One resolved nondeterministic choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Choice {
    pub taken: u32,
    pub total: u32,
}

/// Source of answers for nondeterministic choices. Only consulted when
/// `total >= 2`. Returning `None` leaves the machine untouched and makes the
/// step report [`MachineError::ChoicePending`].
pub trait Chooser {
    fn choose(&mut self, total: u32, kind: ChoiceKind) -> Option<u32>;
}

impl<F: FnMut(u32, ChoiceKind) -> Option<u32>> Chooser for F {
    fn choose(&mut self, total: u32, kind: ChoiceKind) -> Option<u32> {
        self(total, kind)
    }
}

/// Answers from a fixed list, then nothing.
#[derive(Clone, Debug, Default)]
pub struct ScriptedChooser {
    answers: std::collections::VecDeque<u32>,
}

impl ScriptedChooser {
    pub fn new(answers: impl IntoIterator<Item = u32>) -> Self {
        ScriptedChooser { answers: answers.into_iter().collect() }
    }
}

impl Chooser for ScriptedChooser {
    fn choose(&mut self, _total: u32, _kind: ChoiceKind) -> Option<u32> {
        self.answers.pop_front()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MachineError {
    #[error("program {0}")]
    Terminal(Status),
    #[error("a {kind} choice among {total} is pending")]
    ChoicePending { total: u32, kind: ChoiceKind },
    #[error("chooser answered {taken} for a choice among {total}")]
    ChooserOutOfRange { taken: u32, total: u32 },
    #[error(transparent)]
    Internal(#[from] InternalError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepEvent {
    /// Instruction executed, if any (resolving a schedule alone executes none).
    pub executed: Option<CodePtr>,
    pub loc: Option<SrcLoc>,
    pub choice: Option<Choice>,
    pub status: Status,
    pub messages: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunEnd {
    /// Status became at-interrupt, faulted or finished.
    Boundary,
    BudgetExhausted,
    ChoicePending { total: u32, kind: ChoiceKind },
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub events: Vec<StepEvent>,
    pub end: RunEnd,
}

/// Everything needed to resume a machine: a heap snapshot plus the state
/// kept outside guest memory.
#[derive(Clone, Debug)]
pub struct MachineSnapshot {
    pub heap: SnapshotRef,
    pub active: u32,
    pub status: Status,
    owned: BTreeMap<ObjId, Vec<ObjId>>,
}

impl MachineSnapshot {
    /// Canonical digest of the heap.
    pub fn digest(&self) -> StateDigest {
        self.heap.canonical_digest()
    }

    /// Identity of the full machine state, used for deduplication: the heap
    /// digest, the status and the frame-owned objects under canonical ids.
    pub fn state_key(&self) -> StateDigest {
        let canon = self.heap.canonical_ids();
        let mut h = Sha256::new();
        h.update(self.digest().0);
        h.update(self.status.to_string().as_bytes());
        if self.status == Status::Running {
            h.update(self.active.to_le_bytes());
        }
        let mut owned: Vec<(u64, Vec<u64>)> = self
            .owned
            .iter()
            .filter_map(|(frame, objs)| {
                let f = *canon.get(frame)?;
                let mut v: Vec<u64> = objs.iter().filter_map(|o| canon.get(o).copied()).collect();
                v.sort_unstable();
                Some((f, v))
            })
            .collect();
        owned.sort();
        for (f, objs) in owned {
            h.update(f.to_le_bytes());
            h.update((objs.len() as u64).to_le_bytes());
            for o in objs {
                h.update(o.to_le_bytes());
            }
        }
        StateDigest(h.finalize().into())
    }
}

#[derive(Clone, Debug)]
pub struct MachineState {
    program: Arc<ProgramUnit>,
    layouts: Arc<Vec<FrameLayout>>,
    heap: HeapState,
    root: PtrVal,
    active: u32,
    /// Objects allocated by `alloca`, per frame. Every live frame has an entry.
    owned: BTreeMap<ObjId, Vec<ObjId>>,
    status: Status,
}

fn sext(v: i64, width: u32) -> i64 {
    match width {
        1 => v as i8 as i64,
        4 => v as i32 as i64,
        _ => v,
    }
}

fn fault(reason: MemFault) -> FaultReason {
    FaultReason::Memory(reason)
}

impl MachineState {
    /// Sets up globals, a single thread and the entry frame.
    pub fn boot(program: Arc<ProgramUnit>) -> Self {
        let layouts: Vec<FrameLayout> = program.functions.iter().map(|f| frame_layout(&program, f)).collect();
        let mut heap = HeapState::new();
        let root = heap.alloc(ROOT_SIZE);
        let globals = heap.alloc(program.globals_size());
        for g in &program.globals {
            let at = globals.with_offset(g.offset);
            let r = match (&g.init, program.ty(g.ty)) {
                (GlobalInit::Int(v), TypeDesc::Prim { width }) => heap.store(at, u32::from(*width), Value::Int(*v)),
                (GlobalInit::Null, _) => heap.store(at, 8, Value::Ptr(PtrVal::NULL)),
                _ => Ok(()),
            };
            r.expect("globals object sized from the program");
        }
        let table = heap.alloc(8);
        let entry = program.entry;
        let frame = heap.alloc(layouts[entry.0 as usize].size);
        heap.store(frame, 8, Value::Ptr(encode_pc(CodePtr::entry(entry)))).unwrap();
        heap.store(frame.with_offset(8), 8, Value::Ptr(PtrVal::NULL)).unwrap();
        heap.store(table, 8, Value::Ptr(frame)).unwrap();
        heap.store(root, 8, Value::Ptr(globals)).unwrap();
        heap.store(root.with_offset(8), 8, Value::Ptr(table)).unwrap();
        let owned = BTreeMap::from([(frame.obj, Vec::new())]);
        MachineState {
            program,
            layouts: Arc::new(layouts),
            heap,
            root,
            active: 0,
            owned,
            status: Status::Running,
        }
    }

    pub fn capture(&self) -> MachineSnapshot {
        MachineSnapshot {
            heap: self.heap.snapshot(self.root),
            active: self.active,
            status: self.status.clone(),
            owned: self.owned.clone(),
        }
    }

    pub fn restore(program: Arc<ProgramUnit>, s: &MachineSnapshot) -> Self {
        let layouts: Vec<FrameLayout> = program.functions.iter().map(|f| frame_layout(&program, f)).collect();
        MachineState {
            program,
            layouts: Arc::new(layouts),
            heap: HeapState::restore(&s.heap),
            root: s.heap.root(),
            active: s.active,
            owned: s.owned.clone(),
            status: s.status.clone(),
        }
    }

    /// Rewinds this machine in place, keeping its program.
    pub fn reset_to(&mut self, s: &MachineSnapshot) {
        self.heap = HeapState::restore(&s.heap);
        self.root = s.heap.root();
        self.active = s.active;
        self.owned = s.owned.clone();
        self.status = s.status.clone();
    }

    pub fn program(&self) -> &Arc<ProgramUnit> {
        &self.program
    }

    pub fn heap(&self) -> &HeapState {
        &self.heap
    }

    pub fn root(&self) -> PtrVal {
        self.root
    }

    pub fn status(&self) -> &Status {
        &self.status
    }

    pub fn active_thread(&self) -> u32 {
        self.active
    }

    pub fn layout(&self, f: FuncId) -> &FrameLayout {
        &self.layouts[f.0 as usize]
    }

    pub fn digest(&self) -> StateDigest {
        self.heap.snapshot(self.root).canonical_digest()
    }

    /// Frame objects that are live, with the objects they own.
    pub fn owned_objects(&self) -> &BTreeMap<ObjId, Vec<ObjId>> {
        &self.owned
    }

    fn word(&self, p: PtrVal) -> PtrVal {
        match self.heap.load(p, 8) {
            Ok(Value::Ptr(q)) => q,
            _ => PtrVal::NULL,
        }
    }

    pub fn globals_ptr(&self) -> PtrVal {
        self.word(self.root)
    }

    fn table(&self) -> PtrVal {
        self.word(self.root.with_offset(8))
    }

    pub fn thread_count(&self) -> u32 {
        self.heap.object(self.table().obj).map_or(0, |o| o.size() / 8)
    }

    pub fn thread_top(&self, thread: u32) -> PtrVal {
        self.word(self.table().with_offset(thread * 8))
    }

    pub fn runnable_threads(&self) -> Vec<u32> {
        (0..self.thread_count()).filter(|t| !self.thread_top(*t).is_null()).collect()
    }

    pub fn frame_pc(&self, frame: PtrVal) -> Option<CodePtr> {
        match self.heap.load(frame, 8) {
            Ok(Value::Ptr(p)) => decode_pc(p),
            _ => None,
        }
    }

    pub fn frame_parent(&self, frame: PtrVal) -> PtrVal {
        self.word(frame.with_offset(8))
    }

    /// Program counter of the active thread's top frame.
    pub fn current_pc(&self) -> Option<CodePtr> {
        let top = self.thread_top(self.active);
        if top.is_null() {
            return None;
        }
        self.frame_pc(top)
    }

    /// Frames of a thread, innermost first. Stops at a cycle or a broken link.
    pub fn frames(&self, thread: u32) -> Vec<PtrVal> {
        let mut out = Vec::new();
        let mut f = self.thread_top(thread);
        while !f.is_null() && self.heap.is_live(f.obj) && !out.contains(&f) {
            out.push(f);
            f = self.frame_parent(f);
        }
        out
    }

    pub fn read_reg(&self, frame: PtrVal, func: FuncId, reg: RegId) -> Value {
        let slot = self.layouts[func.0 as usize].slot(reg);
        let width = self.program.type_size(slot.ty);
        self.heap.load(frame.with_offset(slot.offset), width).unwrap_or(Value::Int(0))
    }

    fn write_reg(&mut self, frame: PtrVal, func: FuncId, reg: RegId, v: Value) -> Result<(), InternalError> {
        let slot = self.layouts[func.0 as usize].slot(reg);
        let width = self.program.type_size(slot.ty);
        let v = match v {
            Value::Ptr(_) if width != 8 => Value::Int(v.as_int()),
            other => other,
        };
        self.heap
            .store(frame.with_offset(slot.offset), width, v)
            .map_err(|e| InternalError(format!("register write failed: {e}")))
    }

    fn set_pc(&mut self, frame: PtrVal, pc: CodePtr) -> Result<(), InternalError> {
        self.heap
            .store(frame, 8, Value::Ptr(encode_pc(pc)))
            .map_err(|e| InternalError(format!("frame header write failed: {e}")))
    }

    fn set_thread_top(&mut self, thread: u32, frame: PtrVal) {
        let at = self.table().with_offset(thread * 8);
        self.heap.store(at, 8, Value::Ptr(frame)).expect("thread table covers all threads");
    }

    fn eval(&self, frame: PtrVal, func: FuncId, o: &Operand) -> Value {
        match o {
            Operand::Reg(r) => self.read_reg(frame, func, *r),
            Operand::Imm(v) => Value::Int(*v),
            Operand::Null => Value::Ptr(PtrVal::NULL),
            Operand::Global(g) => {
                let off = self.program.globals[g.0 as usize].offset;
                Value::Ptr(self.globals_ptr().with_offset(off))
            }
        }
    }

    fn address(base: Value, offset: i64) -> Result<PtrVal, FaultReason> {
        match base {
            Value::Ptr(p) if p.is_null() => Err(fault(MemFault::NullDeref)),
            Value::Ptr(p) => {
                let off = i64::from(p.offset) + offset;
                let off = u32::try_from(off).map_err(|_| fault(MemFault::OutOfBounds))?;
                Ok(p.with_offset(off))
            }
            Value::Int(0) => Err(fault(MemFault::NullDeref)),
            Value::Int(_) => Err(fault(MemFault::InvalidPointer)),
        }
    }

    /// Only `malloc` objects may be freed: not globals, frames or allocas.
    fn freeable(&self, obj: ObjId) -> bool {
        obj != self.globals_ptr().obj
            && !self.owned.contains_key(&obj)
            && !self.owned.values().any(|v| v.contains(&obj))
    }

    fn allocate_frame(&mut self, callee: FuncId, parent: PtrVal, args: &[Value]) -> Result<PtrVal, InternalError> {
        let size = self.layouts[callee.0 as usize].size;
        let frame = self.heap.alloc(size);
        self.set_pc(frame, CodePtr::entry(callee))?;
        self.heap
            .store(frame.with_offset(8), 8, Value::Ptr(parent))
            .map_err(|e| InternalError(e.to_string()))?;
        for (i, v) in args.iter().enumerate() {
            self.write_reg(frame, callee, RegId(i as u32), *v)?;
        }
        self.owned.insert(frame.obj, Vec::new());
        Ok(frame)
    }

    fn ask(c: &mut dyn Chooser, total: u32, kind: ChoiceKind) -> Result<Choice, MachineError> {
        let taken = c.choose(total, kind).ok_or(MachineError::ChoicePending { total, kind })?;
        if taken >= total {
            return Err(MachineError::ChooserOutOfRange { taken, total });
        }
        Ok(Choice { taken, total })
    }

    /// Picks the thread to continue after an interrupt point. Runnable
    /// threads are enumerated by ascending index.
    pub fn resolve_interrupt(&mut self, c: &mut dyn Chooser) -> Result<StepEvent, MachineError> {
        let Status::AtInterrupt { .. } = self.status else {
            return Err(InternalError(format!("resolve_interrupt while {}", self.status)).into());
        };
        let runnable = self.runnable_threads();
        let k = runnable.len() as u32;
        if k == 0 {
            return Err(InternalError("interrupt point with no runnable thread".into()).into());
        }
        let choice = if k >= 2 { Some(Self::ask(c, k, ChoiceKind::Thread)?) } else { None };
        let next = runnable[choice.map_or(0, |c| c.taken) as usize];
        let mut messages = Vec::new();
        if next != self.active {
            messages.push(format!("switched to thread {next}"));
        }
        self.active = next;
        self.status = Status::Running;
        Ok(StepEvent { executed: None, loc: None, choice, status: Status::Running, messages })
    }

    /// Executes one instruction of the active thread, resolving a pending
    /// interrupt point first. If resolving the schedule consumed a choice and
    /// the next instruction would consume another, the step ends after the
    /// resolution so that a step never consumes two choices.
    pub fn step_instr(&mut self, c: &mut dyn Chooser) -> Result<StepEvent, MachineError> {
        if self.status.is_terminal() {
            return Err(MachineError::Terminal(self.status.clone()));
        }
        let mut pre = None;
        if let Status::AtInterrupt { .. } = self.status {
            // Check that the scheduling answer is available before mutating.
            let ev = self.resolve_interrupt(c)?;
            if ev.choice.is_some() {
                let pc = self.current_pc();
                let next_chooses = pc
                    .and_then(|pc| self.program.instr_at(pc).ok())
                    .is_some_and(|i| matches!(i.op, Op::Choose { total, .. } if total >= 2));
                if next_chooses {
                    return Ok(ev);
                }
            }
            pre = Some(ev);
        }
        match self.execute(c) {
            Ok(mut ev) => {
                if let Some(pre) = pre {
                    ev.choice = ev.choice.or(pre.choice);
                    let mut messages = pre.messages;
                    messages.append(&mut ev.messages);
                    ev.messages = messages;
                }
                Ok(ev)
            }
            Err(e) => Err(e),
        }
    }

    fn execute(&mut self, c: &mut dyn Chooser) -> Result<StepEvent, MachineError> {
        let frame = self.thread_top(self.active);
        if frame.is_null() {
            return Err(InternalError(format!("active thread {} has no frame", self.active)).into());
        }
        let pc = self.frame_pc(frame).ok_or_else(|| InternalError("corrupt program counter".into()))?;
        let program = Arc::clone(&self.program);
        let instr = program.instr_at(pc)?;
        let func = pc.func;
        let mut choice = None;
        let mut messages = Vec::new();

        let result: Result<(), FaultReason> = match &instr.op {
            Op::Const { dst, value, .. } => {
                let v = self.eval(frame, func, value);
                self.write_reg(frame, func, *dst, v)?;
                self.set_pc(frame, pc.next())?;
                Ok(())
            }
            Op::Bin { kind, ty, dst, a, b } => {
                let w = program.type_size(*ty);
                let a = sext(self.eval(frame, func, a).as_int(), w);
                let b = sext(self.eval(frame, func, b).as_int(), w);
                let r = match kind {
                    BinKind::Add => Some(a.wrapping_add(b)),
                    BinKind::Sub => Some(a.wrapping_sub(b)),
                    BinKind::Mul => Some(a.wrapping_mul(b)),
                    BinKind::SDiv => (b != 0).then(|| a.wrapping_div(b)),
                    BinKind::And => Some(a & b),
                    BinKind::Or => Some(a | b),
                    BinKind::Xor => Some(a ^ b),
                };
                match r {
                    Some(r) => {
                        self.write_reg(frame, func, *dst, Value::Int(sext(r, w)))?;
                        self.set_pc(frame, pc.next())?;
                        Ok(())
                    }
                    None => Err(FaultReason::DivByZero),
                }
            }
            Op::ICmp { rel, ty, dst, a, b } => {
                let w = program.type_size(*ty);
                let (a, b) = (self.eval(frame, func, a), self.eval(frame, func, b));
                let ord = match (a, b) {
                    (Value::Ptr(p), Value::Ptr(q)) => p.cmp(&q),
                    _ => sext(a.as_int(), w).cmp(&sext(b.as_int(), w)),
                };
                let holds = match rel {
                    CmpRel::Eq => ord.is_eq(),
                    CmpRel::Ne => ord.is_ne(),
                    CmpRel::Slt => ord.is_lt(),
                    CmpRel::Sle => ord.is_le(),
                    CmpRel::Sgt => ord.is_gt(),
                    CmpRel::Sge => ord.is_ge(),
                };
                self.write_reg(frame, func, *dst, Value::Int(i64::from(holds)))?;
                self.set_pc(frame, pc.next())?;
                Ok(())
            }
            Op::Alloca { dst, size } => {
                let p = self.heap.alloc(*size);
                self.owned.entry(frame.obj).or_default().push(p.obj);
                self.write_reg(frame, func, *dst, Value::Ptr(p))?;
                self.set_pc(frame, pc.next())?;
                Ok(())
            }
            Op::Malloc { dst, size } => match u32::try_from(self.eval(frame, func, size).as_int()) {
                Ok(size) => {
                    let p = self.heap.alloc(size);
                    self.write_reg(frame, func, *dst, Value::Ptr(p))?;
                    self.set_pc(frame, pc.next())?;
                    Ok(())
                }
                Err(_) => Err(fault(MemFault::OutOfBounds)),
            },
            Op::Free { ptr } => match self.eval(frame, func, ptr) {
                Value::Ptr(p) if self.freeable(p.obj) => {
                    match self.heap.free(p) {
                        Ok(()) => {
                            self.set_pc(frame, pc.next())?;
                            Ok(())
                        }
                        Err(e) => Err(fault(e)),
                    }
                }
                _ => Err(fault(MemFault::InvalidFree)),
            },
            Op::Load { ty, dst, ptr, offset } => {
                let w = program.type_size(*ty);
                match Self::address(self.eval(frame, func, ptr), *offset)
                    .and_then(|at| self.heap.load(at, w).map_err(fault))
                {
                    Ok(v) => {
                        self.write_reg(frame, func, *dst, v)?;
                        self.set_pc(frame, pc.next())?;
                        Ok(())
                    }
                    Err(e) => Err(e),
                }
            }
            Op::Store { ty, src, ptr, offset } => {
                let w = program.type_size(*ty);
                let v = self.eval(frame, func, src);
                match Self::address(self.eval(frame, func, ptr), *offset)
                    .and_then(|at| self.heap.store(at, w, v).map_err(fault))
                {
                    Ok(()) => {
                        self.set_pc(frame, pc.next())?;
                        Ok(())
                    }
                    Err(e) => Err(e),
                }
            }
            Op::PtrAdd { dst, ptr, index, stride, base } => {
                let delta = self
                    .eval(frame, func, index)
                    .as_int()
                    .wrapping_mul(*stride)
                    .wrapping_add(*base);
                let v = match self.eval(frame, func, ptr) {
                    Value::Ptr(p) if p.is_null() => Value::Ptr(p),
                    Value::Ptr(p) => Value::Ptr(p.with_offset((i64::from(p.offset).wrapping_add(delta)) as u32)),
                    Value::Int(x) => Value::Int(x.wrapping_add(delta)),
                };
                self.write_reg(frame, func, *dst, v)?;
                self.set_pc(frame, pc.next())?;
                Ok(())
            }
            Op::Br { target } => {
                self.set_pc(frame, CodePtr::new(func, target.0, 0))?;
                Ok(())
            }
            Op::CondBr { cond, then_to, else_to } => {
                let taken = if self.eval(frame, func, cond).as_int() != 0 { then_to } else { else_to };
                self.set_pc(frame, CodePtr::new(func, taken.0, 0))?;
                Ok(())
            }
            Op::Call { callee, args, .. } => {
                let args: Vec<Value> = args.iter().map(|a| self.eval(frame, func, a)).collect();
                let callee_frame = self.allocate_frame(*callee, frame, &args)?;
                self.set_thread_top(self.active, callee_frame);
                Ok(())
            }
            Op::Ret { value } => {
                let v = value.as_ref().map(|(_, v)| self.eval(frame, func, v));
                self.pop_frame(frame, v, &mut messages)?;
                Ok(())
            }
            Op::Choose { dst, total } => {
                let taken = if *total >= 2 {
                    let ch = Self::ask(c, *total, ChoiceKind::Choose)?;
                    choice = Some(ch);
                    ch.taken
                } else {
                    0
                };
                self.write_reg(frame, func, *dst, Value::Int(i64::from(taken)))?;
                self.set_pc(frame, pc.next())?;
                Ok(())
            }
            Op::Interrupt => {
                self.set_pc(frame, pc.next())?;
                self.status = Status::AtInterrupt { runnable: self.runnable_threads().len() as u32 };
                Ok(())
            }
            Op::Spawn { callee, arg } => {
                let args: Vec<Value> = arg.iter().map(|a| self.eval(frame, func, a)).collect();
                let new_frame = self.allocate_frame(*callee, PtrVal::NULL, &args)?;
                let n = self.thread_count();
                let old = self.table();
                let table = self.heap.alloc((n + 1) * 8);
                for t in 0..n {
                    let top = self.thread_top(t);
                    self.heap.store(table.with_offset(t * 8), 8, Value::Ptr(top)).unwrap();
                }
                self.heap.store(table.with_offset(n * 8), 8, Value::Ptr(new_frame)).unwrap();
                self.heap.store(self.root.with_offset(8), 8, Value::Ptr(table)).unwrap();
                self.heap.free(old).map_err(|e| InternalError(format!("thread table: {e}")))?;
                self.set_pc(frame, pc.next())?;
                messages.push(format!("spawned thread {n} running @{}", program.func(*callee).name));
                Ok(())
            }
            Op::Fault { message } => Err(FaultReason::Explicit(message.clone())),
        };
        if let Err(reason) = result {
            self.status = Status::Faulted { reason, at: pc };
        }
        Ok(StepEvent { executed: Some(pc), loc: instr.loc, choice, status: self.status.clone(), messages })
    }

    fn pop_frame(&mut self, frame: PtrVal, value: Option<Value>, messages: &mut Vec<String>) -> Result<(), InternalError> {
        for obj in self.owned.remove(&frame.obj).unwrap_or_default() {
            if self.heap.is_live(obj) {
                let _ = self.heap.free(PtrVal::new(obj, 0));
            }
        }
        let parent = self.frame_parent(frame);
        self.heap.free(frame).map_err(|e| InternalError(format!("frame free failed: {e}")))?;
        if parent.is_null() {
            let thread = self.active;
            self.set_thread_top(thread, PtrVal::NULL);
            let exit = value.map_or(0, Value::as_int);
            if thread == 0 {
                self.status = Status::Finished { exit };
            } else {
                messages.push(format!("thread {thread} exited"));
                let runnable = self.runnable_threads().len() as u32;
                self.status =
                    if runnable == 0 { Status::Finished { exit: 0 } } else { Status::AtInterrupt { runnable } };
            }
            return Ok(());
        }
        let caller_pc = self.frame_pc(parent).ok_or_else(|| InternalError("corrupt caller frame".into()))?;
        let program = Arc::clone(&self.program);
        if let Op::Call { dst: Some(dst), .. } = &program.instr_at(caller_pc)?.op {
            if let Some(v) = value {
                self.write_reg(parent, caller_pc.func, *dst, v)?;
            }
        }
        self.set_pc(parent, caller_pc.next())?;
        self.set_thread_top(self.active, parent);
        Ok(())
    }

    /// Steps until the next state boundary (interrupt point, fault or
    /// termination), the budget runs out, or a choice cannot be answered.
    pub fn run_until_state(&mut self, c: &mut dyn Chooser, budget: u64) -> Result<RunOutcome, MachineError> {
        if self.status.is_terminal() {
            return Err(MachineError::Terminal(self.status.clone()));
        }
        let mut events = Vec::new();
        let mut steps = 0u64;
        loop {
            if steps >= budget {
                return Ok(RunOutcome { events, end: RunEnd::BudgetExhausted });
            }
            match self.step_instr(c) {
                Ok(ev) => {
                    steps += u64::from(ev.executed.is_some());
                    let boundary = ev.status.is_boundary();
                    events.push(ev);
                    if boundary {
                        return Ok(RunOutcome { events, end: RunEnd::Boundary });
                    }
                }
                Err(MachineError::ChoicePending { total, kind }) => {
                    return Ok(RunOutcome { events, end: RunEnd::ChoicePending { total, kind } })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::parse_program;

    fn boot(src: &str) -> MachineState {
        MachineState::boot(Arc::new(parse_program(src).unwrap_or_else(|e| panic!("{e}"))))
    }

    fn never() -> impl Chooser {
        |_: u32, _: ChoiceKind| -> Option<u32> { panic!("no choice expected") }
    }

    fn run(m: &mut MachineState, c: &mut dyn Chooser) -> Status {
        while !m.status().is_terminal() {
            m.step_instr(c).unwrap();
        }
        m.status().clone()
    }

    fn reg(m: &MachineState, name: &str) -> Value {
        let frame = m.thread_top(m.active_thread());
        let func = m.frame_pc(frame).unwrap().func;
        let r = m.program().func(func).reg_by_name(name).unwrap();
        m.read_reg(frame, func, r)
    }

    #[test]
    fn pc_encoding_round_trips() {
        let pc = CodePtr::new(FuncId(3), 7, 12);
        assert_eq!(decode_pc(encode_pc(pc)), Some(pc));
        assert_eq!(encode_pc(CodePtr::NULL), PtrVal::NULL);
        assert_eq!(decode_pc(PtrVal::NULL), None);
    }

    #[test]
    fn boot_layout() {
        let m = boot("global @g : i32 = 42 fn @main() -> i32 { entry: ret i32 0 }");
        assert_eq!(m.thread_count(), 1);
        let frame = m.thread_top(0);
        assert_eq!(m.frame_pc(frame), Some(CodePtr::entry(m.program().entry)));
        assert!(m.frame_parent(frame).is_null());
        let g = m.globals_ptr();
        assert_eq!(m.heap().load(g, 4), Ok(Value::Int(42)));
        assert_eq!(m.status(), &Status::Running);
    }

    #[test]
    fn arithmetic() {
        let mut m = boot(
            "fn @main() -> i32 { entry:
               const i32 %a, 2
               const i32 %b, 3
               add i32 %r, %a, %b
               ret i32 %r }",
        );
        for _ in 0..3 {
            m.step_instr(&mut never()).unwrap();
        }
        assert_eq!(reg(&m, "r"), Value::Int(5));
        assert_eq!(run(&mut m, &mut never()), Status::Finished { exit: 5 });
    }

    #[test]
    fn narrow_arithmetic_wraps() {
        let mut m = boot(
            "fn @main() -> i32 { entry:
               const i8 %a, 127
               add i8 %a, %a, 1
               icmp slt i8 %neg, %a, 0
               const i32 %big, 2147483647
               mul i32 %big, %big, 2
               ret i32 %big }",
        );
        for _ in 0..3 {
            m.step_instr(&mut never()).unwrap();
        }
        assert_eq!(reg(&m, "a"), Value::Int(-128));
        assert_eq!(reg(&m, "neg"), Value::Int(1));
        assert_eq!(run(&mut m, &mut never()), Status::Finished { exit: -2 });
    }

    #[test]
    fn div_by_zero_faults_without_touching_memory() {
        let mut m = boot(
            "fn @main() -> i32 { entry:
               const i32 %a, 1
               sdiv i32 %r, %a, 0
               ret i32 %r }",
        );
        m.step_instr(&mut never()).unwrap();
        let before = m.digest();
        let ev = m.step_instr(&mut never()).unwrap();
        assert!(matches!(ev.status, Status::Faulted { reason: FaultReason::DivByZero, .. }));
        assert_eq!(m.digest(), before);
        assert!(matches!(m.step_instr(&mut never()), Err(MachineError::Terminal(_))));
    }

    #[test]
    fn choose_consults_chooser() {
        let mut m = boot("fn @main() -> i32 { entry: choose %r, 3 choose %s, 1 ret i32 %r }");
        let ev = m.step_instr(&mut ScriptedChooser::new([2])).unwrap();
        assert_eq!(ev.choice, Some(Choice { taken: 2, total: 3 }));
        assert_eq!(reg(&m, "r"), Value::Int(2));
        let ev = m.step_instr(&mut never()).unwrap();
        assert_eq!(ev.choice, None);
        assert_eq!(reg(&m, "s"), Value::Int(0));
    }

    #[test]
    fn pending_choice_leaves_state_untouched() {
        let mut m = boot("fn @main() -> i32 { entry: choose %r, 3 ret i32 %r }");
        let d = m.digest();
        let err = m.step_instr(&mut ScriptedChooser::default()).unwrap_err();
        assert_eq!(err, MachineError::ChoicePending { total: 3, kind: ChoiceKind::Choose });
        assert_eq!(m.digest(), d);
        let err = m.step_instr(&mut ScriptedChooser::new([3])).unwrap_err();
        assert_eq!(err, MachineError::ChooserOutOfRange { taken: 3, total: 3 });
    }

    const FIB: &str = "
        fn @fib(%n: i32) -> i32 {
        entry:
          icmp slt i32 %small, %n, 2
          condbr %small, base, rec
        base:
          ret i32 %n
        rec:
          sub i32 %a, %n, 1
          call %x, @fib(%a)
          sub i32 %b, %n, 2
          call %y, @fib(%b)
          add i32 %r, %x, %y
          ret i32 %r
        }
        fn @main() -> i32 { entry: call %v, @fib(5) ret i32 %v }";

    #[test]
    fn recursive_fib() {
        let mut m = boot(FIB);
        assert_eq!(run(&mut m, &mut never()), Status::Finished { exit: 5 });
        // Only the globals, root and thread table remain.
        assert_eq!(m.heap().live_count(), 3);
    }

    #[test]
    fn frame_discipline_holds_at_every_step() {
        let mut m = boot(FIB);
        while !m.status().is_terminal() {
            let chain: std::collections::BTreeSet<ObjId> =
                (0..m.thread_count()).flat_map(|t| m.frames(t)).map(|f| f.obj).collect();
            let owned: std::collections::BTreeSet<ObjId> = m.owned_objects().keys().copied().collect();
            assert_eq!(chain, owned);
            m.step_instr(&mut never()).unwrap();
        }
    }

    #[test]
    fn allocas_are_freed_on_return() {
        let mut m = boot(
            "fn @f() -> i32 { entry: alloca %a, 8 alloca %b, 16 ret i32 0 }
             fn @main() -> i32 { entry: call %x, @f() ret i32 %x }",
        );
        let live_before = m.heap().live_count();
        m.step_instr(&mut never()).unwrap(); // call
        m.step_instr(&mut never()).unwrap();
        m.step_instr(&mut never()).unwrap();
        assert_eq!(m.heap().live_count(), live_before + 3);
        m.step_instr(&mut never()).unwrap(); // ret
        assert_eq!(m.heap().live_count(), live_before);
    }

    #[test]
    fn interrupt_scheduling() {
        let src = "
            fn @w() -> void { entry: interrupt ret }
            fn @main() -> i32 { entry: spawn @w() spawn @w() interrupt ret i32 0 }";
        let mut m = boot(src);
        m.step_instr(&mut never()).unwrap();
        m.step_instr(&mut never()).unwrap();
        let ev = m.step_instr(&mut never()).unwrap();
        assert_eq!(ev.status, Status::AtInterrupt { runnable: 3 });
        // Nothing runs until the interrupt is resolved.
        let mut seen = Vec::new();
        let mut chooser = |total: u32, kind: ChoiceKind| {
            seen.push((total, kind));
            Some(1)
        };
        let ev = m.resolve_interrupt(&mut chooser).unwrap();
        assert_eq!(ev.choice, Some(Choice { taken: 1, total: 3 }));
        assert_eq!(seen, vec![(3, ChoiceKind::Thread)]);
        assert_eq!(m.active_thread(), 1);
    }

    #[test]
    fn finished_threads_are_skipped() {
        let src = "
            fn @quick() -> void { entry: ret }
            fn @main() -> i32 { entry: spawn @quick() spawn @quick() interrupt interrupt ret i32 0 }";
        let mut m = boot(src);
        m.step_instr(&mut never()).unwrap();
        m.step_instr(&mut never()).unwrap();
        m.step_instr(&mut never()).unwrap(); // interrupt: 3 runnable
        // Run thread 1 to completion: it exits, leaving threads 0 and 2.
        m.step_instr(&mut ScriptedChooser::new([1])).unwrap();
        assert_eq!(m.status(), &Status::AtInterrupt { runnable: 2 });
        let mut totals = Vec::new();
        let mut chooser = |total: u32, _: ChoiceKind| {
            totals.push(total);
            Some(1)
        };
        m.resolve_interrupt(&mut chooser).unwrap();
        assert_eq!(totals, vec![2]);
        assert_eq!(m.active_thread(), 2);
    }

    #[test]
    fn single_runnable_thread_needs_no_choice() {
        let mut m = boot("fn @main() -> i32 { entry: interrupt ret i32 7 }");
        let ev = m.step_instr(&mut never()).unwrap();
        assert_eq!(ev.status, Status::AtInterrupt { runnable: 1 });
        let ev = m.step_instr(&mut never()).unwrap();
        assert_eq!(ev.choice, None);
        assert_eq!(ev.status, Status::Finished { exit: 7 });
    }

    #[test]
    fn run_until_state_boundaries() {
        let mut m = boot("fn @main() -> i32 { entry: const i32 %a, 1 add i32 %a, %a, 1 ret i32 %a }");
        let out = m.run_until_state(&mut never(), DEFAULT_STEP_BUDGET).unwrap();
        assert_eq!(out.end, RunEnd::Boundary);
        assert_eq!(out.events.len(), 3);
        assert_eq!(m.status(), &Status::Finished { exit: 2 });

        let mut m = boot("fn @main() -> i32 { entry: interrupt ret i32 0 }");
        let out = m.run_until_state(&mut never(), DEFAULT_STEP_BUDGET).unwrap();
        assert_eq!(out.events.len(), 1);
        assert_eq!(m.status(), &Status::AtInterrupt { runnable: 1 });

        let mut m = boot("fn @main() -> i32 { entry: br entry }");
        let out = m.run_until_state(&mut never(), DEFAULT_STEP_BUDGET).unwrap();
        assert_eq!(out.end, RunEnd::BudgetExhausted);
        assert_eq!(out.events.len() as u64, DEFAULT_STEP_BUDGET);
    }

    #[test]
    fn memory_faults_are_contained() {
        let cases = [
            ("alloca %p, 4 load i32 %x, %p, 4", "out-of-bounds"),
            ("const ptr i8 %p, null load i32 %x, %p, 0", "null-deref"),
            ("malloc %p, 8 free %p load i32 %x, %p, 0", "use-after-free"),
            ("malloc %p, 8 free %p free %p", "invalid-free"),
            ("alloca %p, 8 free %p", "invalid-free"),
            ("alloca %p, 16 store i32 1, %p, 14", "out-of-bounds"),
        ];
        for (body, reason) in cases {
            let src = format!("fn @main() -> i32 {{ entry: {body} ret i32 0 }}");
            let mut m = boot(&src);
            let before = m.capture();
            let d = before.digest();
            let status = run(&mut m, &mut never());
            match status {
                Status::Faulted { reason: r, .. } => assert_eq!(r.to_string(), reason, "{body}"),
                other => panic!("{body}: {other}"),
            }
            assert_eq!(before.digest(), d);
        }
    }

    #[test]
    fn dangling_alloca_after_return() {
        let src = "
            fn @leak() -> ptr i32 { entry: alloca %p, 4 ret ptr i32 %p }
            fn @main() -> i32 { entry: call %q, @leak() load i32 %x, %q, 0 ret i32 %x }";
        let mut m = boot(src);
        assert!(matches!(
            run(&mut m, &mut never()),
            Status::Faulted { reason: FaultReason::Memory(MemFault::UseAfterFree), .. }
        ));
    }

    #[test]
    fn restore_replays_identically() {
        let src = "
            fn @w(%p: ptr i32) -> void { entry: load i32 %x, %p, 0 interrupt add i32 %x, %x, 1 store i32 %x, %p, 0 ret }
            fn @main() -> i32 { entry: malloc %p, 4 spawn @w(%p) spawn @w(%p) interrupt load i32 %r, %p, 0 ret i32 %r }";
        let mut m = boot(src);
        let mut picks = ScriptedChooser::new([1, 2, 0, 0, 0, 1, 0]);
        let start = m.capture();
        let mut events = Vec::new();
        while !m.status().is_terminal() {
            events.push(m.step_instr(&mut picks).unwrap());
        }
        let end = m.digest();
        let mut again = MachineState::restore(Arc::clone(m.program()), &start);
        let mut picks = ScriptedChooser::new([1, 2, 0, 0, 0, 1, 0]);
        let mut events2 = Vec::new();
        while !again.status().is_terminal() {
            events2.push(again.step_instr(&mut picks).unwrap());
        }
        assert_eq!(events, events2);
        assert_eq!(again.digest(), end);
    }
}

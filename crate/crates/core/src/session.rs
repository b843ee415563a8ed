//! Interactive simulator state: numbered states, stepping, breakpoints,
//! rewinding, meta variables, counterexample traces and a bounded explorer.
//!
//! States are recorded where a model checker would store them: at interrupt
//! points, faults and termination. The first is `#start`; the rest are
//! numbered `#1`, `#2`, ... in discovery order. Meta variables starting with
//! `#` refer to a recorded state forever; `$state`, `$frame` and `$globals`
//! always refer to the newest machine state.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::{Arc, OnceLock};

use crate::debug::{frame_chain, frame_pc, source_window, thread_tops, DebugNode, DebugView, SourceMap, SourceWindow};
use crate::heap::StateDigest;
use crate::machine::{
    Choice, ChoiceKind, Chooser, MachineError, MachineSnapshot, MachineState, Status, DEFAULT_STEP_BUDGET,
};
use crate::mir::{CodePtr, ProgramUnit, SrcLoc};

pub const TRACE_HEADER: &str = "mirsim-trace 1";

/// The nondeterministic choices of one execution, in order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChoiceTrace(pub Vec<Choice>);

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("trace line {line}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

impl ChoiceTrace {
    pub fn parse(text: &str) -> Result<Self, TraceParseError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == TRACE_HEADER => {}
            _ => return Err(TraceParseError { line: 1, message: format!("expected header '{TRACE_HEADER}'") }),
        }
        let mut out = Vec::new();
        for (i, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| TraceParseError { line: i + 1, message };
            let rest = line.strip_prefix("choose").ok_or_else(|| err(format!("unexpected '{line}'")))?;
            let (a, b) = rest.trim().split_once('/').ok_or_else(|| err("expected <taken>/<total>".into()))?;
            let taken: u32 = a.trim().parse().map_err(|_| err(format!("bad number '{}'", a.trim())))?;
            let total: u32 = b.trim().parse().map_err(|_| err(format!("bad number '{}'", b.trim())))?;
            if total < 2 || taken >= total {
                return Err(err(format!("choice {taken}/{total} out of range")));
            }
            out.push(Choice { taken, total });
        }
        Ok(ChoiceTrace(out))
    }
}

impl fmt::Display for ChoiceTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{TRACE_HEADER}")?;
        for c in &self.0 {
            writeln!(f, "choose {}/{}", c.taken, c.total)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("program {0}")]
    Terminal(Status),
    #[error("choice pending: {kind} among {total} (answer with choose or thread)")]
    ChoicePending { total: u32, kind: ChoiceKind },
    #[error("no choice pending")]
    NoChoicePending,
    #[error("choice {taken} out of range for {total} alternatives")]
    ChoiceOutOfRange { taken: u32, total: u32 },
    #[error("thread {0} is not runnable")]
    NotRunnable(u32),
    #[error("no state named {0}")]
    UnknownState(String),
    #[error("state name {0} is already taken")]
    NameTaken(String),
    #[error("state names start with '#': {0}")]
    BadName(String),
    #[error("no thread {0}")]
    UnknownThread(u32),
    #[error("no function named {0}")]
    UnknownFunction(String),
    #[error("no breakpoint {0}")]
    UnknownBreakpoint(u32),
    #[error("{0}")]
    Path(String),
    #[error("trace mismatch at entry {entry}: trace says {expected} alternatives, program asks for {actual}")]
    TraceMismatch { entry: usize, expected: u32, actual: u32 },
    #[error(transparent)]
    Source(#[from] crate::debug::SourceUnavailable),
    #[error("{0}")]
    Internal(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Instr,
    Line,
    Over,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChoiceSource {
    Locked,
    User,
}

/// Something that happened while executing a command, in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    StateMinted { name: String, status: Status },
    /// A boundary matching a state already recorded along the same history.
    StateRevisited { name: String, status: Status },
    Choice { choice: Choice, kind: ChoiceKind, source: ChoiceSource },
    ChoicePending { total: u32, kind: ChoiceKind },
    Terminal { status: Status },
    Breakpoint { id: u32 },
    Message(String),
    BudgetExhausted,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Report {
    pub events: Vec<Event>,
    /// Machine steps taken.
    pub steps: u64,
}

impl Report {
    pub fn minted(&self) -> impl Iterator<Item = &str> {
        self.events.iter().filter_map(|e| match e {
            Event::StateMinted { name, .. } => Some(name.as_str()),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BreakpointKind {
    Line { file: String, line: u32 },
    Function(String),
}

impl fmt::Display for BreakpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BreakpointKind::Line { file, line } => write!(f, "{file}:{line}"),
            BreakpointKind::Function(name) => write!(f, "@{name}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Breakpoint {
    pub id: u32,
    pub kind: BreakpointKind,
    pub enabled: bool,
}

pub struct StateRecord {
    pub index: usize,
    pub name: String,
    pub aliases: Vec<String>,
    pub snapshot: MachineSnapshot,
    pub status: Status,
    /// Choices consumed from `#start` to this state.
    pub trace: Vec<Choice>,
    pub parent: Option<usize>,
    pub digest: StateDigest,
    /// Minted while replaying a loaded trace.
    pub locked: bool,
    key: StateDigest,
    view: OnceLock<Arc<DebugView>>,
}

impl StateRecord {
    pub fn view(&self, program: &Arc<ProgramUnit>) -> &Arc<DebugView> {
        self.view
            .get_or_init(|| DebugView::of_state(self.snapshot.heap.clone(), Arc::clone(program), self.snapshot.active))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BacktraceFrame {
    pub function: String,
    pub pc: Option<CodePtr>,
    pub loc: Option<SrcLoc>,
    pub node: DebugNode,
    pub corrupt: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Position {
    pub thread: u32,
    pub function: String,
    pub pc: String,
    pub file: Option<String>,
    pub line: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExploreResult {
    /// Choices leading to a fault, if one was found.
    pub trace: Option<ChoiceTrace>,
    /// Distinct boundary states seen (interrupt points, faults, terminations).
    pub states: usize,
    /// Distinct search nodes expanded.
    pub expanded: usize,
    pub fault: Option<(Status, StateDigest)>,
}

/// Answers choices from queued user answers first, then the trace lock.
struct SessionChooser<'a> {
    overrides: &'a mut VecDeque<u32>,
    lock: &'a mut Option<Vec<Choice>>,
    position: usize,
    consumed: Option<(ChoiceKind, ChoiceSource)>,
    mismatch: Option<SessionError>,
}

impl Chooser for SessionChooser<'_> {
    fn choose(&mut self, total: u32, kind: ChoiceKind) -> Option<u32> {
        if let Some(taken) = self.overrides.pop_front() {
            // A user answer replaces the rest of the lock.
            if let Some(lock) = self.lock.as_mut() {
                lock.truncate(self.position);
            }
            self.consumed = Some((kind, ChoiceSource::User));
            return Some(taken);
        }
        let locked = self.lock.as_ref()?.get(self.position).copied()?;
        if locked.total != total {
            self.mismatch =
                Some(SessionError::TraceMismatch { entry: self.position + 1, expected: locked.total, actual: total });
            return None;
        }
        self.consumed = Some((kind, ChoiceSource::Locked));
        Some(locked.taken)
    }
}

struct NoChoice;

impl Chooser for NoChoice {
    fn choose(&mut self, _: u32, _: ChoiceKind) -> Option<u32> {
        None
    }
}

enum Flow {
    Stepped,
    Pending,
    Terminal,
    Budget,
}

pub struct Session {
    program: Arc<ProgramUnit>,
    machine: MachineState,
    records: Vec<StateRecord>,
    names: HashMap<String, usize>,
    /// Most recent record on the current timeline.
    current: usize,
    /// Choices consumed since `#start`.
    history: Vec<Choice>,
    lock: Option<Vec<Choice>>,
    overrides: VecDeque<u32>,
    pending: Option<(u32, ChoiceKind)>,
    breakpoints: Vec<Breakpoint>,
    next_breakpoint: u32,
    sources: SourceMap,
    budget: u64,
    view: RefCell<Option<Arc<DebugView>>>,
}

impl Session {
    pub fn start(program: Arc<ProgramUnit>, sources: SourceMap) -> Self {
        let machine = MachineState::boot(Arc::clone(&program));
        let mut s = Session {
            program,
            machine,
            records: Vec::new(),
            names: HashMap::new(),
            current: 0,
            history: Vec::new(),
            lock: None,
            overrides: VecDeque::new(),
            pending: None,
            breakpoints: Vec::new(),
            next_breakpoint: 1,
            sources,
            budget: DEFAULT_STEP_BUDGET,
            view: RefCell::new(None),
        };
        s.push_record("#start".into(), None, false);
        s
    }

    /// Bounds the number of instructions a single command may execute.
    pub fn set_budget(&mut self, budget: u64) {
        self.budget = budget;
    }

    pub fn program(&self) -> &Arc<ProgramUnit> {
        &self.program
    }

    pub fn machine(&self) -> &MachineState {
        &self.machine
    }

    pub fn status(&self) -> &Status {
        self.machine.status()
    }

    pub fn digest(&self) -> StateDigest {
        self.machine.digest()
    }

    pub fn sources(&self) -> &SourceMap {
        &self.sources
    }

    pub fn sources_mut(&mut self) -> &mut SourceMap {
        &mut self.sources
    }

    pub fn records(&self) -> &[StateRecord] {
        &self.records
    }

    pub fn record(&self, name: &str) -> Option<&StateRecord> {
        self.names.get(name).map(|i| &self.records[*i])
    }

    pub fn pending(&self) -> Option<(u32, ChoiceKind)> {
        self.pending
    }

    pub fn history(&self) -> &[Choice] {
        &self.history
    }

    /// Locked choices not yet consumed.
    pub fn locked_remaining(&self) -> &[Choice] {
        match &self.lock {
            Some(l) if l.len() > self.history.len() => &l[self.history.len()..],
            _ => &[],
        }
    }

    pub fn is_locked(&self) -> bool {
        !self.locked_remaining().is_empty()
    }

    pub fn breakpoints(&self) -> &[Breakpoint] {
        &self.breakpoints
    }

    fn push_record(&mut self, name: String, parent: Option<usize>, locked: bool) -> usize {
        let snapshot = self.machine.capture();
        let index = self.records.len();
        let name = if name.is_empty() { format!("#{index}") } else { name };
        self.names.insert(name.clone(), index);
        self.records.push(StateRecord {
            index,
            name,
            aliases: Vec::new(),
            status: snapshot.status.clone(),
            trace: self.history.clone(),
            parent,
            digest: snapshot.digest(),
            key: snapshot.state_key(),
            snapshot,
            locked,
            view: OnceLock::new(),
        });
        index
    }

    /// Records the boundary just reached, reusing an existing record when
    /// the same state is reached again along the same history.
    fn boundary(&mut self, report: &mut Report, locked: bool) {
        let key = self.machine.capture().state_key();
        let existing = self
            .records
            .iter()
            .find(|r| r.parent == Some(self.current) && r.trace == self.history && r.key == key)
            .map(|r| r.index);
        let status = self.machine.status().clone();
        match existing {
            Some(i) => {
                self.current = i;
                report.events.push(Event::StateRevisited { name: self.records[i].name.clone(), status });
            }
            None => {
                let i = self.push_record(String::new(), Some(self.current), locked);
                self.current = i;
                report.events.push(Event::StateMinted { name: self.records[i].name.clone(), status });
            }
        }
    }

    fn step_once(&mut self, report: &mut Report, locked_replay: bool) -> Result<Flow, SessionError> {
        if self.machine.status().is_terminal() {
            return Ok(Flow::Terminal);
        }
        if report.steps >= self.budget {
            report.events.push(Event::BudgetExhausted);
            return Ok(Flow::Budget);
        }
        let mut chooser = SessionChooser {
            overrides: &mut self.overrides,
            lock: &mut self.lock,
            position: self.history.len(),
            consumed: None,
            mismatch: None,
        };
        let result = self.machine.step_instr(&mut chooser);
        let consumed = chooser.consumed;
        let mismatch = chooser.mismatch.take();
        match result {
            Ok(ev) => {
                report.steps += 1;
                self.pending = None;
                self.view.replace(None);
                if let Some(choice) = ev.choice {
                    self.history.push(choice);
                    let (kind, source) = consumed.unwrap_or((ChoiceKind::Choose, ChoiceSource::User));
                    report.events.push(Event::Choice { choice, kind, source });
                }
                report.events.extend(ev.messages.into_iter().map(Event::Message));
                if ev.status.is_boundary() {
                    self.boundary(report, locked_replay);
                }
                if ev.status.is_terminal() {
                    report.events.push(Event::Terminal { status: ev.status });
                    return Ok(Flow::Terminal);
                }
                Ok(Flow::Stepped)
            }
            Err(MachineError::ChoicePending { total, kind }) => {
                if let Some(e) = mismatch {
                    return Err(e);
                }
                self.pending = Some((total, kind));
                report.events.push(Event::ChoicePending { total, kind });
                Ok(Flow::Pending)
            }
            Err(MachineError::ChooserOutOfRange { taken, total }) => {
                self.overrides.clear();
                Err(SessionError::ChoiceOutOfRange { taken, total })
            }
            Err(MachineError::Terminal(s)) => Err(SessionError::Terminal(s)),
            Err(MachineError::Internal(e)) => Err(SessionError::Internal(e.to_string())),
        }
    }

    fn check_can_step(&self) -> Result<(), SessionError> {
        if self.machine.status().is_terminal() {
            return Err(SessionError::Terminal(self.machine.status().clone()));
        }
        if let Some((total, kind)) = self.pending {
            if self.overrides.is_empty() {
                return Err(SessionError::ChoicePending { total, kind });
            }
        }
        Ok(())
    }

    /// Source location of the active thread, if it has one.
    fn here(&self) -> Option<SrcLoc> {
        self.machine.current_pc().and_then(|pc| self.program.loc_at(pc))
    }

    fn depth(&self, thread: u32) -> usize {
        self.machine.frames(thread).len()
    }

    pub fn step(&mut self, kind: StepKind, count: u32) -> Result<Report, SessionError> {
        self.check_can_step()?;
        let mut report = Report::default();
        for _ in 0..count.max(1) {
            let start = self.here();
            let thread = self.machine.active_thread();
            let depth = self.depth(thread);
            loop {
                match self.step_once(&mut report, false)? {
                    Flow::Stepped => {}
                    _ => return Ok(report),
                }
                if kind == StepKind::Instr || start.is_none() {
                    break;
                }
                if self.pending.is_some() {
                    return Ok(report);
                }
                let here = self.here();
                let moved = here.is_some() && here != start;
                let done = match kind {
                    StepKind::Line => moved,
                    _ => {
                        let active = self.machine.active_thread();
                        (active == thread && self.depth(thread) <= depth && moved) || self.depth(thread) == 0
                    }
                };
                if done && !matches!(self.machine.status(), Status::AtInterrupt { .. }) {
                    break;
                }
            }
        }
        Ok(report)
    }

    /// Runs until a breakpoint is hit, a choice is needed, or the program ends.
    pub fn run(&mut self) -> Result<Report, SessionError> {
        self.check_can_step()?;
        let mut report = Report::default();
        loop {
            let before = (self.machine.active_thread(), self.here());
            match self.step_once(&mut report, false)? {
                Flow::Stepped => {}
                _ => return Ok(report),
            }
            if let Some(id) = self.breakpoint_hit(before) {
                report.events.push(Event::Breakpoint { id });
                return Ok(report);
            }
        }
    }

    fn breakpoint_hit(&self, before: (u32, Option<SrcLoc>)) -> Option<u32> {
        if self.machine.status() != &Status::Running {
            return None;
        }
        let pc = self.machine.current_pc()?;
        let instr = self.program.instr_at(pc).ok()?;
        let thread = self.machine.active_thread();
        self.breakpoints.iter().filter(|b| b.enabled).find_map(|b| {
            let hit = match &b.kind {
                BreakpointKind::Function(name) => {
                    self.program.func_by_name(name).is_some_and(|f| CodePtr::entry(f) == pc)
                }
                BreakpointKind::Line { file, line } => instr.loc.is_some_and(|loc| {
                    loc.line == *line
                        && self.program.file_name(loc.file) == file
                        && (before.0 != thread || before.1 != Some(loc))
                }),
            };
            hit.then_some(b.id)
        })
    }

    pub fn add_breakpoint(&mut self, kind: BreakpointKind) -> Result<u32, SessionError> {
        if let BreakpointKind::Function(name) = &kind {
            if self.program.func_by_name(name).is_none() {
                return Err(SessionError::UnknownFunction(name.clone()));
            }
        }
        let id = self.next_breakpoint;
        self.next_breakpoint += 1;
        self.breakpoints.push(Breakpoint { id, kind, enabled: true });
        Ok(id)
    }

    pub fn delete_breakpoint(&mut self, id: u32) -> Result<(), SessionError> {
        let before = self.breakpoints.len();
        self.breakpoints.retain(|b| b.id != id);
        if self.breakpoints.len() == before {
            return Err(SessionError::UnknownBreakpoint(id));
        }
        Ok(())
    }

    /// Answers the pending choice (or queues an answer for the next one when
    /// a trace lock would otherwise answer it) and takes one step.
    pub fn choose(&mut self, taken: u32) -> Result<Report, SessionError> {
        match self.pending {
            Some((total, _)) if taken >= total => Err(SessionError::ChoiceOutOfRange { taken, total }),
            Some(_) => {
                self.overrides.push_back(taken);
                self.step(StepKind::Instr, 1)
            }
            None if matches!(self.machine.status(), Status::AtInterrupt { runnable } if *runnable > 1) => {
                let total = self.machine.runnable_threads().len() as u32;
                if taken >= total {
                    return Err(SessionError::ChoiceOutOfRange { taken, total });
                }
                self.overrides.clear();
                self.overrides.push_back(taken);
                self.step(StepKind::Instr, 1)
            }
            None if self.lock.is_some() => {
                self.overrides.clear();
                self.overrides.push_back(taken);
                Ok(Report::default())
            }
            None => Err(SessionError::NoChoicePending),
        }
    }

    /// Picks a thread by index at a pending scheduling choice.
    /// At an interrupt this also works before the choice has been asked
    /// for, overriding a trace lock if one would answer it.
    pub fn select_thread(&mut self, thread: u32) -> Result<Report, SessionError> {
        let at_interrupt = matches!(self.machine.status(), Status::AtInterrupt { .. });
        match self.pending {
            Some((_, ChoiceKind::Thread)) => {}
            None if at_interrupt => {}
            _ => return Err(SessionError::NoChoicePending),
        }
        let runnable = self.machine.runnable_threads();
        let pos = runnable.iter().position(|t| *t == thread).ok_or(SessionError::NotRunnable(thread))?;
        if self.pending.is_some() {
            return self.choose(pos as u32);
        }
        if runnable.len() > 1 {
            self.overrides.clear();
            self.overrides.push_back(pos as u32);
        }
        self.step(StepKind::Instr, 1)
    }

    fn restore(&mut self, index: usize) {
        let snap = self.records[index].snapshot.clone();
        self.machine.reset_to(&snap);
        self.history = self.records[index].trace.clone();
        self.current = index;
        self.pending = None;
        self.overrides.clear();
        self.view.replace(None);
    }

    pub fn rewind(&mut self, name: &str) -> Result<Report, SessionError> {
        let index = *self.names.get(name).ok_or_else(|| SessionError::UnknownState(name.into()))?;
        self.restore(index);
        Ok(Report::default())
    }

    /// Adds `alias` as another name for the state `target`.
    pub fn name_state(&mut self, target: &str, alias: &str) -> Result<(), SessionError> {
        let index = *self.names.get(target).ok_or_else(|| SessionError::UnknownState(target.into()))?;
        if !alias.starts_with('#') || alias.len() < 2 || alias.contains('.') {
            return Err(SessionError::BadName(alias.into()));
        }
        if self.names.contains_key(alias) {
            return Err(SessionError::NameTaken(alias.into()));
        }
        self.names.insert(alias.into(), index);
        self.records[index].aliases.push(alias.into());
        Ok(())
    }

    /// Choices consumed from `#start` to the current state.
    pub fn save_trace(&self) -> ChoiceTrace {
        ChoiceTrace(self.history.clone())
    }

    /// Replays `trace` from `#start`, recording every state along the way,
    /// then rewinds to `#start` with the trace locked in.
    pub fn load_trace(&mut self, trace: ChoiceTrace) -> Result<Report, SessionError> {
        self.restore(0);
        let start_names: Vec<String> = std::iter::once("#start".to_string()).chain(self.records[0].aliases.clone()).collect();
        self.records.truncate(1);
        self.names = start_names.into_iter().map(|n| (n, 0)).collect();
        self.lock = Some(trace.0);
        let mut report = Report::default();
        let result = loop {
            match self.step_once(&mut report, true) {
                Ok(Flow::Stepped) => {}
                Ok(_) => break Ok(()),
                Err(e) => break Err(e),
            }
        };
        self.restore(0);
        if let Err(e) = result {
            self.lock = None;
            return Err(e);
        }
        report.events.retain(|e| !matches!(e, Event::ChoicePending { .. }));
        Ok(report)
    }

    fn dynamic_view(&self) -> Arc<DebugView> {
        let mut v = self.view.borrow_mut();
        Arc::clone(v.get_or_insert_with(|| {
            DebugView::of_state(self.machine.capture().heap, Arc::clone(&self.program), self.machine.active_thread())
        }))
    }

    /// Resolves a meta variable path such as `$frame.pt.deref.x`.
    pub fn resolve(&self, path: &str) -> Result<DebugNode, SessionError> {
        let mut steps = split_path(path).into_iter();
        let head = steps.next().ok_or_else(|| SessionError::Path("empty path".into()))?;
        let mut node = match head.as_str() {
            "$state" => self.dynamic_view().state_node(),
            "$globals" => self.dynamic_view().globals_node(),
            "$frame" => {
                let top = self.machine.thread_top(self.machine.active_thread());
                if top.is_null() {
                    return Err(SessionError::Path("no active frame".into()));
                }
                self.dynamic_view().frame_node(top)
            }
            h if h.starts_with('#') => {
                let r = self.record(h).ok_or_else(|| SessionError::UnknownState(h.into()))?;
                r.view(&self.program).state_node()
            }
            h => return Err(SessionError::Path(format!("unknown variable '{h}'"))),
        };
        for step in steps {
            node = node.step(&step).map_err(SessionError::Path)?;
        }
        Ok(node)
    }

    pub fn show(&self, path: &str) -> Result<String, SessionError> {
        Ok(self.resolve(path)?.render())
    }

    pub fn backtrace(&self, thread: Option<u32>) -> Result<Vec<BacktraceFrame>, SessionError> {
        let thread = thread.unwrap_or(self.machine.active_thread());
        if thread >= self.machine.thread_count() {
            return Err(SessionError::UnknownThread(thread));
        }
        let view = self.dynamic_view();
        let snap = view.snapshot().clone();
        let top = thread_tops(&snap)[thread as usize];
        Ok(frame_chain(&snap, top)
            .into_iter()
            .map(|f| {
                let node = view.frame_node(f);
                let pc = frame_pc(&snap, f).filter(|pc| self.program.instr_at(*pc).is_ok());
                BacktraceFrame {
                    function: pc.map_or("corrupt".into(), |pc| self.program.func(pc.func).name.clone()),
                    pc,
                    loc: pc.and_then(|pc| self.program.loc_at(pc)),
                    corrupt: pc.is_none(),
                    node,
                }
            })
            .collect())
    }

    pub fn position(&self) -> Option<Position> {
        let pc = self.machine.current_pc()?;
        let loc = self.program.loc_at(pc);
        Some(Position {
            thread: self.machine.active_thread(),
            function: self.program.func(pc.func).name.clone(),
            pc: self.program.describe_pc(pc),
            file: loc.map(|l| self.program.file_name(l.file).to_string()),
            line: loc.map(|l| l.line),
        })
    }

    pub fn source(&self, context: u32) -> Result<SourceWindow, SessionError> {
        let pc = self
            .machine
            .current_pc()
            .ok_or_else(|| crate::debug::SourceUnavailable("no active frame".into()))?;
        Ok(source_window(&self.program, &self.sources, pc, context)?)
    }

    /// Depth-first search over all choice outcomes from `#start`, merging
    /// equal states, until a fault is found or `max_states` search nodes
    /// have been expanded. The session itself is left untouched.
    pub fn explore(&self, max_states: usize) -> ExploreResult {
        explore_from(&self.program, &self.records[0].snapshot, max_states, self.budget)
    }
}

/// Runs without answering choices until a boundary or a pending choice.
fn settle(m: &mut MachineState, budget: u64) -> bool {
    let mut steps = 0;
    while !m.status().is_boundary() {
        if steps >= budget {
            return false;
        }
        match m.step_instr(&mut NoChoice) {
            Ok(_) => steps += 1,
            Err(MachineError::ChoicePending { .. }) => return true,
            Err(_) => return false,
        }
    }
    true
}

pub fn explore_from(program: &Arc<ProgramUnit>, start: &MachineSnapshot, max_states: usize, budget: u64) -> ExploreResult {
    let mut root = MachineState::restore(Arc::clone(program), start);
    let mut result = ExploreResult { trace: None, states: 0, expanded: 0, fault: None };
    if !settle(&mut root, budget) {
        return result;
    }
    let mut seen: HashSet<StateDigest> = HashSet::new();
    let mut stack: Vec<(MachineState, Vec<Choice>)> = vec![(root, Vec::new())];
    while let Some((m, trace)) = stack.pop() {
        let snap = m.capture();
        if !seen.insert(snap.state_key()) {
            continue;
        }
        if m.status().is_boundary() {
            result.states += 1;
        }
        if let Status::Faulted { .. } = m.status() {
            result.fault = Some((m.status().clone(), snap.digest()));
            result.trace = Some(ChoiceTrace(trace));
            return result;
        }
        if m.status().is_terminal() {
            continue;
        }
        if result.expanded >= max_states {
            break;
        }
        result.expanded += 1;
        let mut probe = m.clone();
        let children: Vec<(MachineState, Vec<Choice>)> = match probe.step_instr(&mut NoChoice) {
            Ok(_) => vec![(probe, trace.clone())],
            Err(MachineError::ChoicePending { total, .. }) => (0..total)
                .filter_map(|i| {
                    let mut child = m.clone();
                    let mut answer = |_: u32, _: ChoiceKind| Some(i);
                    child.step_instr(&mut answer).ok()?;
                    let mut t = trace.clone();
                    t.push(Choice { taken: i, total });
                    Some((child, t))
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        for (mut child, t) in children.into_iter().rev() {
            if settle(&mut child, budget) {
                stack.push((child, t));
            }
        }
    }
    result
}

/// Splits `$a.b[2].c` into `$a`, `b`, `[2]`, `c`.
fn split_path(path: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in path.trim().chars() {
        match c {
            '.' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            '[' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                cur.push(c);
            }
            ']' => {
                cur.push(c);
                out.push(std::mem::take(&mut cur));
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::parse_program;

    fn session(src: &str) -> Session {
        Session::start(Arc::new(parse_program(src).unwrap_or_else(|e| panic!("{e}"))), SourceMap::default())
    }

    fn names(s: &Session) -> Vec<String> {
        s.records().iter().map(|r| r.name.clone()).collect()
    }

    #[test]
    fn trace_format_round_trip() {
        let t = ChoiceTrace(vec![Choice { taken: 1, total: 2 }, Choice { taken: 0, total: 3 }]);
        let text = t.to_string();
        assert_eq!(text, "mirsim-trace 1\nchoose 1/2\nchoose 0/3\n");
        assert_eq!(ChoiceTrace::parse(&text).unwrap(), t);
        let commented = "mirsim-trace 1\n# found by explore\n\nchoose 1/2\n  choose 0/3  \n";
        assert_eq!(ChoiceTrace::parse(commented).unwrap(), t);
        assert_eq!(ChoiceTrace::parse("choose 1/2\n").unwrap_err().line, 1);
        assert_eq!(ChoiceTrace::parse("mirsim-trace 1\nchoose 2/2\n").unwrap_err().line, 2);
        assert_eq!(ChoiceTrace::parse("mirsim-trace 1\nchoose 0/1\n").unwrap_err().line, 2);
        assert!(ChoiceTrace::parse("mirsim-trace 1\npick 0/2\n").is_err());
    }

    #[test]
    fn start_binds_variables() {
        let s = session(r#"global @g : i32 = 42 !var("g") fn @main() -> i32 { entry: ret i32 0 }"#);
        assert_eq!(names(&s), vec!["#start"]);
        assert_eq!(s.resolve("$frame").unwrap().attribute("function"), Some("main"));
        assert_eq!(s.resolve("$globals.g").unwrap().attribute("value"), Some("42"));
    }

    #[test]
    fn instruction_steps_and_interrupt_states() {
        let mut s = session("fn @main() -> i32 { entry: const i32 %a, 1 add i32 %a, %a, 1 add i32 %a, %a, 1 interrupt ret i32 %a }");
        let r = s.step(StepKind::Instr, 3).unwrap();
        assert_eq!(r.steps, 3);
        assert_eq!(r.minted().count(), 0);
        let r = s.step(StepKind::Instr, 1).unwrap();
        assert_eq!(r.minted().collect::<Vec<_>>(), vec!["#1"]);
        let r = s.step(StepKind::Instr, 1).unwrap();
        assert!(!r.events.iter().any(|e| matches!(e, Event::Choice { .. })));
        assert_eq!(r.minted().collect::<Vec<_>>(), vec!["#2"]);
        assert_eq!(s.status(), &Status::Finished { exit: 3 });
        assert_eq!(s.step(StepKind::Instr, 1).unwrap_err(), SessionError::Terminal(Status::Finished { exit: 3 }));
    }

    const LINES: &str = r#"
        fn @callee(%x: i32) -> i32 !src("m.c") {
        entry:
          add i32 %x, %x, 1 !line(10)
          add i32 %x, %x, 1 !line(11)
          add i32 %x, %x, 1 !line(12)
          ret i32 %x !line(13)
        }
        fn @main() -> i32 !src("m.c") {
        entry:
          const i32 %a, 1 !line(1)
          call %b, @callee(%a) !line(2)
          add i32 %b, %b, 1 !line(3)
          ret i32 %b !line(4)
        }"#;

    #[test]
    fn line_stepping_into_and_over() {
        let mut s = session(LINES);
        s.step(StepKind::Line, 1).unwrap();
        assert_eq!(s.position().unwrap().line, Some(2));
        s.step(StepKind::Line, 1).unwrap();
        let p = s.position().unwrap();
        assert_eq!((p.function.as_str(), p.line), ("callee", Some(10)));

        let mut s = session(LINES);
        s.step(StepKind::Line, 1).unwrap();
        s.step(StepKind::Over, 1).unwrap();
        let p = s.position().unwrap();
        assert_eq!((p.function.as_str(), p.line), ("main", Some(3)));
        assert_eq!(s.backtrace(None).unwrap().len(), 1);
    }

    #[test]
    fn breakpoints() {
        let src = r#"
            fn @worker() -> void !src("w.c") { entry: interrupt !line(7) ret }
            fn @main() -> i32 !src("w.c") { entry: spawn @worker() !line(1) interrupt !line(2) ret i32 0 !line(3) }"#;
        let mut s = session(src);
        let id = s.add_breakpoint(BreakpointKind::Function("worker".into())).unwrap();
        let r = s.run().unwrap();
        assert_eq!(r.events.last(), Some(&Event::ChoicePending { total: 2, kind: ChoiceKind::Thread }));
        assert!(s.step(StepKind::Instr, 1).is_err());
        let r = s.select_thread(1).unwrap();
        assert!(r.events.iter().any(|e| matches!(e, Event::Choice { choice: Choice { taken: 1, total: 2 }, .. })));
        // Selecting the thread resolved the schedule; the worker's first
        // instruction already ran, so the function breakpoint is behind us.
        s.rewind("#start").unwrap();
        let mut s2 = session(src);
        s2.add_breakpoint(BreakpointKind::Line { file: "w.c".into(), line: 99 }).unwrap();
        assert!(s2.add_breakpoint(BreakpointKind::Function("nope".into())).is_err());
        s2.delete_breakpoint(id).unwrap();
        assert!(s2.delete_breakpoint(id).is_err());
    }

    #[test]
    fn breakpoint_stops_at_function_entry() {
        let src = r#"
            fn @f() -> i32 !src("f.c") { entry: const i32 %x, 1 !line(5) ret i32 %x }
            fn @main() -> i32 !src("f.c") { entry: call %v, @f() !line(1) call %w, @f() !line(2) ret i32 %v !line(3) }"#;
        let mut s = session(src);
        let a = s.add_breakpoint(BreakpointKind::Function("f".into())).unwrap();
        let b = s.add_breakpoint(BreakpointKind::Line { file: "f.c".into(), line: 5 }).unwrap();
        let r = s.run().unwrap();
        assert_eq!(r.events.last(), Some(&Event::Breakpoint { id: a }));
        assert_eq!(s.position().unwrap().function, "f");
        let r = s.run().unwrap();
        assert_eq!(r.events.last(), Some(&Event::Breakpoint { id: a }));
        assert_eq!(s.backtrace(None).unwrap().len(), 2);
        s.delete_breakpoint(a).unwrap();
        s.rewind("#start").unwrap();
        let r = s.run().unwrap();
        assert_eq!(r.events.last(), Some(&Event::Breakpoint { id: b }));
        s.delete_breakpoint(b).unwrap();
        let r = s.run().unwrap();
        assert!(matches!(r.events.last(), Some(Event::Terminal { .. })));
    }

    const RACE: &str = r#"
        global @x : i32 = 0 !var("x")
        fn @inc() -> void !src("race.c") {
        entry:
          load i32 %v, @x, 0 !line(3)
          interrupt
          add i32 %v, %v, 1 !line(4)
          store i32 %v, @x, 0 !line(5)
          ret
        }
        fn @main() -> i32 !src("race.c") {
        entry:
          spawn @inc() !line(10)
          call @inc() !line(11)
          br wait
        wait:
          interrupt !line(12)
          load i32 %y, @x, 0 !line(13)
          icmp slt i32 %c, %y, 2
          condbr %c, check, done
        check:
          choose %retry, 2
          condbr %retry, wait, bad
        bad:
          fault "lost update" !line(14)
        done:
          ret i32 0 !line(15)
        }"#;

    #[test]
    fn explore_finds_race_and_trace_replays() {
        let mut s = session(RACE);
        let found = s.explore(10_000);
        let trace = found.trace.clone().expect("race is reachable");
        assert_eq!(names(&s), vec!["#start"]);
        let r = s.load_trace(trace.clone()).unwrap();
        assert!(r.minted().count() >= 2);
        assert_eq!(s.status(), &Status::Running);
        let last = s.records().last().unwrap();
        assert!(matches!(last.status, Status::Faulted { .. }));
        assert_eq!(last.digest, found.fault.as_ref().unwrap().1);
        // Step along the locked trace to the end.
        while !s.status().is_terminal() {
            s.step(StepKind::Instr, 1).unwrap();
        }
        assert_eq!(s.digest(), found.fault.unwrap().1);
        assert_eq!(s.save_trace(), trace);
        assert_eq!(names(&s).len(), r.minted().count() + 1);
    }

    #[test]
    fn override_clears_lock_suffix() {
        let src = "fn @main() -> i32 { entry: choose %a, 2 interrupt choose %b, 3 interrupt ret i32 %b }";
        let mut s = session(src);
        let t = ChoiceTrace(vec![Choice { taken: 1, total: 2 }, Choice { taken: 2, total: 3 }]);
        s.load_trace(t).unwrap();
        assert_eq!(s.locked_remaining().len(), 2);
        s.step(StepKind::Instr, 2).unwrap();
        assert_eq!(s.locked_remaining().len(), 1);
        s.choose(0).unwrap();
        s.step(StepKind::Instr, 1).unwrap();
        assert_eq!(s.history(), &[Choice { taken: 1, total: 2 }, Choice { taken: 0, total: 3 }]);
        assert!(s.locked_remaining().is_empty());
        s.step(StepKind::Instr, 5).unwrap();
        assert_eq!(s.status(), &Status::Finished { exit: 0 });
    }

    #[test]
    fn trace_mismatch_names_entry() {
        let src = "fn @main() -> i32 { entry: choose %a, 2 choose %b, 3 ret i32 %b }";
        let mut s = session(src);
        let t = ChoiceTrace(vec![Choice { taken: 1, total: 2 }, Choice { taken: 1, total: 2 }]);
        assert_eq!(
            s.load_trace(t).unwrap_err(),
            SessionError::TraceMismatch { entry: 2, expected: 2, actual: 3 }
        );
        let mut s = session("fn @main() -> i32 { entry: ret i32 0 }");
        let r = s.load_trace(ChoiceTrace::default()).unwrap();
        assert_eq!(r.minted().collect::<Vec<_>>(), vec!["#1"]);
        assert!(matches!(s.records()[1].status, Status::Finished { .. }));
    }

    #[test]
    fn rewind_and_revisit() {
        let src = "fn @main() -> i32 { entry: interrupt interrupt interrupt interrupt ret i32 0 }";
        let mut s = session(src);
        s.run().unwrap();
        assert_eq!(names(&s), vec!["#start", "#1", "#2", "#3", "#4", "#5"]);
        s.rewind("#2").unwrap();
        let r = s.step(StepKind::Instr, 1).unwrap();
        assert_eq!(r.events, vec![Event::StateRevisited { name: "#3".into(), status: Status::AtInterrupt { runnable: 1 } }]);
        assert_eq!(s.digest(), s.record("#3").unwrap().digest);
        assert_eq!(s.rewind("#9").unwrap_err(), SessionError::UnknownState("#9".into()));
        s.rewind("#start").unwrap();
        assert_eq!(s.digest(), s.record("#start").unwrap().digest);
        s.name_state("#3", "#three").unwrap();
        assert!(s.name_state("#3", "#three").is_err());
        assert!(s.name_state("#3", "three").is_err());
        s.rewind("#three").unwrap();
        assert_eq!(s.digest(), s.record("#3").unwrap().digest);
    }

    #[test]
    fn static_variables_do_not_move() {
        let src = r#"global @g : i32 = 1 !var("g")
            fn @main() -> i32 { entry: store i32 5, @g, 0 interrupt ret i32 0 }"#;
        let mut s = session(src);
        let before = s.show("#start.globals.g").unwrap();
        s.run().unwrap();
        assert_eq!(s.show("#start.globals.g").unwrap(), before);
        assert_eq!(s.resolve("#start.globals.g").unwrap().attribute("value"), Some("1"));
        assert_eq!(s.resolve("$globals.g").unwrap().attribute("value"), Some("5"));
        assert!(s.resolve("$nope").is_err());
        assert!(s.resolve("$globals.h").is_err());
    }

    #[test]
    fn choice_pending_and_answers() {
        let mut s = session("fn @main() -> i32 { entry: choose %a, 3 ret i32 %a }");
        let r = s.step(StepKind::Instr, 1).unwrap();
        assert_eq!(r.events, vec![Event::ChoicePending { total: 3, kind: ChoiceKind::Choose }]);
        assert_eq!(s.step(StepKind::Line, 1).unwrap_err(), SessionError::ChoicePending { total: 3, kind: ChoiceKind::Choose });
        assert!(s.choose(3).is_err());
        assert!(s.select_thread(0).is_err());
        s.choose(2).unwrap();
        s.run().unwrap();
        assert_eq!(s.status(), &Status::Finished { exit: 2 });
        assert_eq!(s.save_trace().0, vec![Choice { taken: 2, total: 3 }]);
    }

    #[test]
    fn explore_without_faults() {
        let s = session("fn @main() -> i32 { entry: choose %a, 2 interrupt ret i32 %a }");
        let r = s.explore(100);
        assert_eq!(r.trace, None);
        assert_eq!(r.states, 4);
        let s = session(r#"fn @main() -> i32 { entry: choose %a, 2 condbr %a, bad, ok ok: ret i32 0 bad: fault "b" }"#);
        assert_eq!(s.explore(100).trace, Some(ChoiceTrace(vec![Choice { taken: 1, total: 2 }])));
    }

    #[test]
    fn backtrace_of_recursion() {
        let src = r#"
            fn @down(%n: i32) -> i32 !src("r.c") {
            entry:
              icmp sgt i32 %more, %n, 1 !line(2)
              condbr %more, rec, base
            rec:
              sub i32 %m, %n, 1 !line(3)
              call %r, @down(%m) !line(4)
              ret i32 %r
            base:
              interrupt !line(6)
              ret i32 0
            }
            fn @main() -> i32 !src("r.c") { entry: call %r, @down(3) !line(9) ret i32 %r }"#;
        let mut s = session(src);
        s.add_breakpoint(BreakpointKind::Line { file: "r.c".into(), line: 6 }).unwrap();
        s.run().unwrap();
        let bt = s.backtrace(None).unwrap();
        let fns: Vec<&str> = bt.iter().map(|f| f.function.as_str()).collect();
        assert_eq!(fns, vec!["down", "down", "down", "main"]);
        let lines: Vec<u32> = bt.iter().map(|f| f.loc.unwrap().line).collect();
        assert_eq!(lines, vec![6, 4, 4, 9]);
        assert!(s.backtrace(Some(4)).is_err());
    }

    #[test]
    fn path_splitting() {
        assert_eq!(split_path("$globals.arr[2].x"), vec!["$globals", "arr", "[2]", "x"]);
        assert_eq!(split_path("#start"), vec!["#start"]);
    }
}

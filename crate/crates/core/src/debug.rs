//! Typed views over heap snapshots.
//!
//! A [`DebugView`] pairs a snapshot with the program and a [`TypeMap`]
//! computed by propagating pointer base types from a list of roots. Nodes
//! built from a view are immutable: components are decoded eagerly from the
//! node's own bytes, relations are kept as (address, type) pairs and only
//! turned into nodes on request, so cyclic structures are never expanded.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::heap::{ObjId, PtrVal, SnapshotRef, Value};
use crate::machine::decode_pc;
use crate::mir::{frame_layout, CodePtr, FrameLayout, FuncId, ProgramUnit, TypeDesc, TypeId};

/// What an object is known to be.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeType {
    Untyped,
    Type(TypeId),
    Frame(FuncId),
    Globals,
    State,
    ThreadTable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Object,
    Frame,
    Globals,
    State,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeKind::Object => "object",
            NodeKind::Frame => "frame",
            NodeKind::Globals => "globals",
            NodeKind::State => "state",
        })
    }
}

// Snapshot accessors for the machine's fixed layout.

fn word(s: &SnapshotRef, p: PtrVal) -> PtrVal {
    match s.load(p, 8) {
        Ok(Value::Ptr(q)) => q,
        _ => PtrVal::NULL,
    }
}

pub fn globals_of(s: &SnapshotRef) -> PtrVal {
    word(s, s.root())
}

/// Top frame of every thread, by thread index; finished threads are null.
pub fn thread_tops(s: &SnapshotRef) -> Vec<PtrVal> {
    let table = word(s, s.root().with_offset(8));
    let n = s.object(table.obj).map_or(0, |o| o.size() / 8);
    (0..n).map(|t| word(s, table.with_offset(t * 8))).collect()
}

pub fn frame_pc(s: &SnapshotRef, frame: PtrVal) -> Option<CodePtr> {
    match s.load(frame, 8) {
        Ok(Value::Ptr(p)) => decode_pc(p),
        _ => None,
    }
}

pub fn frame_parent(s: &SnapshotRef, frame: PtrVal) -> PtrVal {
    word(s, frame.with_offset(8))
}

/// Frames of a thread, innermost first; stops at a cycle or a dead link.
pub fn frame_chain(s: &SnapshotRef, top: PtrVal) -> Vec<PtrVal> {
    let mut out = Vec::new();
    let mut f = top;
    while !f.is_null() && s.is_live(f.obj) && !out.contains(&f) {
        out.push(f);
        f = frame_parent(s, f);
    }
    out
}

/// Object types for one snapshot and one ordered root list.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TypeMap {
    map: BTreeMap<ObjId, NodeType>,
}

impl TypeMap {
    pub fn get(&self, obj: ObjId) -> Option<NodeType> {
        self.map.get(&obj).copied()
    }

    /// The program type of an object, if it has one.
    pub fn type_of(&self, obj: ObjId) -> Option<TypeId> {
        match self.get(obj)? {
            NodeType::Type(t) => Some(t),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ObjId, NodeType)> + '_ {
        self.map.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Pointer words of a value of type `ty` placed at `base`, with the
/// declared base type of each.
fn typed_pointer_words(p: &ProgramUnit, ty: TypeId, base: u32, out: &mut Vec<(u32, TypeId)>) {
    match p.ty(ty) {
        TypeDesc::Prim { .. } => {}
        // `ptr i8` is an opaque byte pointer and says nothing about its target.
        TypeDesc::Ptr { base: b } if *b == TypeId::I8 => {}
        TypeDesc::Ptr { base: b } => out.push((base, *b)),
        TypeDesc::Struct { fields, .. } => {
            for f in fields {
                typed_pointer_words(p, f.ty, base + f.offset, out);
            }
        }
        TypeDesc::Array { elem, count } => {
            let size = p.type_size(*elem);
            if size == 0 {
                return;
            }
            let mut tmp = Vec::new();
            typed_pointer_words(p, *elem, 0, &mut tmp);
            if tmp.is_empty() {
                return;
            }
            for i in 0..*count {
                out.extend(tmp.iter().map(|(o, t)| (base + i * size + o, *t)));
            }
        }
    }
}

/// Outgoing typed edges of an object: (word offset, type for the target).
fn outgoing(s: &SnapshotRef, p: &ProgramUnit, layouts: &[FrameLayout], obj: ObjId, t: NodeType) -> Vec<(u32, NodeType)> {
    let Some(o) = s.object(obj) else { return Vec::new() };
    let here = PtrVal::new(obj, 0);
    let frame_type = |target: PtrVal| match frame_pc(s, target) {
        Some(pc) if (pc.func.0 as usize) < layouts.len() => NodeType::Frame(pc.func),
        _ => NodeType::Untyped,
    };
    let mut words = Vec::new();
    match t {
        NodeType::Untyped => return Vec::new(),
        NodeType::Type(ty) => typed_pointer_words(p, ty, 0, &mut words),
        NodeType::Globals => {
            for g in &p.globals {
                typed_pointer_words(p, g.ty, g.offset, &mut words);
            }
        }
        NodeType::Frame(f) => {
            for slot in &layouts[f.0 as usize].slots {
                typed_pointer_words(p, slot.ty, slot.offset, &mut words);
            }
            let parent = frame_parent(s, here);
            let mut out: Vec<(u32, NodeType)> = Vec::new();
            if !parent.is_null() {
                out.push((8, frame_type(parent)));
            }
            out.extend(words.into_iter().filter(|(off, _)| o.is_pointer(*off)).map(|(off, b)| (off, NodeType::Type(b))));
            return out;
        }
        NodeType::State => return vec![(0, NodeType::Globals), (8, NodeType::ThreadTable)],
        NodeType::ThreadTable => {
            return o
                .pointer_offsets()
                .map(|off| (off, frame_type(o.pointer_at(off).unwrap_or(PtrVal::NULL))))
                .collect()
        }
    }
    words.into_iter().filter(|(off, _)| o.is_pointer(*off)).map(|(off, b)| (off, NodeType::Type(b))).collect()
}

fn fits(s: &SnapshotRef, p: &ProgramUnit, target: PtrVal, t: NodeType) -> bool {
    let Some(o) = s.object(target.obj) else { return false };
    match t {
        NodeType::Untyped => false,
        NodeType::Type(ty) => target.offset == 0 && p.type_size(ty) <= o.size(),
        _ => target.offset == 0,
    }
}

/// Breadth-first propagation of types from `roots`, first type wins.
/// Pointers into the middle of an object and pointers whose base type is
/// larger than the target object assign nothing.
pub fn type_heap(s: &SnapshotRef, program: &ProgramUnit, roots: &[(PtrVal, NodeType)]) -> TypeMap {
    let layouts: Vec<FrameLayout> = program.functions.iter().map(|f| frame_layout(program, f)).collect();
    type_heap_with(s, program, &layouts, roots)
}

fn type_heap_with(s: &SnapshotRef, p: &ProgramUnit, layouts: &[FrameLayout], roots: &[(PtrVal, NodeType)]) -> TypeMap {
    let mut map = BTreeMap::new();
    let mut queue = VecDeque::new();
    let assign = |target: PtrVal, t: NodeType, map: &mut BTreeMap<ObjId, NodeType>, queue: &mut VecDeque<(ObjId, NodeType)>| {
        if target.is_null() || !s.is_live(target.obj) || map.contains_key(&target.obj) || !fits(s, p, target, t) {
            return;
        }
        map.insert(target.obj, t);
        queue.push_back((target.obj, t));
    };
    for (ptr, t) in roots {
        assign(*ptr, *t, &mut map, &mut queue);
    }
    while let Some((obj, t)) = queue.pop_front() {
        for (off, target_t) in outgoing(s, p, layouts, obj, t) {
            let target = word(s, PtrVal::new(obj, off));
            assign(target, target_t, &mut map, &mut queue);
        }
    }
    TypeMap { map }
}

/// Default root order: the state object, globals, the active thread's top
/// frame, then all other frames by thread index and depth.
pub fn default_roots(s: &SnapshotRef, active: u32) -> Vec<(PtrVal, NodeType)> {
    let mut roots = vec![(s.root(), NodeType::State), (globals_of(s), NodeType::Globals)];
    let tops = thread_tops(s);
    let frame_root = |f: PtrVal| {
        let t = frame_pc(s, f).map_or(NodeType::Untyped, |pc| NodeType::Frame(pc.func));
        (f, t)
    };
    if let Some(top) = tops.get(active as usize).filter(|t| !t.is_null()) {
        roots.push(frame_root(*top));
    }
    for top in &tops {
        roots.extend(frame_chain(s, *top).into_iter().map(frame_root));
    }
    roots
}

/// Everything nodes need: the snapshot, program, canonical ids and types.
pub struct DebugView {
    snapshot: SnapshotRef,
    program: Arc<ProgramUnit>,
    layouts: Vec<FrameLayout>,
    canon: HashMap<ObjId, u64>,
    types: TypeMap,
}

impl DebugView {
    pub fn new(snapshot: SnapshotRef, program: Arc<ProgramUnit>, roots: &[(PtrVal, NodeType)]) -> Arc<Self> {
        let layouts: Vec<FrameLayout> = program.functions.iter().map(|f| frame_layout(&program, f)).collect();
        let types = type_heap_with(&snapshot, &program, &layouts, roots);
        let canon = snapshot.canonical_ids();
        Arc::new(DebugView { snapshot, program, layouts, canon, types })
    }

    /// View with the default roots for a machine snapshot.
    pub fn of_state(snapshot: SnapshotRef, program: Arc<ProgramUnit>, active: u32) -> Arc<Self> {
        let roots = default_roots(&snapshot, active);
        Self::new(snapshot, program, &roots)
    }

    pub fn snapshot(&self) -> &SnapshotRef {
        &self.snapshot
    }

    pub fn program(&self) -> &Arc<ProgramUnit> {
        &self.program
    }

    pub fn types(&self) -> &TypeMap {
        &self.types
    }

    pub fn canonical_id(&self, obj: ObjId) -> Option<u64> {
        self.canon.get(&obj).copied()
    }

    pub fn render_ptr(&self, p: PtrVal) -> String {
        if p.is_null() {
            return "null".into();
        }
        if let Some(pc) = decode_pc(p) {
            return format!("code:{}", self.program.describe_pc(pc));
        }
        match self.canon.get(&p.obj) {
            Some(c) => format!("obj#{c}+{}", p.offset),
            None => format!("obj?{}+{}", p.obj.0, p.offset),
        }
    }

    pub fn type_label(&self, t: NodeType) -> String {
        match t {
            NodeType::Untyped => "untyped".into(),
            NodeType::Type(ty) => self.program.type_name(ty),
            NodeType::Frame(f) => format!("frame @{}", self.program.func(f).name),
            NodeType::Globals => "globals".into(),
            NodeType::State => "state".into(),
            NodeType::ThreadTable => "threads".into(),
        }
    }

    pub fn state_node(self: &Arc<Self>) -> DebugNode {
        self.node(self.snapshot.root(), NodeType::State)
    }

    pub fn globals_node(self: &Arc<Self>) -> DebugNode {
        self.node(globals_of(&self.snapshot), NodeType::Globals)
    }

    pub fn frame_node(self: &Arc<Self>, frame: PtrVal) -> DebugNode {
        let t = frame_pc(&self.snapshot, frame).map_or(NodeType::Frame(FuncId(u32::MAX)), |pc| NodeType::Frame(pc.func));
        self.node(frame, t)
    }

    /// Type a relation target: the object's assigned type when the pointer
    /// is to its start, else the declared base type when it fits.
    fn target_type(&self, target: PtrVal, declared: Option<TypeId>) -> NodeType {
        if target.offset == 0 {
            if let Some(t) = self.types.get(target.obj) {
                return t;
            }
        }
        match declared {
            Some(ty) => {
                let size = self.snapshot.object(target.obj).map_or(0, |o| o.size());
                if u64::from(target.offset) + u64::from(self.program.type_size(ty)) <= u64::from(size) {
                    NodeType::Type(ty)
                } else {
                    NodeType::Untyped
                }
            }
            None => NodeType::Untyped,
        }
    }

    /// Builds the node for `addr` viewed as `t`.
    pub fn node(self: &Arc<Self>, addr: PtrVal, t: NodeType) -> DebugNode {
        let mut n = DebugNode {
            view: Arc::clone(self),
            addr,
            ty: t,
            kind: NodeKind::Object,
            attributes: Vec::new(),
            components: Vec::new(),
            relations: Vec::new(),
        };
        if addr.is_null() {
            n.attributes.push(("value".into(), "null".into()));
            return n;
        }
        let Some(obj) = self.snapshot.object(addr.obj) else {
            n.attributes.push(("dangling".into(), "true".into()));
            return n;
        };
        match t {
            NodeType::Type(ty) => self.fill_typed(&mut n, ty),
            NodeType::Untyped | NodeType::ThreadTable => {
                n.attributes.push(("size".into(), obj.size().to_string()));
                let hex: Vec<String> = obj.bytes().iter().map(|b| format!("{b:02x}")).collect();
                n.attributes.push(("bytes".into(), hex.join(" ")));
                for off in obj.pointer_offsets() {
                    let target = obj.pointer_at(off).unwrap_or(PtrVal::NULL);
                    self.add_pointer_relation(&mut n, format!("ptr@{off}"), target, None);
                }
            }
            NodeType::State => {
                n.kind = NodeKind::State;
                let g = globals_of(&self.snapshot);
                n.relations.push(Relation { name: "globals".into(), target: g, ty: NodeType::Globals });
                for (i, top) in thread_tops(&self.snapshot).into_iter().enumerate() {
                    if top.is_null() {
                        n.attributes.push((format!("thread{i}"), "finished".into()));
                    } else {
                        let ty = self.frame_type(top);
                        n.relations.push(Relation { name: format!("thread{i}"), target: top, ty });
                    }
                }
            }
            NodeType::Globals => {
                n.kind = NodeKind::Globals;
                for g in &self.program.globals {
                    let c = self.node(addr.with_offset(g.offset), NodeType::Type(g.ty));
                    n.components.push((g.var_name().to_string(), c));
                }
            }
            NodeType::Frame(f) => {
                n.kind = NodeKind::Frame;
                self.fill_frame(&mut n, f);
            }
        }
        n
    }

    fn frame_type(&self, frame: PtrVal) -> NodeType {
        match frame_pc(&self.snapshot, frame) {
            Some(pc) if (pc.func.0 as usize) < self.layouts.len() => NodeType::Frame(pc.func),
            _ => NodeType::Frame(FuncId(u32::MAX)),
        }
    }

    fn fill_frame(self: &Arc<Self>, n: &mut DebugNode, f: FuncId) {
        let s = &self.snapshot;
        let pc = frame_pc(s, n.addr).filter(|pc| pc.func == f && self.program.instr_at(*pc).is_ok());
        match pc {
            Some(pc) => {
                let func = self.program.func(f);
                n.attributes.push(("function".into(), func.name.clone()));
                n.attributes.push(("pc".into(), self.program.describe_pc(pc)));
                let loc = self.program.loc_at(pc).map_or("?".into(), |l| self.program.describe_loc(l));
                n.attributes.push(("location".into(), loc));
                let size = s.object(n.addr.obj).map_or(0, |o| o.size());
                let layout = &self.layouts[f.0 as usize];
                if layout.size <= size {
                    for slot in &layout.slots {
                        let c = self.node(n.addr.with_offset(slot.offset), NodeType::Type(slot.ty));
                        n.components.push((func.var_name(slot.reg).to_string(), c));
                    }
                }
            }
            None => n.attributes.push(("corrupt".into(), "true".into())),
        }
        let parent = frame_parent(s, n.addr);
        if !parent.is_null() {
            let ty = self.frame_type(parent);
            n.relations.push(Relation { name: "parent".into(), target: parent, ty });
        }
    }

    fn add_pointer_relation(&self, n: &mut DebugNode, name: String, target: PtrVal, declared: Option<TypeId>) {
        if target.is_null() || target.obj.is_code() {
            return;
        }
        if !self.snapshot.is_live(target.obj) {
            n.attributes.push(("dangling".into(), "true".into()));
            return;
        }
        let ty = self.target_type(target, declared);
        n.relations.push(Relation { name, target, ty });
    }

    fn fill_typed(self: &Arc<Self>, n: &mut DebugNode, ty: TypeId) {
        let s = &self.snapshot;
        let addr = n.addr;
        match self.program.ty(ty) {
            TypeDesc::Prim { width } => {
                let v = match s.load(addr, u32::from(*width)) {
                    Ok(Value::Int(v)) => v.to_string(),
                    Ok(Value::Ptr(p)) => self.render_ptr(p),
                    Err(e) => format!("<{e}>"),
                };
                n.attributes.push(("value".into(), v));
            }
            TypeDesc::Ptr { base } => match s.load(addr, 8) {
                Ok(Value::Ptr(p)) => {
                    n.attributes.push(("raw".into(), self.render_ptr(p)));
                    self.add_pointer_relation(n, "deref".into(), p, Some(*base));
                }
                Ok(Value::Int(0)) => n.attributes.push(("raw".into(), "null".into())),
                Ok(Value::Int(v)) => n.attributes.push(("raw".into(), v.to_string())),
                Err(e) => n.attributes.push(("raw".into(), format!("<{e}>"))),
            },
            TypeDesc::Struct { fields, .. } => {
                for f in fields {
                    let c = self.node(addr.with_offset(addr.offset + f.offset), NodeType::Type(f.ty));
                    n.components.push((f.name.clone(), c));
                }
            }
            TypeDesc::Array { elem, count } => {
                let size = self.program.type_size(*elem);
                for i in 0..*count {
                    let c = self.node(addr.with_offset(addr.offset + i * size), NodeType::Type(*elem));
                    n.components.push((format!("[{i}]"), c));
                }
            }
        }
    }
}

/// A pointer followed out of a node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relation {
    pub name: String,
    pub target: PtrVal,
    pub ty: NodeType,
}

#[derive(Clone)]
pub struct DebugNode {
    view: Arc<DebugView>,
    pub addr: PtrVal,
    pub ty: NodeType,
    pub kind: NodeKind,
    pub attributes: Vec<(String, String)>,
    pub components: Vec<(String, DebugNode)>,
    pub relations: Vec<Relation>,
}

impl PartialEq for DebugNode {
    fn eq(&self, other: &Self) -> bool {
        self.view.snapshot.id() == other.view.snapshot.id()
            && self.addr == other.addr
            && self.ty == other.ty
            && self.kind == other.kind
            && self.attributes == other.attributes
            && self.components == other.components
            && self.relations == other.relations
    }
}

impl Eq for DebugNode {}

impl fmt::Debug for DebugNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DebugNode")
            .field("snapshot", &self.view.snapshot.id())
            .field("addr", &self.addr)
            .field("ty", &self.ty)
            .field("kind", &self.kind)
            .field("attributes", &self.attributes)
            .field("components", &self.components)
            .field("relations", &self.relations)
            .finish()
    }
}

impl DebugNode {
    pub fn view(&self) -> &Arc<DebugView> {
        &self.view
    }

    pub fn snapshot_id(&self) -> u64 {
        self.view.snapshot.id()
    }

    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.attributes.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    pub fn component(&self, name: &str) -> Option<&DebugNode> {
        self.components.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }

    pub fn relation(&self, name: &str) -> Option<DebugNode> {
        let r = self.relations.iter().find(|r| r.name == name)?;
        Some(self.view.node(r.target, r.ty))
    }

    /// Follows one path step: a component name, else a relation name.
    pub fn step(&self, name: &str) -> Result<DebugNode, String> {
        if let Some(c) = self.component(name) {
            return Ok(c.clone());
        }
        if let Some(r) = self.relation(name) {
            return Ok(r);
        }
        if name == "deref" {
            if self.attribute("dangling").is_some() {
                return Err("cannot deref a dangling pointer".into());
            }
            if let Some(raw) = self.attribute("raw") {
                return Err(format!("cannot deref {raw}"));
            }
        }
        Err(format!("no component or relation named '{name}'"))
    }

    /// Short single-line value: the atomic attribute if there is one.
    pub fn summary(&self) -> String {
        for key in ["value", "raw"] {
            if let Some(v) = self.attribute(key) {
                let mut s = v.to_string();
                if self.attribute("dangling").is_some() {
                    s.push_str(" (dangling)");
                }
                return s;
            }
        }
        format!("{{{}}}", self.view.type_label(self.ty))
    }

    /// Multi-line rendering used by `show`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} : {}",
            self.kind,
            self.view.render_ptr(self.addr),
            self.view.type_label(self.ty)
        );
        for (k, v) in &self.attributes {
            let _ = writeln!(out, "  {k} = {v}");
        }
        for (k, c) in &self.components {
            let _ = writeln!(out, "  .{k} = {}", c.summary());
        }
        for r in &self.relations {
            let _ = writeln!(out, "  -> {} = {}", r.name, self.view.render_ptr(r.target));
        }
        out
    }
}

/// Looks up source files by name: inline texts first, then the name as a
/// path, then each search directory in order.
#[derive(Clone, Debug, Default)]
pub struct SourceMap {
    search: Vec<PathBuf>,
    inline: HashMap<String, String>,
}

impl SourceMap {
    pub fn new(search: Vec<PathBuf>) -> Self {
        SourceMap { search, inline: HashMap::new() }
    }

    pub fn add_dir(&mut self, dir: impl Into<PathBuf>) {
        self.search.push(dir.into());
    }

    pub fn add_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.inline.insert(name.into(), text.into());
    }

    pub fn text(&self, name: &str) -> Option<String> {
        if let Some(t) = self.inline.get(name) {
            return Some(t.clone());
        }
        let direct = Path::new(name);
        if direct.is_absolute() {
            return std::fs::read_to_string(direct).ok();
        }
        self.search.iter().find_map(|d| std::fs::read_to_string(d.join(name)).ok())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceWindow {
    pub file: String,
    pub first_line: u32,
    pub lines: Vec<String>,
    pub highlight: u32,
}

impl fmt::Display for SourceWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}:", self.file)?;
        for (i, text) in self.lines.iter().enumerate() {
            let n = self.first_line + i as u32;
            let mark = if n == self.highlight { '>' } else { ' ' };
            writeln!(f, "{mark}{n:4} {text}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("source unavailable: {0}")]
pub struct SourceUnavailable(pub String);

/// Lines around the source line of `pc`, highlighted.
pub fn source_window(
    program: &ProgramUnit,
    sources: &SourceMap,
    pc: CodePtr,
    context: u32,
) -> Result<SourceWindow, SourceUnavailable> {
    let loc = program
        .loc_at(pc)
        .ok_or_else(|| SourceUnavailable(format!("no line information at {}", program.describe_pc(pc))))?;
    let file = program.file_name(loc.file).to_string();
    let text = sources.text(&file).ok_or_else(|| SourceUnavailable(format!("{file} not found")))?;
    let all: Vec<&str> = text.lines().collect();
    if loc.line == 0 || loc.line as usize > all.len() {
        return Err(SourceUnavailable(format!("{file} has no line {}", loc.line)));
    }
    let first = loc.line.saturating_sub(context).max(1);
    let last = (loc.line + context).min(all.len() as u32);
    let lines = all[first as usize - 1..last as usize].iter().map(|s| s.to_string()).collect();
    Ok(SourceWindow { file, first_line: first, lines, highlight: loc.line })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphNode {
    pub id: String,
    pub label: String,
    pub attributes: Vec<(String, String)>,
    /// Components rendered as `path = value` lines.
    pub components: Vec<String>,
    pub dangling: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
    pub label: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HeapGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Leaf components as text lines, plus relations reachable through
/// components with their labels.
fn flatten(n: &DebugNode, path: &str, lines: &mut Vec<String>, rels: &mut Vec<(String, Relation)>, dangling: &mut bool) {
    if n.attribute("dangling").is_some() {
        *dangling = true;
    }
    if !path.is_empty() && n.components.is_empty() {
        lines.push(format!("{path} = {}", n.summary()));
    }
    for r in &n.relations {
        let label = match (path.is_empty(), r.name.as_str()) {
            (true, name) => name.to_string(),
            (false, "deref") => path.to_string(),
            (false, name) => format!("{path}.{name}"),
        };
        rels.push((label, r.clone()));
    }
    for (k, c) in &n.components {
        let sub = if path.is_empty() { k.clone() } else if k.starts_with('[') { format!("{path}{k}") } else { format!("{path}.{k}") };
        flatten(c, &sub, lines, rels, dangling);
    }
}

/// Breadth-first walk from `root` over relations, at most `max_depth` hops.
/// One graph node per distinct (object, offset, type).
pub fn collect_graph(root: &DebugNode, max_depth: u32) -> HeapGraph {
    let view = root.view();
    let mut ids: HashMap<(ObjId, u32, NodeType), String> = HashMap::new();
    let mut per_obj: HashMap<ObjId, u32> = HashMap::new();
    let mut graph = HeapGraph::default();
    let mut queue: VecDeque<(DebugNode, u32)> = VecDeque::new();
    let mut id_for = |n: &DebugNode, ids: &mut HashMap<(ObjId, u32, NodeType), String>| -> (String, bool) {
        let key = (n.addr.obj, n.addr.offset, n.ty);
        if let Some(id) = ids.get(&key) {
            return (id.clone(), false);
        }
        let base = match view.canonical_id(n.addr.obj) {
            Some(c) => format!("o{c}"),
            None => format!("x{}", n.addr.obj.0),
        };
        let k = per_obj.entry(n.addr.obj).or_insert(0);
        let id = if *k == 0 { base } else { format!("{base}_{k}") };
        *k += 1;
        ids.insert(key, id.clone());
        (id, true)
    };
    let (root_id, _) = id_for(root, &mut ids);
    queue.push_back((root.clone(), 0));
    let mut order = vec![root_id];
    let mut pending_nodes: Vec<GraphNode> = Vec::new();
    while let Some((n, depth)) = queue.pop_front() {
        let id = order[pending_nodes.len()].clone();
        let mut lines = Vec::new();
        let mut rels = Vec::new();
        let mut dangling = false;
        flatten(&n, "", &mut lines, &mut rels, &mut dangling);
        let label = format!("{} : {}", view.render_ptr(n.addr), view.type_label(n.ty));
        let attributes = if n.components.is_empty() || n.kind != NodeKind::Object {
            n.attributes.iter().filter(|(k, _)| k != "dangling").cloned().collect()
        } else {
            Vec::new()
        };
        pending_nodes.push(GraphNode { id: id.clone(), label, attributes, components: lines, dangling });
        for (label, r) in rels {
            let target = view.node(r.target, r.ty);
            // At the depth limit only edges back into the graph are kept.
            if depth >= max_depth && !ids.contains_key(&(target.addr.obj, target.addr.offset, target.ty)) {
                continue;
            }
            let (tid, fresh) = id_for(&target, &mut ids);
            if fresh {
                order.push(tid.clone());
                queue.push_back((target, depth + 1));
            }
            graph.edges.push(GraphEdge { from: id.clone(), to: tid, label });
        }
    }
    graph.nodes = pending_nodes;
    graph
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT digraph of the heap around `root`. Components are listed inside each
/// node's label; relations are labeled edges.
pub fn render_dot(root: &DebugNode, max_depth: u32) -> String {
    graph_to_dot(&collect_graph(root, max_depth))
}

pub fn graph_to_dot(g: &HeapGraph) -> String {
    let mut out = String::from("digraph heap {\n  node [shape=box, fontname=\"monospace\"];\n");
    for n in &g.nodes {
        let mut label = dot_escape(&n.label) + "\\l";
        for (k, v) in &n.attributes {
            label += &dot_escape(&format!("{k} = {v}"));
            label += "\\l";
        }
        for c in &n.components {
            label += &dot_escape(c);
            label += "\\l";
        }
        let style = if n.dangling { ", style=dashed" } else { "" };
        let _ = writeln!(out, "  {} [label=\"{label}\"{style}];", n.id);
    }
    for e in &g.edges {
        let _ = writeln!(out, "  {} -> {} [label=\"{}\"];", e.from, e.to, dot_escape(&e.label));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::{ChoiceKind, MachineState};
    use crate::mir::parse_program;

    fn run_to_interrupt(src: &str) -> MachineState {
        let mut m = MachineState::boot(Arc::new(parse_program(src).unwrap_or_else(|e| panic!("{e}"))));
        let mut c = |_: u32, _: ChoiceKind| Some(0);
        m.run_until_state(&mut c, 10_000).unwrap();
        m
    }

    fn view(m: &MachineState) -> Arc<DebugView> {
        DebugView::of_state(m.capture().heap, Arc::clone(m.program()), m.active_thread())
    }

    const POINT: &str = r#"
        type %point = struct { x: i32 @0, y: i32 @4 } size 8
        fn @main() -> i32 !src("p.c") {
        entry:
          alloca %pt, 8 !var("pt") !line(1)
          store i32 1, %pt, 0 !line(2)
          store i32 2, %pt, 4
          ptradd %q, %pt, 0, 0, 0
          interrupt !line(3)
          ret i32 0
        }"#;

    #[test]
    fn struct_components() {
        let m = run_to_interrupt(POINT);
        let v = view(&m);
        let frame = v.frame_node(m.thread_top(0));
        assert_eq!(frame.attribute("function"), Some("main"));
        let pt = frame.step("pt").unwrap();
        // The alloca register is an untyped `ptr i8`; heap typing yields i8,
        // so follow the cast-free route through a typed pointer instead.
        let target = pt.relations[0].target;
        let node = v.node(target, NodeType::Type(TypeId(3)));
        assert_eq!(node.step("x").unwrap().attribute("value"), Some("1"));
        assert_eq!(node.step("y").unwrap().attribute("value"), Some("2"));
    }

    /// n-node list built with typed registers, head kept in main's frame.
    fn list_program(n: u32, circular: bool) -> String {
        let mut body = String::new();
        for i in 0..n {
            body += &format!("  malloc %r{i}, 16\n  load ptr %node %n{i}, @tmp, 0\n  store i32 {i}, %r{i}, 0\n");
        }
        // Link node i to node i+1 through a global slot of type ptr %node so
        // the registers stay typed.
        let mut link = String::new();
        for i in 0..n {
            let next = if i + 1 < n { format!("%r{}", i + 1) } else if circular { "%r0".into() } else { "null".into() };
            link += &format!("  store ptr %node {next}, %r{i}, 8\n");
        }
        format!(
            r#"type %node = struct {{ v: i32 @0, next: ptr %node @8 }} size 16
global @tmp : ptr %node = null
fn @build() -> ptr %node {{
entry:
{body}{link}  ret ptr %node %r0
}}
fn @main() -> i32 {{
entry:
  call %head, @build() !var("head")
  interrupt
  ret i32 0
}}
"#
        )
    }

    #[test]
    fn list_is_typed_from_frame() {
        let m = run_to_interrupt(&list_program(3, false));
        let v = view(&m);
        let node_ty = TypeId(3);
        let typed: Vec<ObjId> = v.types().iter().filter(|(_, t)| *t == NodeType::Type(node_ty)).map(|(o, _)| o).collect();
        assert_eq!(typed.len(), 3);
    }

    #[test]
    fn graph_of_circular_list() {
        let m = run_to_interrupt(&list_program(3, true));
        let v = view(&m);
        let frame = v.frame_node(m.thread_top(0));
        let g = collect_graph(&frame, 3);
        assert_eq!(g.nodes.len(), 4);
        assert_eq!(g.edges.len(), 4);
        assert_eq!(g.edges.iter().filter(|e| e.label == "next").count(), 3);
        let root_only = collect_graph(&frame, 0);
        assert_eq!((root_only.nodes.len(), root_only.edges.len()), (1, 0));
        let dot = render_dot(&frame, 3);
        assert_eq!(dot, render_dot(&view(&m).frame_node(m.thread_top(0)), 3));
        assert_eq!(dot.matches(" -> ").count(), 4);
    }

    #[test]
    fn self_loop_terminates() {
        let src = r#"
            type %node = struct { v: i32 @0, next: ptr %node @8 } size 16
            fn @main() -> i32 {
            entry:
              malloc %r, 16
              store ptr %node %r, %r, 8
              load ptr %node %n, %r, 8 !var("n")
              interrupt
              ret i32 0
            }"#;
        let m = run_to_interrupt(src);
        let v = view(&m);
        let n = v.frame_node(m.thread_top(0)).step("n").unwrap().step("deref").unwrap();
        let next = n.step("next").unwrap();
        assert_eq!(next.relations[0].target, n.addr);
        let again = next.step("deref").unwrap();
        assert_eq!(again, n);
    }

    #[test]
    fn untyped_object_rendering() {
        let src = "fn @main() -> i32 { entry: malloc %a, 16 malloc %b, 4 store ptr i8 %b, %a, 8 interrupt ret i32 0 }";
        let m = run_to_interrupt(src);
        let v = view(&m);
        let frame = v.frame_node(m.thread_top(0));
        let a = frame.step("a").unwrap().relations[0].target;
        let node = v.node(a, NodeType::Untyped);
        assert_eq!(node.attribute("size"), Some("16"));
        assert_eq!(node.relations.len(), 1);
        assert_eq!(node.relations[0].name, "ptr@8");
    }

    #[test]
    fn dangling_and_null_pointers() {
        let src = r#"
            fn @main() -> i32 {
            entry:
              malloc %a, 8
              free %a
              const ptr i8 %z, null
              interrupt
              ret i32 0
            }"#;
        let m = run_to_interrupt(src);
        let v = view(&m);
        let frame = v.frame_node(m.thread_top(0));
        let a = frame.step("a").unwrap();
        assert_eq!(a.attribute("dangling"), Some("true"));
        assert!(a.relations.is_empty());
        assert!(a.step("deref").is_err());
        let z = frame.step("z").unwrap();
        assert_eq!(z.attribute("raw"), Some("null"));
        assert!(z.step("deref").is_err());
        let g = collect_graph(&frame, 2);
        assert!(g.nodes[0].dangling);
    }

    #[test]
    fn first_type_wins() {
        let src = r#"
            type %a = struct { x: i32 @0 } size 4
            type %b = struct { y: i64 @0 } size 8
            global @p : ptr %a = null
            global @q : ptr %b = null
            fn @main() -> i32 {
            entry:
              malloc %o, 8
              store ptr %a %o, @p, 0
              store ptr %b %o, @q, 0
              interrupt
              ret i32 0
            }"#;
        let m = run_to_interrupt(src);
        let snap = m.capture().heap;
        let obj = match m.heap().load(m.globals_ptr(), 8).unwrap() {
            Value::Ptr(p) => p,
            _ => unreachable!(),
        };
        let p = Arc::clone(m.program());
        let ta = NodeType::Type(TypeId(3));
        let tb = NodeType::Type(TypeId(4));
        assert_eq!(type_heap(&snap, &p, &[(obj, ta), (obj, tb)]).get(obj.obj), Some(ta));
        assert_eq!(type_heap(&snap, &p, &[(obj, tb), (obj, ta)]).get(obj.obj), Some(tb));
        // Through the globals, @p comes first.
        assert_eq!(type_heap(&snap, &p, &[(m.globals_ptr(), NodeType::Globals)]).get(obj.obj), Some(ta));
    }

    #[test]
    fn oversize_types_are_rejected() {
        let src = r#"
            type %big = struct { x: i64 @0, y: i64 @8 } size 16
            global @p : ptr %big = null
            fn @main() -> i32 { entry: malloc %o, 8 store ptr %big %o, @p, 0 interrupt ret i32 0 }"#;
        let m = run_to_interrupt(src);
        let snap = m.capture().heap;
        let tm = type_heap(&snap, m.program(), &default_roots(&snap, 0));
        let obj = match m.heap().load(m.globals_ptr(), 8).unwrap() {
            Value::Ptr(p) => p.obj,
            _ => unreachable!(),
        };
        assert_eq!(tm.get(obj), None);
    }

    #[test]
    fn source_windows() {
        let src = r#"fn @main() -> i32 !src("f.c") { entry:
            const i32 %a, 1 !line(4)
            add i32 %a, %a, 1
            ret i32 %a !line(9) }"#;
        let p = parse_program(src).unwrap();
        let mut sources = SourceMap::default();
        let text: String = (1..=10).map(|i| format!("line {i}\n")).collect();
        sources.add_text("f.c", text);
        let main = p.entry;
        let w = source_window(&p, &sources, CodePtr::new(main, 0, 0), 2).unwrap();
        assert_eq!((w.first_line, w.lines.len(), w.highlight), (2, 5, 4));
        assert_eq!(w.lines[2], "line 4");
        // Between annotations the previous one applies.
        assert_eq!(source_window(&p, &sources, CodePtr::new(main, 0, 1), 2).unwrap().highlight, 4);
        let w = source_window(&p, &sources, CodePtr::new(main, 0, 2), 2).unwrap();
        assert_eq!((w.first_line, w.lines.len()), (7, 4));
        assert!(source_window(&p, &SourceMap::default(), CodePtr::new(main, 0, 0), 2).is_err());
    }

    #[test]
    fn components_share_object_and_nodes_are_stable() {
        let mut m = MachineState::boot(Arc::new(parse_program(&list_program(4, true)).unwrap()));
        let mut c = |_: u32, _: ChoiceKind| Some(0);
        m.run_until_state(&mut c, 10_000).unwrap();
        let snap = m.capture();
        let v1 = DebugView::of_state(snap.heap.clone(), Arc::clone(m.program()), 0);
        let before = v1.frame_node(m.thread_top(0));
        let mut stack = vec![before.clone()];
        let mut seen = 0;
        while let Some(n) = stack.pop() {
            seen += 1;
            if seen > 200 {
                break;
            }
            for (_, c) in &n.components {
                assert_eq!(c.addr.obj, n.addr.obj);
                stack.push(c.clone());
            }
        }
        m.run_until_state(&mut c, 10_000).unwrap();
        let v2 = DebugView::of_state(snap.heap.clone(), Arc::clone(m.program()), 0);
        assert_eq!(v2.frame_node(before.addr), before);
    }
}

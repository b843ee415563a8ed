//! Executes commands against a session. Shared by the REPL and the UI
//! gateway so both produce the same effects.

use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Value};

use mirsim_core::debug::{collect_graph, graph_to_dot, HeapGraph, SourceMap, SourceWindow};
use mirsim_core::machine::{ChoiceKind, Status};
use mirsim_core::mir::ProgramUnit;
use mirsim_core::session::{ChoiceSource, ChoiceTrace, Event, Report, Session, StepKind};

use crate::command::{Command, VERBS};

pub const DEFAULT_EXPLORE_LIMIT: usize = 100_000;
pub const DEFAULT_SOURCE_CONTEXT: u32 = 3;

/// Result of one command: text for the terminal, structured data for the
/// gateway, and the session events it caused.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub result: Value,
    pub events: Vec<Event>,
    pub quit: bool,
}

pub struct Engine {
    program: Arc<ProgramUnit>,
    sources: SourceMap,
    session: Session,
}

pub fn kind_name(k: ChoiceKind) -> &'static str {
    match k {
        ChoiceKind::Choose => "choose",
        ChoiceKind::Thread => "thread",
    }
}

impl Engine {
    pub fn new(program: Arc<ProgramUnit>, sources: SourceMap) -> Self {
        let session = Session::start(Arc::clone(&program), sources.clone());
        Engine { program, sources, session }
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn session_mut(&mut self) -> &mut Session {
        &mut self.session
    }

    fn describe_status(&self, status: &Status) -> String {
        match status {
            Status::Faulted { at, .. } => {
                let loc = self.program.loc_at(*at).map(|l| format!(" ({})", self.program.describe_loc(l)));
                format!("{status} at {}{}", self.program.describe_pc(*at), loc.unwrap_or_default())
            }
            other => other.to_string(),
        }
    }

    pub fn event_lines(&self, events: &[Event]) -> Vec<String> {
        let mut out = Vec::new();
        for e in events {
            match e {
                Event::StateMinted { name, status } => out.push(format!("state {name} {status}")),
                Event::StateRevisited { name, status } => out.push(format!("state {name} {status} (revisited)")),
                Event::Choice { choice, kind, source } => {
                    let src = match source {
                        ChoiceSource::Locked => " (locked)",
                        ChoiceSource::User => "",
                    };
                    out.push(format!("choice {}/{} {}{src}", choice.taken, choice.total, kind_name(*kind)))
                }
                Event::ChoicePending { total, kind } => {
                    out.push(format!("choice pending: {} among {total}", kind_name(*kind)));
                    if *kind == ChoiceKind::Thread {
                        let runnable: Vec<String> =
                            self.session.machine().runnable_threads().iter().map(|t| t.to_string()).collect();
                        out.push(format!("runnable threads: {}", runnable.join(" ")));
                    }
                }
                Event::Terminal { status } => out.push(format!("program {}", self.describe_status(status))),
                Event::Breakpoint { id } => out.push(format!("breakpoint {id} hit")),
                Event::Message(m) => out.push(format!("note: {m}")),
                Event::BudgetExhausted => out.push("step budget exhausted".into()),
            }
        }
        out
    }

    pub fn position_line(&self) -> String {
        match self.session.position() {
            Some(p) => {
                let loc = match (&p.file, p.line) {
                    (Some(f), Some(l)) => format!(" {f}:{l}"),
                    _ => String::new(),
                };
                format!("at thread {} {}{loc} [{}]", p.thread, p.function, p.pc)
            }
            None => format!("program {}", self.describe_status(self.session.status())),
        }
    }

    pub fn position_json(&self) -> Value {
        match self.session.position() {
            Some(p) => json!({
                "thread": p.thread, "function": p.function, "pc": p.pc, "file": p.file, "line": p.line,
                "status": self.session.status().to_string(),
            }),
            None => json!({ "status": self.session.status().to_string() }),
        }
    }

    fn report(&self, r: Report) -> Outcome {
        let mut lines = self.event_lines(&r.events);
        let terminal_reported = r.events.iter().any(|e| matches!(e, Event::Terminal { .. }));
        if !terminal_reported || self.session.position().is_some() {
            lines.push(self.position_line());
        }
        Outcome {
            lines,
            result: json!({ "steps": r.steps, "position": self.position_json() }),
            events: r.events,
            quit: false,
        }
    }

    pub fn states_json(&self) -> Value {
        Value::Array(
            self.session
                .records()
                .iter()
                .map(|r| {
                    json!({
                        "name": r.name, "aliases": r.aliases, "status": r.status.to_string(),
                        "digest": r.digest.to_string(), "locked": r.locked,
                    })
                })
                .collect(),
        )
    }

    pub fn graph(&self, path: &str, depth: u32) -> Result<HeapGraph, String> {
        let node = self.session.resolve(path).map_err(|e| e.to_string())?;
        Ok(collect_graph(&node, depth))
    }

    pub fn source_window(&self, context: u32) -> Result<SourceWindow, String> {
        self.session.source(context).map_err(|e| e.to_string())
    }

    pub fn execute(&mut self, cmd: &Command) -> Result<Outcome, String> {
        let s = &mut self.session;
        let out = match cmd {
            Command::Start => {
                let breakpoints = s.breakpoints().to_vec();
                let fresh = Session::start(Arc::clone(&self.program), self.sources.clone());
                self.session = fresh;
                for b in breakpoints {
                    self.session.add_breakpoint(b.kind).map_err(|e| e.to_string())?;
                }
                let mut o = self.report(Report::default());
                o.lines.insert(0, "started; state #start".into());
                o
            }
            Command::Step(n) => {
                let r = s.step(StepKind::Instr, *n).map_err(|e| e.to_string())?;
                self.report(r)
            }
            Command::Next(n) => {
                let r = s.step(StepKind::Line, *n).map_err(|e| e.to_string())?;
                self.report(r)
            }
            Command::Over(n) => {
                let r = s.step(StepKind::Over, *n).map_err(|e| e.to_string())?;
                self.report(r)
            }
            Command::Run => {
                let r = s.run().map_err(|e| e.to_string())?;
                self.report(r)
            }
            Command::Thread(t) => {
                let r = s.select_thread(*t).map_err(|e| e.to_string())?;
                self.report(r)
            }
            Command::Choose(i) => {
                let r = s.choose(*i).map_err(|e| e.to_string())?;
                if r.steps > 0 || !r.events.is_empty() {
                    self.report(r)
                } else {
                    Outcome {
                        lines: vec![format!("next choice overridden with {i}; trace lock cleared from there")],
                        result: json!({ "queued": i }),
                        ..Outcome::default()
                    }
                }
            }
            Command::Break(kind) => {
                let id = s.add_breakpoint(kind.clone()).map_err(|e| e.to_string())?;
                Outcome {
                    lines: vec![format!("breakpoint {id} at {kind}")],
                    result: json!({ "id": id, "location": kind.to_string() }),
                    ..Outcome::default()
                }
            }
            Command::Delete(id) => {
                s.delete_breakpoint(*id).map_err(|e| e.to_string())?;
                Outcome { lines: vec![format!("deleted breakpoint {id}")], result: json!({ "id": id }), ..Outcome::default() }
            }
            Command::Backtrace(t) => {
                let frames = s.backtrace(*t).map_err(|e| e.to_string())?;
                let mut lines = Vec::new();
                let mut data = Vec::new();
                for (i, f) in frames.iter().enumerate() {
                    let loc = f.loc.map(|l| self.program.describe_loc(l));
                    let pc = f.pc.map(|pc| self.program.describe_pc(pc));
                    let mut line = format!("{i}: {}", f.function);
                    if let Some(l) = &loc {
                        line += &format!(" at {l}");
                    }
                    if let Some(pc) = &pc {
                        line += &format!(" [{pc}]");
                    }
                    lines.push(line);
                    data.push(json!({
                        "function": f.function, "location": loc, "pc": pc, "corrupt": f.corrupt,
                        "file": f.loc.map(|l| self.program.file_name(l.file).to_string()),
                        "line": f.loc.map(|l| l.line),
                    }));
                }
                if lines.is_empty() {
                    lines.push("no frames".into());
                }
                Outcome { lines, result: Value::Array(data), ..Outcome::default() }
            }
            Command::Source(ctx) => {
                let w = s.source(ctx.unwrap_or(DEFAULT_SOURCE_CONTEXT)).map_err(|e| e.to_string())?;
                Outcome {
                    lines: w.to_string().lines().map(str::to_string).collect(),
                    result: json!({ "file": w.file, "first_line": w.first_line, "lines": w.lines, "highlight": w.highlight }),
                    ..Outcome::default()
                }
            }
            Command::Show(path) => {
                let node = s.resolve(path).map_err(|e| e.to_string())?;
                let attributes: Vec<Value> = node.attributes.iter().map(|(k, v)| json!([k, v])).collect();
                let components: Vec<Value> = node.components.iter().map(|(k, c)| json!([k, c.summary()])).collect();
                let relations: Vec<Value> =
                    node.relations.iter().map(|r| json!([r.name, node.view().render_ptr(r.target)])).collect();
                Outcome {
                    lines: node.render().lines().map(str::to_string).collect(),
                    result: json!({
                        "kind": node.kind.to_string(), "address": node.view().render_ptr(node.addr),
                        "type": node.view().type_label(node.ty),
                        "attributes": attributes, "components": components, "relations": relations,
                    }),
                    ..Outcome::default()
                }
            }
            Command::States => {
                let lines = s
                    .records()
                    .iter()
                    .map(|r| {
                        let mut line = format!("{} {}", r.name, r.status);
                        for a in &r.aliases {
                            line += &format!(" {a}");
                        }
                        if r.locked {
                            line += " [locked]";
                        }
                        line
                    })
                    .collect();
                Outcome { lines, result: self.states_json(), ..Outcome::default() }
            }
            Command::Name { target, alias } => {
                s.name_state(target, alias).map_err(|e| e.to_string())?;
                Outcome {
                    lines: vec![format!("{alias} names {target}")],
                    result: json!({ "target": target, "alias": alias }),
                    ..Outcome::default()
                }
            }
            Command::Rewind(target) => {
                let r = s.rewind(target).map_err(|e| e.to_string())?;
                let mut o = self.report(r);
                o.lines.insert(0, format!("rewound to {target}"));
                o
            }
            Command::TraceLoad(file) => {
                let text = std::fs::read_to_string(file).map_err(|e| format!("cannot read {file}: {e}"))?;
                let trace = ChoiceTrace::parse(&text).map_err(|e| e.to_string())?;
                let n = trace.0.len();
                let r = s.load_trace(trace).map_err(|e| e.to_string())?;
                let mut o = self.report(r);
                o.lines.insert(0, format!("trace loaded: {n} choices"));
                o
            }
            Command::TraceSave(file) => {
                let t = s.save_trace();
                std::fs::write(file, t.to_string()).map_err(|e| format!("cannot write {file}: {e}"))?;
                Outcome {
                    lines: vec![format!("trace saved: {} choices to {file}", t.0.len())],
                    result: json!({ "choices": t.0.len(), "file": file }),
                    ..Outcome::default()
                }
            }
            Command::Explore(max) => {
                let limit = max.unwrap_or(DEFAULT_EXPLORE_LIMIT);
                let r = s.explore(limit);
                let mut lines = Vec::new();
                let trace_text = r.trace.as_ref().map(|t| t.to_string());
                match (&r.trace, &r.fault) {
                    (Some(t), Some((status, _))) => {
                        lines.push(format!(
                            "explore: {} after {} states ({} choices)",
                            self.describe_status(status),
                            r.states,
                            t.0.len()
                        ));
                        lines.extend(t.to_string().lines().map(str::to_string));
                    }
                    _ => lines.push(format!("explore: no fault within {} nodes ({} states)", r.expanded, r.states)),
                }
                Outcome {
                    lines,
                    result: json!({
                        "found": r.trace.is_some(), "states": r.states, "expanded": r.expanded, "trace": trace_text,
                        "digest": r.fault.as_ref().map(|(_, d)| d.to_string()),
                    }),
                    ..Outcome::default()
                }
            }
            Command::Graph { path, depth, out } => {
                let g = self.graph(path, *depth)?;
                let dot = graph_to_dot(&g);
                std::fs::write(Path::new(out), &dot).map_err(|e| format!("cannot write {out}: {e}"))?;
                Outcome {
                    lines: vec![format!("graph: {} nodes, {} edges written to {out}", g.nodes.len(), g.edges.len())],
                    result: json!({ "nodes": g.nodes.len(), "edges": g.edges.len(), "file": out }),
                    ..Outcome::default()
                }
            }
            Command::Help => Outcome {
                lines: VERBS.iter().map(|(_, u)| u.to_string()).collect(),
                result: json!(VERBS.iter().map(|(_, u)| *u).collect::<Vec<_>>()),
                ..Outcome::default()
            },
            Command::Quit => Outcome { lines: Vec::new(), result: Value::Null, events: Vec::new(), quit: true },
        };
        Ok(out)
    }
}

pub fn graph_json(g: &HeapGraph) -> Value {
    json!({
        "nodes": g.nodes.iter().map(|n| json!({
            "id": n.id, "label": n.label,
            "attributes": n.attributes.iter().map(|(k, v)| json!([k, v])).collect::<Vec<_>>(),
            "components": n.components, "dangling": n.dangling,
        })).collect::<Vec<_>>(),
        "edges": g.edges.iter().map(|e| json!({ "from": e.from, "to": e.to, "label": e.label })).collect::<Vec<_>>(),
    })
}

pub fn source_json(w: &SourceWindow) -> Value {
    json!({ "file": w.file, "first_line": w.first_line, "lines": w.lines, "highlight": w.highlight })
}

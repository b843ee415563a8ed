//! Browser demo: load a MIR program, step it, rewind to earlier states and
//! look at the heap graph. [`Demo`] is plain Rust so it can be tested
//! natively; [`Simulator`] wraps it for JavaScript and returns JSON strings.

use std::sync::Arc;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use mirsim_core::debug::{collect_graph, SourceMap};
use mirsim_core::mir::parse_program;
use mirsim_core::session::{Event, Session, StepKind};

pub struct Demo {
    session: Session,
}

fn event_json(e: &Event) -> Value {
    match e {
        Event::StateMinted { name, status } | Event::StateRevisited { name, status } => {
            json!({ "state": name, "status": status.to_string() })
        }
        Event::Choice { choice, .. } => json!({ "choice": format!("{}/{}", choice.taken, choice.total) }),
        Event::ChoicePending { total, kind } => json!({ "pending": total, "kind": kind.to_string() }),
        Event::Terminal { status } => json!({ "terminal": status.to_string() }),
        Event::Breakpoint { id } => json!({ "breakpoint": id }),
        Event::Message(m) => json!({ "message": m }),
        Event::BudgetExhausted => json!({ "message": "step budget exhausted" }),
    }
}

impl Demo {
    pub fn load(text: &str) -> Result<Demo, String> {
        let program = parse_program(text).map_err(|e| format!("line {}:{}: {}", e.line, e.col, e.message))?;
        Ok(Demo { session: Session::start(Arc::new(program), SourceMap::default()) })
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    fn summary(&self, events: &[Event]) -> Value {
        json!({
            "events": events.iter().map(event_json).collect::<Vec<_>>(),
            "status": self.session.status().to_string(),
            "position": self.session.position().map(|p| p.pc),
            "pending": self.session.pending().map(|(n, _)| n),
        })
    }

    pub fn step(&mut self, count: u32) -> Result<Value, String> {
        let r = self.session.step(StepKind::Instr, count).map_err(|e| e.to_string())?;
        Ok(self.summary(&r.events))
    }

    pub fn run(&mut self) -> Result<Value, String> {
        let r = self.session.run().map_err(|e| e.to_string())?;
        Ok(self.summary(&r.events))
    }

    pub fn choose(&mut self, taken: u32) -> Result<Value, String> {
        let r = self.session.choose(taken).map_err(|e| e.to_string())?;
        Ok(self.summary(&r.events))
    }

    pub fn rewind(&mut self, name: &str) -> Result<Value, String> {
        let r = self.session.rewind(name).map_err(|e| e.to_string())?;
        Ok(self.summary(&r.events))
    }

    pub fn states(&self) -> Value {
        self.session
            .records()
            .iter()
            .map(|r| json!({ "name": r.name, "status": r.status.to_string(), "digest": r.digest.to_string() }))
            .collect()
    }

    /// Heap graph from `path` as nodes and edges.
    pub fn graph(&self, path: &str, depth: u32) -> Result<Value, String> {
        let root = self.session.resolve(path).map_err(|e| e.to_string())?;
        let g = collect_graph(&root, depth);
        Ok(json!({
            "nodes": g.nodes.iter().map(|n| json!({
                "id": n.id, "label": n.label, "dangling": n.dangling,
                "attributes": n.attributes.iter().map(|(k, v)| format!("{k} = {v}")).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "edges": g.edges.iter().map(|e| json!({ "from": e.from, "to": e.to, "label": e.label })).collect::<Vec<_>>(),
        }))
    }

    pub fn explore(&self, max: usize) -> Value {
        let r = self.session.explore(max);
        json!({
            "states": r.states,
            "fault": r.fault.as_ref().map(|(s, _)| s.to_string()),
            "trace": r.trace.map(|t| t.0.iter().map(|c| c.taken).collect::<Vec<_>>()),
        })
    }
}

#[wasm_bindgen]
pub struct Simulator {
    demo: Demo,
}

fn js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
impl Simulator {
    #[wasm_bindgen(constructor)]
    pub fn new(source: &str) -> Result<Simulator, JsError> {
        Demo::load(source).map(|demo| Simulator { demo }).map_err(|e| JsError::new(&e))
    }

    pub fn step(&mut self, count: u32) -> Result<String, JsError> {
        js(self.demo.step(count))
    }

    pub fn run(&mut self) -> Result<String, JsError> {
        js(self.demo.run())
    }

    pub fn choose(&mut self, taken: u32) -> Result<String, JsError> {
        js(self.demo.choose(taken))
    }

    pub fn rewind(&mut self, name: &str) -> Result<String, JsError> {
        js(self.demo.rewind(name))
    }

    pub fn states(&self) -> String {
        self.demo.states().to_string()
    }

    pub fn graph(&self, path: &str, depth: u32) -> Result<String, JsError> {
        js(self.demo.graph(path, depth))
    }

    pub fn explore(&self, max: usize) -> String {
        self.demo.explore(max).to_string()
    }
}

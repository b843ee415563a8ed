//! WebSocket gateway for browser front ends.
//!
//! One worker thread owns the engine; every connection forwards requests to
//! it over a channel. Responses go to the requesting client and session
//! events are broadcast to all of them. `GET /` serves a small page.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Map, Value};
use tungstenite::{Error as WsError, Message};

use mirsim_core::machine::ChoiceKind;
use mirsim_core::session::Event;

use crate::command::{parse_command, Command};
use crate::engine::{graph_json, kind_name, source_json, Engine, DEFAULT_SOURCE_CONTEXT};

pub const PROTO: u64 = 1;
pub const INDEX_HTML: &str = include_str!("../assets/index.html");

const POLL: Duration = Duration::from_millis(15);

type Clients = Arc<Mutex<HashMap<u64, Sender<String>>>>;

struct Job {
    client: u64,
    text: String,
}

pub struct Gateway {
    addr: SocketAddr,
}

impl Gateway {
    /// Binds `addr` (port 0 picks a free port) and serves in background
    /// threads until the process exits.
    pub fn start(engine: Engine, addr: &str) -> io::Result<Gateway> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let clients: Clients = Arc::default();
        let (jobs_tx, jobs_rx) = mpsc::channel::<Job>();
        {
            let clients = Arc::clone(&clients);
            thread::spawn(move || worker(engine, jobs_rx, clients));
        }
        thread::spawn(move || {
            let next = AtomicU64::new(1);
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let id = next.fetch_add(1, Ordering::Relaxed);
                let clients = Arc::clone(&clients);
                let jobs = jobs_tx.clone();
                thread::spawn(move || {
                    let _ = connection(stream, id, clients, jobs);
                });
            }
        });
        Ok(Gateway { addr })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

/// Runs the gateway on the current thread's behalf until the process exits.
pub fn serve(engine: Engine, port: u16) -> io::Result<()> {
    let gw = Gateway::start(engine, &format!("127.0.0.1:{port}"))?;
    println!("ui listening on http://{}/ (websocket at /session)", gw.addr());
    loop {
        thread::park();
    }
}

fn read_head(stream: &TcpStream) -> io::Result<String> {
    let mut buf = [0u8; 4096];
    loop {
        let n = stream.peek(&mut buf)?;
        if n == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        let text = String::from_utf8_lossy(&buf[..n]);
        if let Some(end) = text.find("\r\n\r\n") {
            return Ok(text[..end].to_string());
        }
        if n == buf.len() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "request head too large"));
        }
        thread::sleep(Duration::from_millis(2));
    }
}

fn plain_http(mut stream: TcpStream, head: &str) -> io::Result<()> {
    let mut sink = vec![0u8; head.len() + 4];
    stream.read_exact(&mut sink)?;
    let path = head.split_whitespace().nth(1).unwrap_or("");
    let (status, ctype, body) = match path {
        "/" | "/index.html" => ("200 OK", "text/html; charset=utf-8", INDEX_HTML),
        _ => ("404 Not Found", "text/plain", "not found\n"),
    };
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

fn connection(stream: TcpStream, id: u64, clients: Clients, jobs: Sender<Job>) -> io::Result<()> {
    let head = read_head(&stream)?;
    let upgrade = head.lines().any(|l| {
        let l = l.to_ascii_lowercase();
        l.starts_with("upgrade:") && l.contains("websocket")
    });
    if !upgrade {
        return plain_http(stream, &head);
    }
    if head.split_whitespace().nth(1) != Some("/session") {
        let mut s = stream;
        let _ = s.read(&mut vec![0u8; head.len() + 4]);
        return s.write_all(b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
    }
    let mut ws = tungstenite::accept(stream).map_err(|e| io::Error::new(io::ErrorKind::Other, e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let (tx, rx) = mpsc::channel::<String>();
    clients.lock().unwrap().insert(id, tx);
    let result = pump(&mut ws, id, &rx, &jobs);
    clients.lock().unwrap().remove(&id);
    result
}

fn pump(ws: &mut tungstenite::WebSocket<TcpStream>, id: u64, rx: &Receiver<String>, jobs: &Sender<Job>) -> io::Result<()> {
    let other = |e: WsError| io::Error::new(io::ErrorKind::Other, e.to_string());
    loop {
        while let Ok(out) = rx.try_recv() {
            ws.send(Message::text(out)).map_err(other)?;
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                if jobs.send(Job { client: id, text: text.to_string() }).is_err() {
                    return Ok(());
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(WsError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(WsError::ConnectionClosed | WsError::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(other(e)),
        }
    }
}

fn worker(mut engine: Engine, jobs: Receiver<Job>, clients: Clients) {
    for job in jobs {
        let (reply, events) = handle(&mut engine, &job.text);
        let clients = clients.lock().unwrap();
        // Events go out first so the reply marks the end of a command.
        for e in events {
            let text = e.to_string();
            for c in clients.values() {
                let _ = c.send(text.clone());
            }
        }
        if let Some(c) = clients.get(&job.client) {
            let _ = c.send(reply.to_string());
        }
    }
}

fn error_reply(id: Value, message: impl Into<String>) -> Value {
    json!({ "proto": PROTO, "id": id, "ok": false, "error": message.into() })
}

fn field<'a>(req: &'a Map<String, Value>, name: &str) -> Option<&'a Value> {
    req.get(name).filter(|v| !v.is_null())
}

fn u32_field(req: &Map<String, Value>, name: &str) -> Result<Option<u32>, String> {
    match field(req, name) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .map(Some)
            .ok_or_else(|| format!("field '{name}' must be a non-negative integer")),
    }
}

fn str_field(req: &Map<String, Value>, name: &str) -> Result<String, String> {
    field(req, name).and_then(Value::as_str).map(str::to_string).ok_or_else(|| format!("missing string field '{name}'"))
}

fn count(req: &Map<String, Value>) -> Result<u32, String> {
    match u32_field(req, "count")? {
        Some(0) => Err("field 'count' must be positive".into()),
        n => Ok(n.unwrap_or(1)),
    }
}

/// Maps a request onto the REPL command with the same effect.
fn to_command(cmd: &str, req: &Map<String, Value>) -> Result<Command, String> {
    Ok(match cmd {
        "start" => Command::Start,
        "step" => Command::Step(count(req)?),
        "next" => Command::Next(count(req)?),
        "over" => Command::Over(count(req)?),
        "run" => Command::Run,
        "break" => match parse_command(&format!("break {}", str_field(req, "location")?)) {
            Ok(Some(c)) => c,
            Ok(None) => return Err("usage: break <file:line|@func>".into()),
            Err(e) => return Err(e.0),
        },
        "delete" => Command::Delete(u32_field(req, "breakpoint")?.ok_or("missing field 'breakpoint'")?),
        "backtrace" => Command::Backtrace(u32_field(req, "thread")?),
        "show" => Command::Show(str_field(req, "path")?),
        "states" => Command::States,
        "name" => Command::Name { target: str_field(req, "target")?, alias: str_field(req, "alias")? },
        "rewind" => Command::Rewind(str_field(req, "target")?),
        "trace-load" => Command::TraceLoad(str_field(req, "file")?),
        "trace-save" => Command::TraceSave(str_field(req, "file")?),
        "explore" => Command::Explore(u32_field(req, "max")?.map(|n| n as usize)),
        "thread" => Command::Thread(u32_field(req, "thread")?.ok_or("missing field 'thread'")?),
        "choose" => Command::Choose(u32_field(req, "choice")?.ok_or("missing field 'choice'")?),
        "exec" => match parse_command(&str_field(req, "line")?) {
            Ok(Some(Command::Quit)) => return Err("quit is not available over the gateway".into()),
            Ok(Some(Command::Graph { .. })) => return Err("use the graph request instead".into()),
            Ok(Some(c)) => c,
            Ok(None) => Command::Help,
            Err(e) => return Err(e.0),
        },
        other => return Err(format!("unknown cmd '{other}'")),
    })
}

pub fn event_json(engine: &Engine, e: &Event) -> Value {
    let mut v = match e {
        Event::StateMinted { name, status } => json!({ "event": "state-minted", "name": name, "status": status.to_string() }),
        Event::StateRevisited { name, status } => {
            json!({ "event": "state-revisited", "name": name, "status": status.to_string() })
        }
        Event::Choice { choice, kind, source } => json!({
            "event": "choice", "taken": choice.taken, "total": choice.total, "kind": kind_name(*kind),
            "locked": *source == mirsim_core::session::ChoiceSource::Locked,
        }),
        Event::ChoicePending { total, kind } => {
            let runnable =
                if *kind == ChoiceKind::Thread { engine.session().machine().runnable_threads() } else { Vec::new() };
            json!({ "event": "choice-pending", "total": total, "kind": kind_name(*kind), "runnable": runnable })
        }
        Event::Terminal { status } => json!({ "event": "terminal", "status": status.to_string() }),
        Event::Breakpoint { id } => json!({ "event": "breakpoint", "id": id }),
        Event::Message(m) => json!({ "event": "message", "text": m }),
        Event::BudgetExhausted => json!({ "event": "budget-exhausted" }),
    };
    v["proto"] = json!(PROTO);
    v
}

/// Handles one request text. Returns the reply and the events to broadcast.
pub fn handle(engine: &mut Engine, text: &str) -> (Value, Vec<Value>) {
    let req: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return (error_reply(Value::Null, format!("malformed request: {e}")), Vec::new()),
    };
    let Some(req) = req.as_object() else {
        return (error_reply(Value::Null, "malformed request: expected an object"), Vec::new());
    };
    let id = req.get("id").cloned().unwrap_or(Value::Null);
    if req.get("proto").and_then(Value::as_u64) != Some(PROTO) {
        return (error_reply(id, format!("unsupported proto; this gateway speaks {PROTO}")), Vec::new());
    }
    let Some(cmd) = req.get("cmd").and_then(Value::as_str) else {
        return (error_reply(id, "missing string field 'cmd'"), Vec::new());
    };
    let ok = |result: Value, output: Vec<String>| json!({ "proto": PROTO, "id": id, "ok": true, "result": result, "output": output });
    match cmd {
        "hello" => {
            let p = engine.session().program();
            let functions: Vec<&str> = p.functions.iter().map(|f| f.name.as_str()).collect();
            return (ok(json!({ "functions": functions, "version": env!("CARGO_PKG_VERSION") }), Vec::new()), Vec::new());
        }
        "position" => return (ok(engine.position_json(), vec![engine.position_line()]), Vec::new()),
        "graph" => {
            let path = field(req, "path").and_then(Value::as_str).unwrap_or("$state").to_string();
            let depth = match u32_field(req, "depth") {
                Ok(d) => d.unwrap_or(3),
                Err(e) => return (error_reply(id, e), Vec::new()),
            };
            return match engine.graph(&path, depth) {
                Ok(g) => (ok(graph_json(&g), Vec::new()), Vec::new()),
                Err(e) => (error_reply(id, e), Vec::new()),
            };
        }
        "source" => {
            let ctx = match u32_field(req, "context") {
                Ok(c) => c.unwrap_or(DEFAULT_SOURCE_CONTEXT),
                Err(e) => return (error_reply(id, e), Vec::new()),
            };
            return match engine.source_window(ctx) {
                Ok(w) => (ok(source_json(&w), w.to_string().lines().map(str::to_string).collect()), Vec::new()),
                Err(e) => (error_reply(id, e), Vec::new()),
            };
        }
        _ => {}
    }
    let command = match to_command(cmd, req) {
        Ok(c) => c,
        Err(e) => return (error_reply(id, e), Vec::new()),
    };
    match engine.execute(&command) {
        Ok(o) => {
            let mut events: Vec<Value> = o.events.iter().map(|e| event_json(engine, e)).collect();
            if command.is_mutating() {
                let mut pos = engine.position_json();
                pos["event"] = json!("position");
                pos["proto"] = json!(PROTO);
                events.push(pos);
            }
            (ok(o.result, o.lines), events)
        }
        Err(e) => (error_reply(id, e), Vec::new()),
    }
}

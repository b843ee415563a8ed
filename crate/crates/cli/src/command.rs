use std::fmt;

use mirsim_core::session::BreakpointKind;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Start,
    Step(u32),
    Next(u32),
    Over(u32),
    Run,
    Break(BreakpointKind),
    Delete(u32),
    Backtrace(Option<u32>),
    Source(Option<u32>),
    Show(String),
    States,
    Name { target: String, alias: String },
    Rewind(String),
    TraceLoad(String),
    TraceSave(String),
    Explore(Option<usize>),
    Graph { path: String, depth: u32, out: String },
    Thread(u32),
    Choose(u32),
    Help,
    Quit,
}

impl Command {
    /// Commands that execute guest code or move the session in time.
    pub fn is_mutating(&self) -> bool {
        matches!(
            self,
            Command::Start
                | Command::Step(_)
                | Command::Next(_)
                | Command::Over(_)
                | Command::Run
                | Command::Rewind(_)
                | Command::TraceLoad(_)
                | Command::Thread(_)
                | Command::Choose(_)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const VERBS: &[(&str, &str)] = &[
    ("start", "start"),
    ("step", "step [n]"),
    ("next", "next [n]"),
    ("over", "over [n]"),
    ("run", "run"),
    ("break", "break <file:line|@func>"),
    ("delete", "delete <break-id>"),
    ("backtrace", "backtrace [thread]"),
    ("source", "source [context]"),
    ("show", "show <path>"),
    ("states", "states"),
    ("name", "name <#n> <#alias>"),
    ("rewind", "rewind <#name>"),
    ("trace", "trace load <file> | trace save <file>"),
    ("explore", "explore [max]"),
    ("graph", "graph <path> <depth> <out.dot>"),
    ("thread", "thread <i>"),
    ("choose", "choose <i>"),
    ("help", "help"),
    ("quit", "quit"),
];

/// Splits on whitespace; double quotes group words and support `\"`/`\\`.
pub fn tokenize(line: &str) -> Result<Vec<String>, UsageError> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        let mut tok = String::new();
        if c == '"' {
            chars.next();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some(e) => tok.push(e),
                        None => return Err(UsageError("unterminated quote".into())),
                    },
                    Some(ch) => tok.push(ch),
                    None => return Err(UsageError("unterminated quote".into())),
                }
            }
        } else {
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() {
                    break;
                }
                tok.push(ch);
                chars.next();
            }
        }
        out.push(tok);
    }
    Ok(out)
}

fn usage(verb: &str) -> UsageError {
    let form = VERBS.iter().find(|(v, _)| *v == verb).map_or(verb, |(_, u)| u);
    UsageError(format!("usage: {form}"))
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur.push(sub.min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

fn unknown(verb: &str) -> UsageError {
    let mut close: Vec<&str> = VERBS
        .iter()
        .map(|(v, _)| *v)
        .filter(|v| v.starts_with(verb) || edit_distance(v, verb) <= 2)
        .collect();
    if close.is_empty() {
        close = VERBS.iter().map(|(v, _)| *v).collect();
    }
    UsageError(format!("unknown command '{verb}'; try: {}", close.join(", ")))
}

fn number<T: std::str::FromStr>(verb: &str, s: &str) -> Result<T, UsageError> {
    s.parse().map_err(|_| usage(verb))
}

fn count(verb: &str, args: &[String]) -> Result<u32, UsageError> {
    match args {
        [] => Ok(1),
        [n] => match number::<u32>(verb, n)? {
            0 => Err(usage(verb)),
            n => Ok(n),
        },
        _ => Err(usage(verb)),
    }
}

fn breakpoint(spec: &str) -> Result<BreakpointKind, UsageError> {
    if let Some(name) = spec.strip_prefix('@') {
        if name.is_empty() {
            return Err(usage("break"));
        }
        return Ok(BreakpointKind::Function(name.to_string()));
    }
    let (file, line) = spec.rsplit_once(':').ok_or_else(|| usage("break"))?;
    let line: u32 = number("break", line)?;
    if file.is_empty() || line == 0 {
        return Err(usage("break"));
    }
    Ok(BreakpointKind::Line { file: file.to_string(), line })
}

/// Parses one command line. Blank lines and `#` comments give `None`.
pub fn parse_command(line: &str) -> Result<Option<Command>, UsageError> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with("# ") || trimmed == "#" {
        return Ok(None);
    }
    let toks = tokenize(trimmed)?;
    let Some((verb, args)) = toks.split_first() else { return Ok(None) };
    let verb = verb.as_str();
    let cmd = match (verb, args) {
        ("start", []) => Command::Start,
        ("step", a) => Command::Step(count(verb, a)?),
        ("next", a) => Command::Next(count(verb, a)?),
        ("over", a) => Command::Over(count(verb, a)?),
        ("run", []) => Command::Run,
        ("break", [spec]) => Command::Break(breakpoint(spec)?),
        ("delete", [id]) => Command::Delete(number(verb, id)?),
        ("backtrace", []) => Command::Backtrace(None),
        ("backtrace", [t]) => Command::Backtrace(Some(number(verb, t)?)),
        ("source", []) => Command::Source(None),
        ("source", [n]) => Command::Source(Some(number(verb, n)?)),
        ("show", [path]) => Command::Show(path.clone()),
        ("states", []) => Command::States,
        ("name", [target, alias]) => Command::Name { target: target.clone(), alias: alias.clone() },
        ("rewind", [target]) => Command::Rewind(target.clone()),
        ("trace", [sub, file]) if sub == "load" => Command::TraceLoad(file.clone()),
        ("trace", [sub, file]) if sub == "save" => Command::TraceSave(file.clone()),
        ("explore", []) => Command::Explore(None),
        ("explore", [n]) => Command::Explore(Some(number(verb, n)?)),
        ("graph", [path, depth, out]) => {
            Command::Graph { path: path.clone(), depth: number(verb, depth)?, out: out.clone() }
        }
        ("thread", [i]) => Command::Thread(number(verb, i)?),
        ("choose", [i]) => Command::Choose(number(verb, i)?),
        ("help", []) => Command::Help,
        ("quit", []) => Command::Quit,
        (v, _) if VERBS.iter().any(|(known, _)| *known == v) => return Err(usage(v)),
        (v, _) => return Err(unknown(v)),
    };
    Ok(Some(cmd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verbs() {
        assert_eq!(parse_command("rewind #start").unwrap(), Some(Command::Rewind("#start".into())));
        assert_eq!(parse_command("step 3").unwrap(), Some(Command::Step(3)));
        assert_eq!(parse_command("step").unwrap(), Some(Command::Step(1)));
        assert_eq!(parse_command("  next 2 ").unwrap(), Some(Command::Next(2)));
        assert_eq!(
            parse_command("break m.c:12").unwrap(),
            Some(Command::Break(BreakpointKind::Line { file: "m.c".into(), line: 12 }))
        );
        assert_eq!(parse_command("break @worker").unwrap(), Some(Command::Break(BreakpointKind::Function("worker".into()))));
        assert_eq!(
            parse_command(r#"graph "$state" 3 "out file.dot""#).unwrap(),
            Some(Command::Graph { path: "$state".into(), depth: 3, out: "out file.dot".into() })
        );
        assert_eq!(parse_command("trace save t.trace").unwrap(), Some(Command::TraceSave("t.trace".into())));
        assert_eq!(parse_command("").unwrap(), None);
        assert_eq!(parse_command("# a comment").unwrap(), None);
    }

    #[test]
    fn errors() {
        let e = parse_command("frobnicate").unwrap_err();
        assert!(e.0.starts_with("unknown command 'frobnicate'; try:"), "{e}");
        assert!(parse_command("stpe").unwrap_err().0.contains("step"));
        assert_eq!(parse_command("step x").unwrap_err().0, "usage: step [n]");
        assert_eq!(parse_command("step 0").unwrap_err().0, "usage: step [n]");
        assert!(parse_command("break nowhere").is_err());
        assert!(parse_command("trace frob x").is_err());
        assert!(parse_command("show \"open").is_err());
        assert!(parse_command("rewind").is_err());
    }

    #[test]
    fn quoting() {
        assert_eq!(tokenize(r#"a "b c" "d\"e""#).unwrap(), vec!["a", "b c", "d\"e"]);
    }
}

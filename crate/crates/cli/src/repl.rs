use std::io::{self, BufRead, Write};

use crate::command::parse_command;
use crate::engine::Engine;

#[derive(Clone, Copy, Debug, Default)]
pub struct ReplOptions {
    /// Echo each command as `> cmd` (batch transcripts).
    pub echo: bool,
    pub prompt: bool,
    /// Stop at the first failing command.
    pub stop_on_error: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReplSummary {
    pub commands: usize,
    pub errors: usize,
    pub quit: bool,
}

pub fn banner() -> String {
    format!("mirsim {}", env!("CARGO_PKG_VERSION"))
}

/// Reads commands line by line, executing each against the engine.
pub fn run<R: BufRead, W: Write>(
    engine: &mut Engine,
    input: R,
    out: &mut W,
    opts: ReplOptions,
) -> io::Result<ReplSummary> {
    let mut summary = ReplSummary::default();
    let mut lines = input.lines();
    loop {
        if opts.prompt {
            write!(out, "(mirsim) ")?;
            out.flush()?;
        }
        let Some(line) = lines.next() else { break };
        let line = line?;
        let parsed = parse_command(&line);
        if opts.echo && !matches!(parsed, Ok(None)) {
            writeln!(out, "> {}", line.trim())?;
        }
        let cmd = match parsed {
            Ok(Some(c)) => c,
            Ok(None) => continue,
            Err(e) => {
                summary.errors += 1;
                writeln!(out, "error: {e}")?;
                if opts.stop_on_error {
                    break;
                }
                continue;
            }
        };
        summary.commands += 1;
        match engine.execute(&cmd) {
            Ok(o) => {
                for l in &o.lines {
                    writeln!(out, "{l}")?;
                }
                if o.quit {
                    summary.quit = true;
                    break;
                }
            }
            Err(e) => {
                summary.errors += 1;
                writeln!(out, "error: {e}")?;
                if opts.stop_on_error {
                    break;
                }
            }
        }
    }
    Ok(summary)
}

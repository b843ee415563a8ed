use std::fs::File;
use std::io::{self, BufReader, IsTerminal};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;

use mirsim_core::debug::SourceMap;
use mirsim_core::machine::Status;
use mirsim_core::mir::parse_program;

use mirsim_cli::command::Command;
use mirsim_cli::engine::Engine;
use mirsim_cli::{gateway, repl};

/// Reversible simulator and debugger for MIR programs.
#[derive(Parser, Debug)]
#[command(name = "mirsim", version)]
struct Args {
    /// Program to load (.mir).
    program: PathBuf,
    /// Run commands from a script instead of standard input.
    #[arg(long, value_name = "SCRIPT")]
    batch: Option<PathBuf>,
    /// Replay a choice trace right after loading.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Serve the browser UI on this port (0 picks one) instead of reading commands.
    #[arg(long, value_name = "PORT")]
    ui: Option<u16>,
    /// Directory searched for source files; may be repeated.
    #[arg(long = "source-path", value_name = "DIR")]
    source_path: Vec<PathBuf>,
    /// Stop a batch at the first failing command.
    #[arg(long)]
    strict: bool,
}

fn search_path(args: &Args) -> Vec<PathBuf> {
    let mut dirs = args.source_path.clone();
    if let Some(env) = std::env::var_os("MIRSIM_SOURCE_PATH") {
        dirs.extend(std::env::split_paths(&env));
    }
    let parent = args.program.parent().map(PathBuf::from).unwrap_or_default();
    dirs.push(if parent.as_os_str().is_empty() { PathBuf::from(".") } else { parent });
    dirs
}

fn main() -> ExitCode {
    let args = Args::parse();
    let text = match std::fs::read_to_string(&args.program) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("mirsim: cannot read {}: {e}", args.program.display());
            return ExitCode::from(2);
        }
    };
    let program = match parse_program(&text) {
        Ok(p) => Arc::new(p),
        Err(e) => {
            eprintln!("{}:{}:{}: {}", args.program.display(), e.line, e.col, e.message);
            return ExitCode::from(2);
        }
    };
    for w in &program.warnings {
        eprintln!("{}: warning: {w}", args.program.display());
    }
    let mut engine = Engine::new(program, SourceMap::new(search_path(&args)));
    if let Some(trace) = &args.trace {
        let cmd = Command::TraceLoad(trace.display().to_string());
        match engine.execute(&cmd) {
            Ok(o) => o.lines.iter().for_each(|l| println!("{l}")),
            Err(e) => {
                eprintln!("mirsim: {e}");
                return ExitCode::from(2);
            }
        }
    }
    if let Some(port) = args.ui {
        if let Err(e) = gateway::serve(engine, port) {
            eprintln!("mirsim: ui: {e}");
            return ExitCode::from(2);
        }
        return ExitCode::SUCCESS;
    }

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let summary = match &args.batch {
        Some(path) => {
            let file = match File::open(path) {
                Ok(f) => f,
                Err(e) => {
                    eprintln!("mirsim: cannot read {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            };
            let opts = repl::ReplOptions { echo: true, prompt: false, stop_on_error: args.strict };
            repl::run(&mut engine, BufReader::new(file), &mut out, opts)
        }
        None => {
            let tty = io::stdin().is_terminal();
            if tty {
                println!("{}", repl::banner());
            }
            let opts = repl::ReplOptions { echo: !tty, prompt: tty, stop_on_error: args.strict };
            repl::run(&mut engine, io::stdin().lock(), &mut out, opts)
        }
    };
    let summary = match summary {
        Ok(s) => s,
        Err(e) => {
            eprintln!("mirsim: {e}");
            return ExitCode::from(2);
        }
    };
    if matches!(engine.session().status(), Status::Faulted { .. }) {
        ExitCode::from(1)
    } else if summary.errors > 0 && args.strict {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

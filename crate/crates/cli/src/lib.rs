pub mod command;
pub mod engine;
pub mod gateway;
pub mod repl;

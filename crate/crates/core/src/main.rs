use std::io::IsTerminal;
use std::process::ExitCode;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing::Level::INFO)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let code = mml_core::commands::main_with_args(std::env::args_os(), &mut std::io::stdout().lock());
    ExitCode::from(code as u8)
}

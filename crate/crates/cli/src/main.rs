use std::process::ExitCode;

fn main() -> ExitCode {
    let code = dpgraph_cli::main_with(std::env::args());
    ExitCode::from(u8::try_from(code).unwrap_or(1))
}

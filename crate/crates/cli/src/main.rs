use std::process::ExitCode;

fn main() -> ExitCode {
    gldn_cli::main_with(std::env::args_os())
}

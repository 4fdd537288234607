use std::process::ExitCode;

fn main() -> ExitCode {
    bwe_cli::main_with(std::env::args_os())
}

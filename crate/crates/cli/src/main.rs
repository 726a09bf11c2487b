use std::process::ExitCode;

fn main() -> ExitCode {
    hetaug_cli::run(std::env::args_os())
}

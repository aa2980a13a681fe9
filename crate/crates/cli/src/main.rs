use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(lucid_cli::run(std::env::args_os()) as u8)
}

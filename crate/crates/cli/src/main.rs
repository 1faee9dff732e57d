use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(tdm_cli::run(std::env::args_os()))
}

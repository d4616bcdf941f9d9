use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(datransunet::cli::run(std::env::args_os()))
}

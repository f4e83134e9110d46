use std::process::ExitCode;

fn main() -> ExitCode {
    specvm::cli::main(std::env::args_os())
}

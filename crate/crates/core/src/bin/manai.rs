use std::process::ExitCode;

fn main() -> ExitCode {
    manai::cli::main()
}

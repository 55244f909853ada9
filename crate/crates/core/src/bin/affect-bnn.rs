use std::process::ExitCode;

fn main() -> ExitCode {
    affect_bnn::cli::main()
}

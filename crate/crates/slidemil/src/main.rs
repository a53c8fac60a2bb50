use std::process::ExitCode;

fn main() -> ExitCode {
    slidemil::cli::run()
}

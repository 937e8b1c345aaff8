use std::io;
use std::panic;
use std::process::ExitCode;

use fracspde_cli::{run, EXIT_OTHER};

fn main() -> ExitCode {
    let code = panic::catch_unwind(|| run(std::env::args_os(), &mut io::stdout(), &mut io::stderr()))
        .unwrap_or(EXIT_OTHER);
    ExitCode::from(code)
}

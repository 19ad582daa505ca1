use clap::Parser;
use unibridge_cli::Cli;

fn main() {
    reset_sigpipe();
    let cli = Cli::parse();
    if let Err(e) = unibridge_cli::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code);
    }
}

/// Dying on a closed pipe (`unibridge report ... | head`) should end the
/// process quietly, not panic mid-write.
#[cfg(unix)]
fn reset_sigpipe() {
    use std::os::raw::c_int;
    const SIGPIPE: c_int = 13;
    const SIG_DFL: usize = 0;
    unsafe extern "C" {
        fn signal(signum: c_int, handler: usize) -> usize;
    }
    // SAFETY: called before any other threads exist
    unsafe {
        signal(SIGPIPE, SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

use clap::Parser;
use sysid::fail::exit_code;
use sysid::{run, Cli};

fn main() {
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err) as i32);
    }
}

//! Binary entry point for the `danlab` command.

fn main() {
    std::process::exit(danlab::cli::run());
}

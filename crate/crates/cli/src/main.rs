fn main() {
    std::process::exit(neurosem_cli::run_from(std::env::args_os()));
}

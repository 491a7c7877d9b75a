fn main() {
    std::process::exit(rolloutsim::cli::main_from(std::env::args_os()));
}

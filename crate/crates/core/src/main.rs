fn main() {
    stylebooth::cli::init_tracing();
    std::process::exit(stylebooth::cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(ftn::cli::main_with(std::env::args_os()));
}

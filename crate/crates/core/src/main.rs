fn main() {
    std::process::exit(occnet::cli::main_with(std::env::args_os()));
}

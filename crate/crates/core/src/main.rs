fn main() {
    std::process::exit(mlvgm::cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(mindkit_bench::cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(mambo_bench::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(bandit_meta::cli::main_with_args(std::env::args_os()));
}

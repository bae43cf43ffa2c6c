fn main() {
    std::process::exit(mlmc_sdde::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(rwm_mpc::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(scmm_core::cli::dispatch(std::env::args_os()));
}

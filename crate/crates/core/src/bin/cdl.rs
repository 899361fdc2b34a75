fn main() {
    std::process::exit(cdl_core::cli::run(std::env::args_os()));
}

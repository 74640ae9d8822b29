fn main() {
    if let Err(e) = glc_core::cli::run(std::env::args_os()) {
        eprintln!("{}", e.line());
        std::process::exit(e.code);
    }
}

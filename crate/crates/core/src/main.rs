fn main() {
    let code = thsmooth_core::cli::run(std::env::args_os());
    std::process::exit(code);
}

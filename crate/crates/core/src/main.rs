fn main() {
    let code = litefat::cli::run_command(std::env::args_os());
    std::process::exit(code);
}

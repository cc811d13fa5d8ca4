fn main() {
    let code = cochpl_cli::run_cli(std::env::args_os());
    std::process::exit(code);
}

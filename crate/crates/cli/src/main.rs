fn main() {
    let code = jointformer_cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}

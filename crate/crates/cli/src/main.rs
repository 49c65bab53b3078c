fn main() {
    std::process::exit(scalevar_cli::run(std::env::args_os()));
}

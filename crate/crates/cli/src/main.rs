fn main() {
    std::process::exit(prlab_cli::main_with_args(std::env::args_os()));
}

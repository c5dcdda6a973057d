fn main() {
    std::process::exit(capc_cli::cli_main(std::env::args_os()));
}

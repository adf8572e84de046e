fn main() {
    std::process::exit(oran_diffql_cli::main_with_args(std::env::args_os()));
}

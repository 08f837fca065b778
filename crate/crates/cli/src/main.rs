fn main() {
    std::process::exit(sparse_chaos_cli::run(std::env::args_os()));
}

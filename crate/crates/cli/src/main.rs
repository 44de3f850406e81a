fn main() {
    std::process::exit(metaens_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(depstream_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(kslt_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(miditune_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(rankforge_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(marrowcast_cli::run(std::env::args_os()));
}

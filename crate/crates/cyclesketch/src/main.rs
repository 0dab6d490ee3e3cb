fn main() {
    std::process::exit(cyclesketch::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(repsub::cli::run(std::env::args_os()));
}

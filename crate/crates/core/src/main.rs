fn main() {
    std::process::exit(semparse::cli::dispatch(std::env::args()));
}

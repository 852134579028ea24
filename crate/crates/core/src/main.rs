fn main() {
    std::process::exit(deltaproduct::cli::dispatch(std::env::args_os()));
}

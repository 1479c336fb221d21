fn main() {
    std::process::exit(guie::cli::dispatch(std::env::args_os()));
}

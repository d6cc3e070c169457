fn main() {
    std::process::exit(prefgrid::cli::dispatch(std::env::args_os()));
}

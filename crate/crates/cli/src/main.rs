fn main() {
    std::process::exit(detailfusion_cli::dispatch(std::env::args_os()));
}

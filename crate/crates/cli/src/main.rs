fn main() {
    std::process::exit(iriscale_cli::dispatch(std::env::args_os().skip(1)));
}

fn main() {
    std::process::exit(gapgrid::cli::run(std::env::args_os()));
}

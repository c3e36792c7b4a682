fn main() {
    std::process::exit(fcreg::pipeline::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(volterra_rff_cli::run(std::env::args_os()));
}

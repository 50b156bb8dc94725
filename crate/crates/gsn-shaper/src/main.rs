fn main() {
    std::process::exit(gsn_shaper::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(gtimm::cli::run(std::env::args_os().collect()));
}

fn main() {
    std::process::exit(dpspg::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(tdtd_cli::run(std::env::args_os().skip(1)));
}

fn main() {
    std::process::exit(hvp::harness::main_with_args(std::env::args_os()));
}

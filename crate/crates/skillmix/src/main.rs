fn main() {
    std::process::exit(skillmix::cli::main_with_args(std::env::args_os()));
}

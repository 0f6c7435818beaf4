fn main() {
    std::process::exit(o2olab_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(obsmatch_cli::run(std::env::args_os()));
}

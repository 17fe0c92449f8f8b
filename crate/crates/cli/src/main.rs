fn main() {
    std::process::exit(lesionpipe_cli::run(std::env::args_os()));
}

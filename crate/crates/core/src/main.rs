fn main() {
    std::process::exit(revsum::cli::cli_main(std::env::args_os()));
}

fn main() {
    std::process::exit(bitsnn::cli::run(std::env::args_os()));
}

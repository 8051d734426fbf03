fn main() {
    std::process::exit(mctailor::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(psydenoise::cli::run(std::env::args_os()));
}

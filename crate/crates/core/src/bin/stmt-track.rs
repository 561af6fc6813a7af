fn main() {
    std::process::exit(stmt_track::cli::run(std::env::args_os()));
}

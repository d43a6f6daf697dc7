fn main() {
    if let Err(e) = avdet::cli::run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

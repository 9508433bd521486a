fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Err(err) = mixbit::cli::dispatch(&args) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

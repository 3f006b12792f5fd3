fn main() {
    env_logger::init();
    match ligp::cli::run() {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(ligp::cli::exit_code(&err));
        }
    }
}

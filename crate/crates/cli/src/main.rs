fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(mvsde_cli::run(&args));
}

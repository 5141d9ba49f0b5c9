fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(ovformer_cli::run(&args));
}

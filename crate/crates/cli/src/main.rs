fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(vulgraph_cli::run_command(&argv));
}

fn main() {
    let code = affinity_lab::cli::run(std::env::args_os());
    std::process::exit(code);
}

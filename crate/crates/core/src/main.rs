fn main() {
    std::process::exit(m3hg::cli::main_with_env());
}

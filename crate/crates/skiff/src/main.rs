fn main() {
    std::process::exit(skiff::cli::main_with_process_env());
}

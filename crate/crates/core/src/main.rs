fn main() {
    std::process::exit(sdad_core::cli::main_with_env());
}

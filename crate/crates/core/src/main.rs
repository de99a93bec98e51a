fn main() {
    std::process::exit(nuseg::cli::main_entry(std::env::args_os()));
}

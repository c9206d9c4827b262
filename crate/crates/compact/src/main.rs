fn main() {
    std::process::exit(compact::cli::main_entry());
}

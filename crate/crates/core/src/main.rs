fn main() {
    std::process::exit(interframe::run_cli());
}

fn main() {
    std::process::exit(sartree::harness::run_cli());
}

fn main() {
    std::process::exit(jointcast::cli_main());
}

fn main() {
    env_logger::init();
    std::process::exit(resprune_core::cli_main());
}

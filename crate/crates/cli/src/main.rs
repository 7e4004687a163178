fn main() {
    std::process::exit(layerprune_cli::cli_main(std::env::args_os()));
}

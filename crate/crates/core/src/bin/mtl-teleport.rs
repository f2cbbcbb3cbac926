fn main() {
    std::process::exit(mtl_teleport::harness::cli_main(std::env::args_os()));
}

fn main() {
    std::process::exit(fisheye_ba::cli::run(std::env::args_os()));
}

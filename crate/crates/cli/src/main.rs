fn main() {
    std::process::exit(orbit_recover::run(std::env::args_os()));
}

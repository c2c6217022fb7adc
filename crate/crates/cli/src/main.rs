fn main() {
    std::process::exit(panocal::run(std::env::args_os()));
}

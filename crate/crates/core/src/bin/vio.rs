fn main() {
    eprintln!("vio: command-line interface not wired up yet");
    std::process::exit(2);
}

fn main() {
    std::process::exit(snd_cli::run_command(std::env::args_os()));
}

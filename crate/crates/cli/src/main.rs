fn main() -> std::process::ExitCode {
    kinedecode_cli::run(std::env::args_os())
}

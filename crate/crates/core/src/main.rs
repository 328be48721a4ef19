fn main() -> std::process::ExitCode {
    websal::cli::main()
}

fn main() -> std::process::ExitCode {
    bevstream::cli::main()
}

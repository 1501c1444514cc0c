fn main() -> std::process::ExitCode {
    fflab::cli::main()
}

fn main() -> std::process::ExitCode {
    detstream::cli::main()
}

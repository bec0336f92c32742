fn main() -> std::process::ExitCode {
    safecast::cli::main()
}

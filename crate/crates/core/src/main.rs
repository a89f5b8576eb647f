fn main() -> std::process::ExitCode {
    adacare::cli::main()
}

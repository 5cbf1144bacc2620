fn main() -> std::process::ExitCode {
    balancing::cli::main()
}

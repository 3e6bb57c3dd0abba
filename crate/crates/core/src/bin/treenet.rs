fn main() -> std::process::ExitCode {
    treenet::cli::main()
}

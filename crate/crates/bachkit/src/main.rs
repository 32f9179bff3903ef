fn main() -> std::process::ExitCode {
    bachkit::cli::main()
}

fn main() -> std::process::ExitCode {
    wsd_core::cli::main()
}

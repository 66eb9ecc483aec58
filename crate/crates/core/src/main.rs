fn main() -> std::process::ExitCode {
    progress_tubes::cli::main_entry()
}

fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(selfcomp::cli::main_from(std::env::args_os()))
}

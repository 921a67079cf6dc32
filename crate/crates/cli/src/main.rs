use std::process::ExitCode;

fn main() -> ExitCode {
    let status = kbqa_cli::main_with(
        std::env::args_os().collect(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    ExitCode::from(status as u8)
}

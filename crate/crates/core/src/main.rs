use std::process::ExitCode;

fn main() -> ExitCode {
    let result = std::panic::catch_unwind(|| gamma_guard::cli::run(std::env::args_os()));
    match result {
        Ok(out) => {
            print!("{}", out.stdout);
            eprint!("{}", out.stderr);
            ExitCode::from(out.status.code())
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(3)
        }
    }
}

use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ISF_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let mut stdout = std::io::stdout().lock();
    match isformer::cli::run(std::env::args_os(), &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error:{}:{msg}", e.category());
            ExitCode::FAILURE
        }
    }
}

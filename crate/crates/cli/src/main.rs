use std::process::ExitCode;

use clap::Parser;
use mmfuse_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("MMFUSE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("MMFUSE_THREADS ignored: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already carry their cause in the message.
            let (kind, message) = match e.downcast_ref::<mmfuse_core::Error>() {
                Some(core) => (core.kind(), core.to_string()),
                None => ("cli", format!("{e:#}")),
            };
            let line = serde_json::json!({ "error": kind, "message": message });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

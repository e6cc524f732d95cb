use std::path::PathBuf;
use std::process::ExitCode;

use artireg_service::{listen, run, AppState, ServiceConfig, ServiceError};
use clap::Parser;
use log::{error, info};

/// Serve registration sessions over HTTP.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Service configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured port.
    #[arg(long)]
    port: Option<u16>,
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    info!("shutting down");
}

async fn start(args: Args) -> Result<(), ServiceError> {
    let mut cfg = ServiceConfig::load(&args.config)?;
    if let Some(port) = args.port {
        cfg.port = port;
    }
    let state = AppState::from_config(&cfg)?;
    let listener = listen(&cfg.host, cfg.port).await?;
    info!("listening on {}", listener.local_addr()?);
    run(listener, state, shutdown_signal()).await
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match start(Args::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            match e {
                ServiceError::BadConfig(_) => ExitCode::from(2),
                ServiceError::PortInUse(_) => ExitCode::from(3),
                ServiceError::Io(_) => ExitCode::FAILURE,
            }
        }
    }
}

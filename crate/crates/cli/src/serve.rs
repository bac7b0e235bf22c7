//! `crowdcal serve`: the long-running process. Builds the service from a
//! config file, layers on environment and flag overrides (flags win), then
//! runs the HTTP server, the notification sender, and the window finalizer
//! until interrupted.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use chrono::Utc;
use clap::Args;
use crowdcal_service::{
    build_service, router, run_finalizer, run_notifier, Service, ServiceConfig,
};

use crate::{config_failure, Failure};

#[derive(Args)]
pub struct ServeArgs {
    /// Service config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Listen address, overriding the config file.
    #[arg(long)]
    listen: Option<String>,
    /// Anonymization salt (hex), overriding config and the SALT env var.
    #[arg(long)]
    salt: Option<String>,
    /// Finalizer poll interval in ms, overriding config and POLL_INTERVAL_MS.
    #[arg(long)]
    poll_interval_ms: Option<String>,
    /// Window length in seconds, overriding config and WINDOW_SECONDS.
    #[arg(long)]
    window_seconds: Option<String>,
}

pub fn run(args: ServeArgs) -> Result<(), Failure> {
    let mut config = ServiceConfig::from_file(&args.config).map_err(config_failure)?;
    config.apply_env().map_err(config_failure)?;
    config
        .apply_overrides(args.salt, args.poll_interval_ms, args.window_seconds)
        .map_err(config_failure)?;
    if let Some(listen) = args.listen {
        config.listen = listen;
    }

    let runtime = tokio::runtime::Runtime::new()
        .context("starting async runtime")
        .map_err(config_failure)?;
    runtime.block_on(serve(config)).map_err(config_failure)
}

async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let listen = config.listen.clone();
    let policy = config.notify_policy();
    let grace = config.finalization_grace_seconds;
    let poll = Duration::from_millis(config.poll_interval_ms);

    let Service {
        state,
        notify_rx,
        meta,
        ..
    } = build_service(config, Utc::now())?;
    tracing::info!(
        origin = %crowdcal_core::model::format_timestamp(meta.origin),
        window_seconds = meta.window_seconds,
        "store timing resolved"
    );

    tokio::spawn(run_notifier(notify_rx, policy, state.metrics.clone()));
    tokio::spawn(run_finalizer(state.clone(), grace, poll));

    let listener = tokio::net::TcpListener::bind(&listen)
        .await
        .with_context(|| format!("binding {listen}"))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await?;
    Ok(())
}

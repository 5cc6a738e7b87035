use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use ccrs_server::{build_state, router, spawn_maintenance, ServerConfig};
use clap::Parser;
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "ccrs-server", version, about = "Container runner HTTP server")]
struct Args {
    /// TOML configuration file.
    #[arg(long, env = "CCRS_CONFIG")]
    config: Option<PathBuf>,
    /// Listen address, overriding the configuration.
    #[arg(long)]
    listen: Option<std::net::SocketAddr>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();

    let mut cfg = match &args.config {
        Some(path) => ServerConfig::load(path)?,
        None => ServerConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(addr) = args.listen {
        cfg.listen_address = addr;
    }

    let state = build_state(&cfg)?;
    let report = state.health.check();
    if !report.healthy() {
        tracing::warn!(?report, "backend health check failed");
    }
    let gc = spawn_maintenance(state.clone(), Duration::from_secs(cfg.gc.interval_secs));
    let audit = state.jobs.clone();

    let listener = tokio::net::TcpListener::bind(cfg.listen_address)
        .await
        .with_context(|| format!("binding {}", cfg.listen_address))?;
    tracing::info!(addr = %cfg.listen_address, backends = ?cfg.enabled_backends, "listening");
    axum::serve(
        listener,
        router(state).into_make_service_with_connect_info::<std::net::SocketAddr>(),
    )
    .with_graceful_shutdown(shutdown())
    .await?;

    gc.abort();
    audit.audit().close();
    Ok(())
}

async fn shutdown() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    tracing::info!("shutting down");
}

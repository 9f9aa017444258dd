//! `maskguide serve`: the HTTP job service.

use std::path::PathBuf;

use clap::Args;
use maskguide_service::{http, Service, ServiceConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Service config JSON (storage root, workers, event cadence, backends).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured port; 0 picks a free one.
    #[arg(long)]
    pub port: Option<u16>,
}

pub fn run(args: &ServeArgs) -> Result<()> {
    let mut config = ServiceConfig::load(&args.config)
        .map_err(|e| CliError::Usage(format!("--config {}: {e}", args.config.display())))?
        .with_env();
    if let Some(port) = args.port {
        config.port = port;
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io("starting runtime", e))?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", config.host, config.port);
        let listener = match tokio::net::TcpListener::bind(&addr).await {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => return Err(CliError::PortInUse { addr }),
            Err(e) => return Err(CliError::io(format!("binding {addr}"), e)),
        };
        let bound = listener.local_addr().map_err(|e| CliError::io("reading bound address", e))?;
        let service = Service::open(config)?;
        println!("listening on http://{bound}");
        eprintln!("storage: {}", service.storage_root().display());
        http::serve(listener, service, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::io("serving", e))?;
        eprintln!("shut down");
        Ok(())
    })
}

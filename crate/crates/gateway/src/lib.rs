//! Composition root: HTTP API with role checks over the data plane, operator
//! configuration and the server lifecycle.

pub mod api;
pub mod cli;
pub mod config;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use pdp_core::ids::IdGenerator;
use pdp_core::plane::DataPlane;
use pdp_core::Timestamp;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use config::Config;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("address {0} is already in use")]
    AddressInUse(String),
    #[error("cannot listen on {addr}: {reason}")]
    Listen { addr: String, reason: String },
    #[error(transparent)]
    Core(#[from] pdp_core::Error),
    #[error(transparent)]
    Scan(#[from] pdp_scanner::ScanError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(chrono::Utc::now)
}

/// Shared by every handler. The plane lock is the single serialization point
/// for journal appends.
#[derive(Clone)]
pub struct AppState {
    pub plane: Arc<Mutex<DataPlane>>,
    pub config: Arc<Config>,
    pub clock: Clock,
}

impl AppState {
    pub fn new(plane: DataPlane, config: Config, clock: Clock) -> Self {
        Self {
            plane: Arc::new(Mutex::new(plane)),
            config: Arc::new(config),
            clock,
        }
    }
}

/// Opens the configured storage, replaying its journal.
pub fn open_plane(config: &Config, now: Timestamp) -> Result<DataPlane, GatewayError> {
    let plane = DataPlane::open(
        config.plane_config()?,
        Some(&config.storage_dir),
        IdGenerator::from_entropy(),
        now,
    )?;
    Ok(plane)
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: AppState,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl ServerHandle {
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.await.map_err(std::io::Error::other)?
    }

    /// Runs until the server stops on its own or the process is interrupted.
    pub async fn wait(mut self) -> std::io::Result<()> {
        tokio::select! {
            r = &mut self.task => r.map_err(std::io::Error::other)?,
            _ = tokio::signal::ctrl_c() => self.shutdown().await,
        }
    }
}

/// Binds first, then opens storage, so a busy address never touches the journal.
pub async fn serve(config: Config, clock: Clock) -> Result<ServerHandle, GatewayError> {
    let listener = TcpListener::bind(&config.listen_address)
        .await
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::AddrInUse {
                GatewayError::AddressInUse(config.listen_address.clone())
            } else {
                GatewayError::Listen {
                    addr: config.listen_address.clone(),
                    reason: e.to_string(),
                }
            }
        })?;
    let addr = listener.local_addr()?;
    let plane = open_plane(&config, clock())?;
    let state = AppState::new(plane, config, clock);
    let app = api::router(state.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(ServerHandle {
        addr,
        state,
        shutdown: Some(tx),
        task,
    })
}

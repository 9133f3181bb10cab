//! Real-time render service: one WebSocket session per viewer, plus the
//! viewer's static files.
//!
//! Each session owns a single render worker. Incoming poses overwrite a
//! one-slot mailbox, so the worker always renders the freshest pose and
//! older unrendered poses are dropped.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{Html, IntoResponse};
use axum::routing::get;
use axum::Router;
use fwd_core::io::codec::encode_png;
use fwd_core::io::SceneBundle;
use fwd_core::pipeline::{CachedView, FwdModel, ModelVariant};
use fwd_core::Result;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, watch};
use tower_http::services::ServeDir;

use crate::protocol::{code, encode_frame, ClientMessage, FrameHeader, ProtocolError, ServerMessage, FLAG_ZERO_COVERAGE};

const FALLBACK_INDEX: &str = "<!doctype html><title>fwd</title><p>Render service is up. Connect a viewer to <code>/ws</code>.</p>";

/// Read-only state shared by every session.
pub struct ServeState {
    pub model: FwdModel,
    pub scene: SceneBundle,
    /// Input clouds per variant, built on first use.
    clouds: Mutex<HashMap<ModelVariant, Arc<Vec<CachedView>>>>,
    pub static_dir: Option<PathBuf>,
}

impl ServeState {
    pub fn new(model: FwdModel, scene: SceneBundle, static_dir: Option<PathBuf>) -> Result<Self> {
        if scene.is_empty() {
            return Err(fwd_core::FwdError::EmptyInput(format!("scene {} has no views", scene.name)));
        }
        let state = Self {
            model,
            scene,
            clouds: Mutex::new(HashMap::new()),
            static_dir,
        };
        state.clouds_for(state.model.variant())?;
        Ok(state)
    }

    /// Every scene view lifted into a cloud by `variant`.
    pub fn clouds_for(&self, variant: ModelVariant) -> Result<Arc<Vec<CachedView>>> {
        if let Some(c) = self.clouds.lock().expect("cache lock").get(&variant) {
            return Ok(c.clone());
        }
        let m = self.model.with_variant(variant);
        let built = Arc::new(
            self.scene
                .views
                .iter()
                .map(|v| m.prepare_cached(v))
                .collect::<Result<Vec<_>>>()?,
        );
        self.clouds.lock().expect("cache lock").insert(variant, built.clone());
        Ok(built)
    }
}

/// Settings a session may change with `config` messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Settings {
    variant: ModelVariant,
    k_blend: usize,
}

#[derive(Clone, Copy, Debug)]
struct Job {
    fid: u64,
    pose: fwd_core::geometry::Pose,
    settings: Settings,
}

/// One rendered frame ready for the wire.
pub struct FrameOut {
    pub header: FrameHeader,
    pub png: Vec<u8>,
    pub render_ms: f64,
    pub coverage: f64,
}

/// Renders `pose` from the cached clouds of `variant`.
pub fn render_frame(
    state: &ServeState,
    model: &FwdModel,
    fid: u64,
    pose: &fwd_core::geometry::Pose,
) -> Result<FrameOut> {
    let start = Instant::now();
    let clouds = state.clouds_for(model.variant())?;
    let intr = state.scene.intrinsics().expect("non-empty scene");
    let out = model.render_cached(&clouds, &intr, pose)?;
    let png = encode_png(&out.image)?;
    let render_ms = start.elapsed().as_secs_f64() * 1e3;
    let n = intr.num_pixels().max(1);
    let covered = (0..n).filter(|&p| out.coverage.iter().any(|c| c[p] > 0)).count();
    let flags = if out.zero_coverage() { FLAG_ZERO_COVERAGE } else { 0 };
    Ok(FrameOut {
        header: FrameHeader { fid, flags },
        png,
        render_ms,
        coverage: covered as f64 / n as f64,
    })
}

pub fn router(state: Arc<ServeState>) -> Router {
    let app = Router::new().route("/ws", get(ws_handler));
    let app = match &state.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(|| async { Html(FALLBACK_INDEX) })),
    };
    app.with_state(state)
}

/// Binds `addr` and returns the bound address with the server future.
pub async fn bind(
    state: Arc<ServeState>,
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, impl std::future::Future<Output = std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(state);
    Ok((local, async move { axum::serve(listener, app).await }))
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<Arc<ServeState>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| session(socket, state))
}

async fn session(socket: WebSocket, state: Arc<ServeState>) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    let (job_tx, job_rx) = watch::channel::<Option<Job>>(None);

    let writer = tokio::spawn(async move {
        while let Some(msg) = out_rx.recv().await {
            if sink.send(msg).await.is_err() {
                break;
            }
        }
    });
    let worker = tokio::spawn(render_worker(state.clone(), job_rx, out_tx.clone()));

    let mut settings = Settings {
        variant: state.model.variant(),
        k_blend: state.model.config.k_blend,
    };
    let mut last_fid: Option<u64> = None;
    let send_err = |e: ProtocolError| {
        let _ = out_tx.send(Message::Text(e.to_json().into()));
    };
    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Binary(_) => {
                send_err(ProtocolError::new(code::UNSUPPORTED, "binary client messages are not supported"));
                continue;
            }
            Message::Close(_) => break,
            _ => continue,
        };
        match ClientMessage::parse(text.as_str()) {
            Ok(ClientMessage::Pose(p)) => {
                if last_fid.is_some_and(|l| p.fid <= l) {
                    send_err(ProtocolError::new(
                        code::STALE_FID,
                        format!("fid {} does not exceed {}", p.fid, last_fid.unwrap_or(0)),
                    ));
                    continue;
                }
                last_fid = Some(p.fid);
                let _ = job_tx.send(Some(Job {
                    fid: p.fid,
                    pose: p.pose,
                    settings,
                }));
            }
            Ok(ClientMessage::Config(c)) => {
                let mut next = settings;
                if let Some(v) = c.variant {
                    if v.uses_sensor_depth() && !state.scene.has_depth() {
                        send_err(ProtocolError::new(code::INVALID, format!("variant {v} needs sensor depth, scene has none")));
                        continue;
                    }
                    next.variant = v;
                }
                if let Some(k) = c.k_blend {
                    next.k_blend = k;
                }
                settings = next;
            }
            Err(e) => send_err(e),
        }
    }
    drop(job_tx);
    let _ = worker.await;
    drop(out_tx);
    let _ = writer.await;
}

async fn render_worker(state: Arc<ServeState>, mut jobs: watch::Receiver<Option<Job>>, out: mpsc::UnboundedSender<Message>) {
    let mut model: Option<(Settings, Arc<FwdModel>)> = None;
    while jobs.changed().await.is_ok() {
        let Some(job) = *jobs.borrow_and_update() else {
            continue;
        };
        let m = match &model {
            Some((s, m)) if *s == job.settings => m.clone(),
            _ => {
                let mut m = state.model.with_variant(job.settings.variant);
                m.config.k_blend = job.settings.k_blend;
                let m = Arc::new(m);
                model = Some((job.settings, m.clone()));
                m
            }
        };
        let st = state.clone();
        let rendered = tokio::task::spawn_blocking(move || render_frame(&st, &m, job.fid, &job.pose)).await;
        let msgs = match rendered {
            Ok(Ok(f)) => vec![
                Message::Binary(encode_frame(f.header, &f.png).into()),
                Message::Text(
                    ServerMessage::Stats {
                        fid: job.fid,
                        render_ms: f.render_ms,
                        coverage: f.coverage,
                    }
                    .to_json()
                    .into(),
                ),
            ],
            Ok(Err(e)) => vec![Message::Text(ProtocolError::new(code::RENDER_FAILED, e.to_string()).to_json().into())],
            Err(e) => vec![Message::Text(ProtocolError::new(code::RENDER_FAILED, e.to_string()).to_json().into())],
        };
        for m in msgs {
            if out.send(m).is_err() {
                return;
            }
        }
    }
}

//! HTTP/JSON front end over `ddnet-core`. Compute runs on the blocking pool;
//! training runs as a background job polled by id.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ddnet_core::api::{
    ApiError, BenchRequest, EnhanceRequest, EnhanceResponse, EvalRequest, EvalResponse, GradmapRequest, Health, JobId,
    JobState, SynthesizeRequest, SynthesizeResponse, TrainStatus,
};
use ddnet_core::bench::{resolve_device, run_benchmark, BenchmarkReport};
use ddnet_core::checkpoint::load_checkpoint;
use ddnet_core::datagen::{scan_dataset, synthesize_dir, Split};
use ddnet_core::enhance::{enhance_path, gradmap_path};
use ddnet_core::model::Model;
use ddnet_core::trainer::{evaluate, train_with_progress, TrainConfig};
use ddnet_core::Error;
use tokio::net::TcpListener;

/// An error response: HTTP status plus the JSON body.
#[derive(Debug)]
pub struct Failure(StatusCode, ApiError);

impl Failure {
    fn internal(message: impl Into<String>) -> Self {
        Failure(StatusCode::INTERNAL_SERVER_ERROR, ApiError::new("internal", message))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Argument(_) => StatusCode::BAD_REQUEST,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            Error::Io { .. } | Error::NonFinite { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            Error::Format { .. } | Error::Dataset(_) | Error::Checkpoint { .. } | Error::Resource(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::Device(_) => StatusCode::SERVICE_UNAVAILABLE,
        };
        Failure(status, e.into())
    }
}

impl From<JsonRejection> for Failure {
    fn from(r: JsonRejection) -> Self {
        Failure(StatusCode::BAD_REQUEST, ApiError::new("argument", r.body_text()))
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type Reply<T> = Result<Json<T>, Failure>;

struct Job {
    status: Arc<Mutex<TrainStatus>>,
    stop: Arc<AtomicBool>,
}

#[derive(Default)]
pub struct AppState {
    models: Mutex<HashMap<PathBuf, (Option<SystemTime>, Arc<Model>)>>,
    jobs: Mutex<HashMap<u64, Job>>,
    next_job: AtomicU64,
}

impl AppState {
    /// Loads a checkpoint's model, reusing the cached copy while the file's
    /// modification time is unchanged.
    fn model(&self, path: &Path) -> ddnet_core::Result<Arc<Model>> {
        let stamp = std::fs::metadata(path).and_then(|m| m.modified()).ok();
        if let Some((cached, model)) = self.models.lock().unwrap().get(path) {
            if stamp.is_some() && *cached == stamp {
                return Ok(model.clone());
            }
        }
        let model = Arc::new(load_checkpoint(path)?.model);
        self.models.lock().unwrap().insert(path.to_path_buf(), (stamp, model.clone()));
        Ok(model)
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ddnet_core::Result<T> + Send + 'static) -> Reply<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(result) => Ok(Json(result?)),
        Err(e) => Err(Failure::internal(format!("worker failed: {e}"))),
    }
}

async fn health() -> Reply<Health> {
    let device = resolve_device()?;
    Ok(Json(Health {
        status: "ok".into(),
        device,
        version: env!("CARGO_PKG_VERSION").into(),
    }))
}

async fn gradmap(req: Result<Json<GradmapRequest>, JsonRejection>) -> Reply<GradmapRequest> {
    let Json(req) = req?;
    blocking(move || {
        gradmap_path(&req.input, &req.output)?;
        Ok(req)
    })
    .await
}

async fn synthesize(req: Result<Json<SynthesizeRequest>, JsonRejection>) -> Reply<SynthesizeResponse> {
    let Json(req) = req?;
    blocking(move || {
        let records = synthesize_dir(&req.input, &req.output, req.seed)?;
        Ok(SynthesizeResponse {
            records,
            coefficients: req.output.join("coefficients.csv"),
        })
    })
    .await
}

async fn enhance(State(app): State<Arc<AppState>>, req: Result<Json<EnhanceRequest>, JsonRejection>) -> Reply<EnhanceResponse> {
    let Json(req) = req?;
    resolve_device()?;
    blocking(move || {
        let model = app.model(&req.checkpoint)?;
        let written = enhance_path(&model, &req.input, &req.output, req.tile)?;
        Ok(EnhanceResponse { written })
    })
    .await
}

async fn eval(State(app): State<Arc<AppState>>, req: Result<Json<EvalRequest>, JsonRejection>) -> Reply<EvalResponse> {
    let Json(req) = req?;
    resolve_device()?;
    blocking(move || {
        let model = app.model(&req.checkpoint)?;
        let manifest = scan_dataset(&req.data, Split::Test)?;
        let report = evaluate(&model, &manifest)?;
        Ok(EvalResponse {
            report,
            warnings: manifest.warnings,
        })
    })
    .await
}

async fn bench(State(app): State<Arc<AppState>>, req: Result<Json<BenchRequest>, JsonRejection>) -> Reply<BenchmarkReport> {
    let Json(req) = req?;
    req.options.validate()?;
    blocking(move || {
        let model = app.model(&req.checkpoint)?;
        let mut report = run_benchmark(&model, &req.options)?;
        report.checkpoint = Some(req.checkpoint.display().to_string());
        Ok(report)
    })
    .await
}

async fn start_training(
    State(app): State<Arc<AppState>>,
    cfg: Result<Json<TrainConfig>, JsonRejection>,
) -> Result<(StatusCode, Json<TrainStatus>), Failure> {
    let Json(cfg) = cfg?;
    cfg.validate()?;
    resolve_device()?;
    let id = JobId(app.next_job.fetch_add(1, Ordering::Relaxed) + 1);
    let status = Arc::new(Mutex::new(TrainStatus {
        id,
        state: JobState::Running,
        epochs: cfg.epochs,
        last: None,
        outcome: None,
        error: None,
    }));
    let stop = Arc::new(AtomicBool::new(false));
    app.jobs.lock().unwrap().insert(
        id.0,
        Job {
            status: status.clone(),
            stop: stop.clone(),
        },
    );
    let snapshot = status.lock().unwrap().clone();
    tokio::task::spawn_blocking(move || {
        let result = train_with_progress(&cfg, |record| {
            status.lock().unwrap().last = Some(*record);
            !stop.load(Ordering::Relaxed)
        });
        let mut s = status.lock().unwrap();
        match result {
            Ok(outcome) => {
                s.state = if stop.load(Ordering::Relaxed) && outcome.epochs < cfg.epochs {
                    JobState::Stopped
                } else {
                    JobState::Finished
                };
                s.outcome = Some(outcome);
            }
            Err(e) => {
                s.state = JobState::Failed;
                s.error = Some(e.into());
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(snapshot)))
}

fn job_status(app: &AppState, id: u64) -> Reply<TrainStatus> {
    let jobs = app.jobs.lock().unwrap();
    let job = jobs
        .get(&id)
        .ok_or_else(|| Failure(StatusCode::NOT_FOUND, ApiError::new("not_found", format!("no training job {id}"))))?;
    let status = job.status.lock().unwrap().clone();
    Ok(Json(status))
}

async fn training_status(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> Reply<TrainStatus> {
    job_status(&app, id)
}

/// Asks a running job to stop after its current step.
async fn stop_training(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> Reply<TrainStatus> {
    if let Some(job) = app.jobs.lock().unwrap().get(&id) {
        job.stop.store(true, Ordering::Relaxed);
    }
    job_status(&app, id)
}

pub fn router() -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/gradmap", post(gradmap))
        .route("/v1/synthesize", post(synthesize))
        .route("/v1/enhance", post(enhance))
        .route("/v1/eval", post(eval))
        .route("/v1/bench", post(bench))
        .route("/v1/train", post(start_training))
        .route("/v1/train/{id}", get(training_status).delete(stop_training))
        .with_state(Arc::new(AppState::default()))
}

pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

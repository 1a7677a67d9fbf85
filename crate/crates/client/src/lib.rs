//! Async client for `ddnet-service`. Every call returns the service's
//! [`ApiError`] on failure; transport problems use the `connection` category.

use ddnet_core::api::{
    ApiError, BenchRequest, EnhanceRequest, EnhanceResponse, EvalRequest, EvalResponse, GradmapRequest, Health,
    SynthesizeRequest, SynthesizeResponse, TrainStatus,
};
use ddnet_core::bench::BenchmarkReport;
use ddnet_core::trainer::TrainConfig;
use reqwest::{Method, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use ddnet_core::api;

pub type Result<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

fn transport(e: reqwest::Error) -> ApiError {
    ApiError::new("connection", e.to_string())
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8650`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            base: base.into().trim_end_matches('/').to_string(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T> {
        let resp = req.send().await.map_err(transport)?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(transport)?;
        if status.is_success() {
            return serde_json::from_slice(&bytes)
                .map_err(|e| ApiError::new("protocol", format!("unexpected response body: {e}")));
        }
        Err(serde_json::from_slice(&bytes).unwrap_or_else(|_| {
            ApiError::new("protocol", format!("HTTP {status}: {}", String::from_utf8_lossy(&bytes).trim()))
        }))
    }

    async fn call<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&B>) -> Result<T> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(body) = body {
            req = req.json(body);
        }
        self.send(req).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.call::<(), _>(Method::GET, "/health", None).await
    }

    pub async fn gradmap(&self, req: &GradmapRequest) -> Result<GradmapRequest> {
        self.call(Method::POST, "/v1/gradmap", Some(req)).await
    }

    pub async fn synthesize(&self, req: &SynthesizeRequest) -> Result<SynthesizeResponse> {
        self.call(Method::POST, "/v1/synthesize", Some(req)).await
    }

    pub async fn enhance(&self, req: &EnhanceRequest) -> Result<EnhanceResponse> {
        self.call(Method::POST, "/v1/enhance", Some(req)).await
    }

    pub async fn eval(&self, req: &EvalRequest) -> Result<EvalResponse> {
        self.call(Method::POST, "/v1/eval", Some(req)).await
    }

    pub async fn bench(&self, req: &BenchRequest) -> Result<BenchmarkReport> {
        self.call(Method::POST, "/v1/bench", Some(req)).await
    }

    pub async fn start_training(&self, cfg: &TrainConfig) -> Result<TrainStatus> {
        self.call(Method::POST, "/v1/train", Some(cfg)).await
    }

    pub async fn training_status(&self, id: u64) -> Result<TrainStatus> {
        self.call::<(), _>(Method::GET, &format!("/v1/train/{id}"), None).await
    }

    pub async fn stop_training(&self, id: u64) -> Result<TrainStatus> {
        self.call::<(), _>(Method::DELETE, &format!("/v1/train/{id}"), None).await
    }
}

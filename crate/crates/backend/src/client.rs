use std::time::Duration;

use qarsmith_core::backend::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Blocking JSON client for one backend base URL.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            client,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, BackendError> {
        let mut req = self.client.post(format!("{}{path}", self.base_url)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                code: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Decode(format!("{path}: {e}")))
    }
}

impl EmbedBackend for HttpBackend {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        self.post("/v1/embed", req)
    }
}

impl ChatBackend for HttpBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.post("/v1/chat", req)
    }
}

impl CaptionBackend for HttpBackend {
    fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse, BackendError> {
        self.post("/v1/caption", req)
    }
}

impl VqaBackend for HttpBackend {
    fn vqa(&self, req: &VqaRequest) -> Result<VqaResponse, BackendError> {
        self.post("/v1/vqa", req)
    }
}

impl ScoreBackend for HttpBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        self.post("/v1/score", req)
    }
}

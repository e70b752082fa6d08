//! Blocking JSON client for the HTTP service, used by the CLI verbs.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// Nothing listens at the address.
    #[error("store not started (nothing answering at {0}; run `schaladb start`)")]
    Unreachable(String),
    /// The service answered `{"ok": false}`.
    #[error("{detail}")]
    Api { status: u16, kind: String, detail: String },
    #[error("unexpected response: {0}")]
    Decode(String),
}

pub struct ApiClient {
    base: String,
    agent: ureq::Agent,
}

impl ApiClient {
    /// `base` is like `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(2))
            .timeout_read(Duration::from_secs(60))
            .build();
        ApiClient {
            base: base.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, route: &str) -> String {
        format!("{}/api/v1/{}", self.base, route.trim_start_matches('/'))
    }

    fn finish(&self, res: Result<ureq::Response, ureq::Error>) -> Result<Value, ClientError> {
        let (status, resp) = match res {
            Ok(r) => (r.status(), r),
            Err(ureq::Error::Status(code, r)) => (code, r),
            Err(ureq::Error::Transport(_)) => return Err(ClientError::Unreachable(self.base.clone())),
        };
        let body: Value = resp.into_json().map_err(|e| ClientError::Decode(e.to_string()))?;
        if body.get("ok").and_then(Value::as_bool) == Some(true) {
            return Ok(body.get("result").cloned().unwrap_or(Value::Null));
        }
        let err = body.get("error").cloned().unwrap_or(Value::Null);
        Err(ClientError::Api {
            status,
            kind: err.get("kind").and_then(Value::as_str).unwrap_or("unknown").to_string(),
            detail: err
                .get("detail")
                .and_then(Value::as_str)
                .unwrap_or("request failed")
                .to_string(),
        })
    }

    /// GET `route` (relative to `/api/v1/`) with query parameters.
    pub fn get(&self, route: &str, query: &[(&str, String)]) -> Result<Value, ClientError> {
        let mut req = self.agent.get(&self.url(route));
        for (k, v) in query {
            req = req.query(k, v);
        }
        self.finish(req.call())
    }

    pub fn post(&self, route: &str, body: &Value) -> Result<Value, ClientError> {
        self.finish(self.agent.post(&self.url(route)).send_json(body.clone()))
    }

    pub fn get_as<T: DeserializeOwned>(&self, route: &str, query: &[(&str, String)]) -> Result<T, ClientError> {
        decode(self.get(route, query)?)
    }

    pub fn post_as<T: DeserializeOwned>(&self, route: &str, body: &Value) -> Result<T, ClientError> {
        decode(self.post(route, body)?)
    }

    /// True when the service answers at all.
    pub fn reachable(&self) -> bool {
        !matches!(self.get("status", &[]), Err(ClientError::Unreachable(_)))
    }
}

fn decode<T: DeserializeOwned>(v: Value) -> Result<T, ClientError> {
    serde_json::from_value(v).map_err(|e| ClientError::Decode(e.to_string()))
}

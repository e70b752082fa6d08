//! HTTP/JSON service over an [`EngineHandle`].
//!
//! Every route is served under both `/api/v1/` and `/api/`. Responses are
//! `{"ok": true, "result": ...}` or `{"ok": false, "error": {"kind", "detail"}}`.
//!
//! | method | path | body / query |
//! |---|---|---|
//! | GET | `status` | |
//! | GET | `tasks` | `status`, `activity`, `limit`, `after_id` |
//! | POST | `query` | `{"id": "Q4", "params": {}}` or `{"plan": <JSON plan or SELECT>}`, optional `now` |
//! | POST | `steer` | `{"kind": "update"\|"prune", "activity", "where", "set"}` |
//! | GET | `metrics` | |
//! | GET | `provenance` | `tuple_id` |
//! | POST | `engine/setup` | |
//! | POST | `engine/run` | `{"workflow", "inputs", "executor"}` |
//! | POST | `engine/shutdown` | |

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use schaladb::query::{Params, QueryId, QueryText};
use serde::Deserialize;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

use crate::engine::{EngineError, EngineHandle, EngineResult, RunRequest, SteerRequest, TaskPageQuery};

const HANDLER_THREADS: usize = 4;

#[derive(Debug, Deserialize)]
struct QueryBody {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    plan: Option<Value>,
    #[serde(default)]
    params: Params,
    #[serde(default)]
    now: Option<u64>,
}

/// A parsed request, independent of the transport.
#[derive(Debug, Clone)]
pub struct ApiRequest {
    pub method: String,
    /// Path without the `/api/v1` or `/api` prefix, e.g. `tasks`.
    pub route: String,
    pub query: Vec<(String, String)>,
    pub body: String,
}

impl ApiRequest {
    pub fn parse(method: &str, url: &str, body: String) -> Option<ApiRequest> {
        let (path, query) = url.split_once('?').unwrap_or((url, ""));
        let route = path
            .strip_prefix("/api/v1/")
            .or_else(|| path.strip_prefix("/api/"))?
            .trim_end_matches('/')
            .to_string();
        let query = url::form_urlencoded::parse(query.as_bytes()).into_owned().collect();
        Some(ApiRequest {
            method: method.to_ascii_uppercase(),
            route,
            query,
            body,
        })
    }

    fn param(&self, name: &str) -> Option<&str> {
        self.query.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    fn parsed_param<T: std::str::FromStr>(&self, name: &str) -> EngineResult<Option<T>> {
        self.param(name)
            .filter(|v| !v.is_empty())
            .map(|v| {
                v.parse()
                    .map_err(|_| EngineError::BadRequest(format!("bad value for {name}: {v}")))
            })
            .transpose()
    }

    fn json<T: serde::de::DeserializeOwned>(&self) -> EngineResult<T> {
        serde_json::from_str(&self.body).map_err(|e| EngineError::BadRequest(format!("malformed body: {e}")))
    }
}

fn ok(result: impl serde::Serialize) -> EngineResult<Value> {
    serde_json::to_value(result)
        .map(|r| json!({"ok": true, "result": r}))
        .map_err(|e| EngineError::BadRequest(e.to_string()))
}

/// Routes one request. Returns the HTTP status and the JSON body.
pub fn handle(engine: &EngineHandle, req: &ApiRequest) -> (u16, Value) {
    match dispatch(engine, req) {
        Ok(body) => (200, body),
        Err(e) => (
            e.status(),
            json!({"ok": false, "error": {"kind": e.kind(), "detail": e.to_string()}}),
        ),
    }
}

fn dispatch(engine: &EngineHandle, req: &ApiRequest) -> EngineResult<Value> {
    match (req.method.as_str(), req.route.as_str()) {
        ("GET", "status") => ok(engine.status()?),
        ("GET", "tasks") => {
            let q = TaskPageQuery {
                status: req.param("status").filter(|s| !s.is_empty()).map(String::from),
                activity: req.param("activity").filter(|s| !s.is_empty()).map(String::from),
                limit: req.parsed_param("limit")?,
                after_id: req.parsed_param("after_id")?,
            };
            ok(engine.tasks(&q)?)
        }
        ("POST", "query") => {
            let body: QueryBody = req.json()?;
            let text = match (&body.id, &body.plan) {
                (Some(id), None) => QueryText::Predefined(
                    id.parse::<QueryId>()
                        .map_err(|_| EngineError::BadRequest(format!("unknown query id {id}")))?,
                ),
                (None, Some(Value::String(s))) => QueryText::parse(s).map_err(|e| EngineError::BadRequest(e.to_string()))?,
                (None, Some(plan)) => QueryText::Plan(
                    serde_json::from_value(plan.clone()).map_err(|e| EngineError::BadRequest(format!("bad plan: {e}")))?,
                ),
                _ => return Err(EngineError::BadRequest("give exactly one of id or plan".into())),
            };
            ok(engine.query(&text, &body.params, body.now)?)
        }
        ("POST", "steer") => {
            let body: SteerRequest = req.json()?;
            ok(engine.steer(&body)?)
        }
        ("GET", "metrics") => ok(engine.metrics()?),
        ("GET", "provenance") => {
            let id: u64 = req
                .parsed_param("tuple_id")?
                .ok_or_else(|| EngineError::BadRequest("tuple_id is required".into()))?;
            ok(engine.provenance(id)?)
        }
        ("POST", "engine/setup") => {
            engine.setup_create()?;
            ok(json!({"state": engine.state()}))
        }
        ("POST", "engine/run") => {
            let body: RunRequest = req.json()?;
            engine.run(body)?;
            ok(json!({"state": engine.state()}))
        }
        ("POST", "engine/shutdown") => {
            engine.shutdown();
            ok(json!({"state": engine.state()}))
        }
        (_, route) => Err(EngineError::NotFound(format!("{} /api/v1/{route}", req.method))),
    }
}

/// A running HTTP service. Dropping it stops the listener.
pub struct HttpService {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl HttpService {
    /// Binds `addr` (port 0 picks a free port) and serves until stopped or
    /// until the engine shuts down.
    pub fn bind(addr: &str, engine: EngineHandle) -> std::io::Result<HttpService> {
        let server = Server::http(addr).map_err(std::io::Error::other)?;
        let local = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let handles = (0..HANDLER_THREADS)
            .map(|_| {
                let server = server.clone();
                let engine = engine.clone();
                let stop = stop.clone();
                std::thread::spawn(move || serve(&server, &engine, &stop))
            })
            .collect();
        Ok(HttpService {
            addr: local,
            stop,
            handles,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until every handler thread has exited.
    pub fn join(mut self) {
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for HttpService {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve(server: &Server, engine: &EngineHandle, stop: &AtomicBool) {
    // Keep answering briefly after shutdown so the shutdown reply goes out.
    let mut linger = 0;
    while !stop.load(Ordering::SeqCst) && linger < 5 {
        if engine.is_closed() {
            linger += 1;
        }
        match server.recv_timeout(Duration::from_millis(50)) {
            Ok(Some(req)) => respond(engine, req),
            Ok(None) => {}
            Err(e) => {
                log::warn!("http accept failed: {e}");
                break;
            }
        }
    }
}

fn respond(engine: &EngineHandle, mut req: Request) {
    let mut body = String::new();
    let (status, value) = match req.as_reader().read_to_string(&mut body) {
        Err(e) => (400, json!({"ok": false, "error": {"kind": "bad_request", "detail": e.to_string()}})),
        Ok(_) => match ApiRequest::parse(req.method().as_str(), req.url(), body) {
            Some(api) if *req.method() == Method::Get || *req.method() == Method::Post => handle(engine, &api),
            Some(_) => (405, json!({"ok": false, "error": {"kind": "method", "detail": "use GET or POST"}})),
            None => (404, json!({"ok": false, "error": {"kind": "not_found", "detail": req.url()}})),
        },
    };
    log::debug!("{} {} -> {status}", req.method(), req.url());
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let resp = Response::from_string(value.to_string())
        .with_status_code(status)
        .with_header(header);
    if let Err(e) = req.respond(resp) {
        log::debug!("client went away: {e}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_prefixes_route_the_same() {
        let a = ApiRequest::parse("get", "/api/v1/tasks?status=READY&after_id=3", String::new()).unwrap();
        let b = ApiRequest::parse("GET", "/api/tasks/?status=READY&after_id=3", String::new()).unwrap();
        assert_eq!(a.route, "tasks");
        assert_eq!(b.route, "tasks");
        assert_eq!(a.param("after_id"), Some("3"));
        assert!(ApiRequest::parse("GET", "/other", String::new()).is_none());
    }

    #[test]
    fn query_values_are_percent_decoded() {
        let r = ApiRequest::parse("GET", "/api/tasks?activity=Analyze%20Risers", String::new()).unwrap();
        assert_eq!(r.param("activity"), Some("Analyze Risers"));
    }
}

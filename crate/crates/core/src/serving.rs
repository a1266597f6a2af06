//! Local black-box model serving and the matching client oracle.
//!
//! The server answers `POST /predict` with canonical outputs under a fixed
//! [`OutputSpec`] and never reveals more than the spec allows. The wire
//! format keeps comparisons exact end to end: inputs are JSON reals whose
//! shortest encoding round-trips f32 bit-exactly (serde_json is built with
//! `float_roundtrip`), labels are integers, and probabilities travel as
//! fixed-point strings.
//!
//! ```text
//! POST /predict   {"inputs": [[0.1, 0.2, ...], ...]}
//!              -> {"outputs": [{"labels": [2, 0], "probs": ["0.61", "0.22"]}, ...]}
//! GET  /healthz  -> {"status": "ok"}            (digest only when exposed)
//! ```
//!
//! Transport failures surface as [`Error::Transport`] and are kept apart
//! from integrity mismatches; an outage must never read as a detection.

use std::io::Read;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::{apply_output_spec, FixedProb, ObservedOutput, Oracle, OutputSpec};
use crate::nn::Model;
use crate::tensor::Tensor;

const WORKERS: usize = 4;
const MAX_BODY_BYTES: u64 = 16 << 20;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    /// Bind address; port 0 picks a free port.
    pub listen: String,
    pub spec: OutputSpec,
    pub max_request_inputs: usize,
    /// Whether `/healthz` includes the model digest. Off by default: a
    /// deployment being verified would not volunteer its identity.
    pub expose_digest: bool,
    pub log_path: Option<PathBuf>,
}

impl ServeConfig {
    pub fn new(spec: OutputSpec) -> Self {
        ServeConfig {
            listen: "127.0.0.1:0".to_string(),
            spec,
            max_request_inputs: 16,
            expose_digest: false,
            log_path: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PredictRequest {
    inputs: Vec<Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct WireOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    probs: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct PredictResponse {
    outputs: Vec<WireOutput>,
}

#[derive(Serialize, Deserialize)]
struct StatusResponse {
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    digest: Option<String>,
}

struct ServerState {
    model: Model,
    cfg: ServeConfig,
    log: Option<Mutex<std::fs::File>>,
}

/// A running prediction endpoint. Shut down explicitly or on drop.
pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        // unblock() releases one blocked recv(); issue one per worker.
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Start serving `model` under `cfg`. Requests are answered concurrently
/// by a small worker pool; the model is immutable shared state.
pub fn serve(model: Model, cfg: ServeConfig) -> Result<ServerHandle> {
    cfg.spec.validate(model.num_classes())?;
    if cfg.max_request_inputs == 0 {
        return Err(Error::invalid_input("max_request_inputs must be positive"));
    }
    let log = match &cfg.log_path {
        Some(path) => Some(Mutex::new(
            std::fs::OpenOptions::new().create(true).append(true).open(path)?,
        )),
        None => None,
    };
    let server = tiny_http::Server::http(&cfg.listen)
        .map_err(|e| Error::Transport(format!("bind {}: {e}", cfg.listen)))?;
    let addr = match server.server_addr() {
        tiny_http::ListenAddr::IP(addr) => addr,
        other => return Err(Error::Transport(format!("unexpected listen address {other:?}"))),
    };
    let server = Arc::new(server);
    let state = Arc::new(ServerState { model, cfg, log });
    let workers = (0..WORKERS)
        .map(|_| {
            let server = Arc::clone(&server);
            let state = Arc::clone(&state);
            std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    handle_request(&state, req);
                }
            })
        })
        .collect();
    Ok(ServerHandle { addr, server, workers })
}

fn json_response(status: u16, body: &impl Serialize) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    let body = serde_json::to_vec(body).expect("wire types serialize");
    tiny_http::Response::from_data(body)
        .with_status_code(status)
        .with_header(
            tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap(),
        )
}

fn status_body(status: &str, message: Option<String>) -> StatusResponse {
    StatusResponse { status: status.to_string(), message, digest: None }
}

fn handle_request(state: &ServerState, mut req: tiny_http::Request) {
    let method = req.method().to_string();
    let url = req.url().to_string();
    let status = match (method.as_str(), url.as_str()) {
        ("POST", "/predict") => {
            let (code, response) = predict(state, &mut req);
            let _ = req.respond(response);
            code
        }
        ("GET", "/healthz") => {
            let digest = state.cfg.expose_digest.then(|| state.model.digest().to_string());
            let body = StatusResponse { status: "ok".into(), message: None, digest };
            let _ = req.respond(json_response(200, &body));
            200
        }
        _ => {
            let _ = req.respond(json_response(404, &status_body("not_found", None)));
            404
        }
    };
    if let Some(log) = &state.log {
        use std::io::Write;
        if let Ok(mut file) = log.lock() {
            let _ = writeln!(file, "{method} {url} {status}");
        }
    }
}

fn predict(
    state: &ServerState,
    req: &mut tiny_http::Request,
) -> (u16, tiny_http::Response<std::io::Cursor<Vec<u8>>>) {
    let mut body = Vec::new();
    if req
        .as_reader()
        .take(MAX_BODY_BYTES)
        .read_to_end(&mut body)
        .is_err()
    {
        return (400, json_response(400, &status_body("bad_request", Some("unreadable body".into()))));
    }
    let parsed: PredictRequest = match serde_json::from_slice(&body) {
        Ok(p) => p,
        Err(e) => {
            return (400, json_response(400, &status_body("bad_request", Some(e.to_string()))));
        }
    };
    if parsed.inputs.is_empty() || parsed.inputs.len() > state.cfg.max_request_inputs {
        let msg = format!(
            "request carries {} inputs, limit is 1..={}",
            parsed.inputs.len(),
            state.cfg.max_request_inputs
        );
        return (400, json_response(400, &status_body("bad_request", Some(msg))));
    }
    let expect = state.model.input_len();
    let mut outputs = Vec::with_capacity(parsed.inputs.len());
    for input in &parsed.inputs {
        if input.len() != expect {
            let msg = format!("input has {} elements, model expects {expect}", input.len());
            return (400, json_response(400, &status_body("invalid_shape", Some(msg))));
        }
        let tensor = match Tensor::new(state.model.input_shape().to_vec(), input.clone()) {
            Ok(t) => t,
            Err(e) => {
                return (400, json_response(400, &status_body("invalid_shape", Some(e.to_string()))));
            }
        };
        let observed = state
            .model
            .forward(&tensor)
            .and_then(|(probs, _)| apply_output_spec(&probs, &state.cfg.spec));
        match observed {
            Ok(out) => outputs.push(to_wire(&out, &state.cfg.spec)),
            Err(e) => {
                return (500, json_response(500, &status_body("error", Some(e.to_string()))));
            }
        }
    }
    (200, json_response(200, &PredictResponse { outputs }))
}

fn to_wire(out: &ObservedOutput, spec: &OutputSpec) -> WireOutput {
    WireOutput {
        labels: spec.reveals_labels().then(|| out.labels.clone()),
        probs: spec
            .reveals_probs()
            .then(|| out.probs.iter().map(|p| p.to_string()).collect()),
    }
}

/// Client end: adapts the wire protocol into an [`Oracle`] for
/// `fingerprint::verify`. Connections are pooled across queries.
pub struct RemoteOracle {
    agent: ureq::Agent,
    predict_url: String,
    spec: OutputSpec,
}

impl RemoteOracle {
    /// `endpoint` is the server base URL, e.g. `http://127.0.0.1:8080`.
    pub fn new(endpoint: &str, spec: OutputSpec) -> Self {
        let base = endpoint.trim_end_matches('/');
        RemoteOracle {
            agent: ureq::Agent::new_with_defaults(),
            predict_url: format!("{base}/predict"),
            spec,
        }
    }

    fn decode(&self, wire: WireOutput) -> Result<ObservedOutput> {
        // Enforce the information-hygiene contract: fields are present
        // exactly when the spec defines them.
        let labels = match (self.spec.reveals_labels(), wire.labels) {
            (true, Some(labels)) => labels,
            (false, None) => Vec::new(),
            (true, None) => return Err(Error::Transport("response is missing labels".into())),
            (false, Some(_)) => {
                return Err(Error::Transport("response carries labels the spec does not allow".into()))
            }
        };
        let probs = match (self.spec.reveals_probs(), wire.probs) {
            (true, Some(raw)) => {
                let decimals = self.spec.decimals().expect("prob specs carry decimals");
                let mut probs = Vec::with_capacity(raw.len());
                for s in raw {
                    let p = FixedProb::parse(&s).map_err(|e| Error::Transport(e.to_string()))?;
                    if p.decimals != decimals {
                        return Err(Error::Transport(format!(
                            "probability `{s}` has {} decimals, spec says {decimals}",
                            p.decimals
                        )));
                    }
                    probs.push(p);
                }
                probs
            }
            (false, None) => Vec::new(),
            (true, None) => return Err(Error::Transport("response is missing probs".into())),
            (false, Some(_)) => {
                return Err(Error::Transport("response carries probs the spec does not allow".into()))
            }
        };
        Ok(ObservedOutput { labels, probs })
    }
}

impl Oracle for RemoteOracle {
    fn query(&mut self, input: &Tensor) -> Result<ObservedOutput> {
        let request = PredictRequest { inputs: vec![input.data().to_vec()] };
        let body = serde_json::to_vec(&request).map_err(|e| Error::Transport(e.to_string()))?;
        let response = self
            .agent
            .post(&self.predict_url)
            .header("content-type", "application/json")
            .send(&body[..])
            .map_err(|e| Error::Transport(e.to_string()))?;
        let text = response
            .into_body()
            .read_to_string()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let mut parsed: PredictResponse =
            serde_json::from_str(&text).map_err(|e| Error::Transport(format!("malformed response: {e}")))?;
        if parsed.outputs.len() != 1 {
            return Err(Error::Transport(format!(
                "expected 1 output, endpoint sent {}",
                parsed.outputs.len()
            )));
        }
        self.decode(parsed.outputs.remove(0))
    }
}

/// One-shot health probe; returns the advertised digest when exposed.
pub fn health_check(endpoint: &str) -> Result<Option<String>> {
    let base = endpoint.trim_end_matches('/');
    let agent = ureq::Agent::new_with_defaults();
    let response = agent
        .get(format!("{base}/healthz"))
        .call()
        .map_err(|e| Error::Transport(e.to_string()))?;
    let text = response
        .into_body()
        .read_to_string()
        .map_err(|e| Error::Transport(e.to_string()))?;
    let parsed: StatusResponse =
        serde_json::from_str(&text).map_err(|e| Error::Transport(e.to_string()))?;
    if parsed.status != "ok" {
        return Err(Error::Transport(format!("endpoint unhealthy: {}", parsed.status)));
    }
    Ok(parsed.digest)
}

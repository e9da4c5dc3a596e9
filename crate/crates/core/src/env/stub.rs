//! In-process `/v1` server backed by the desk-scale environments.

use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::error::{Error, Result};
use crate::rewards::piecewise_reward;
use crate::text::Template;

use super::classifier::{TinyClassifierConfig, TinyClassifierEnv};
use super::tst::{TstSimConfig, TstSimEnv};
use super::wire::{ErrorBody, EvaluateRequest, EvaluateResponse, InfoResponse, WireTask, EVALUATE_PATH, INFO_PATH};
use super::Environment;

/// Largest accepted prompts × inputs product per request.
const MAX_CELLS: usize = 1 << 16;

/// Anything that can answer `(method, path, body)` with `(status, body)`.
pub trait Handler: Send + Sync {
    fn handle(&self, method: &str, path: &str, body: &str) -> (u16, String);
}

impl<F> Handler for F
where
    F: Fn(&str, &str, &str) -> (u16, String) + Send + Sync,
{
    fn handle(&self, method: &str, path: &str, body: &str) -> (u16, String) {
        self(method, path, body)
    }
}

#[derive(Debug, Clone)]
pub struct StubBackend {
    classifier: TinyClassifierEnv,
    tst: Option<TstSimEnv>,
}

fn error(status: u16, msg: impl Into<String>) -> (u16, String) {
    let body = serde_json::to_string(&ErrorBody { error: msg.into() }).expect("serializable");
    (status, body)
}

impl StubBackend {
    pub fn new(classifier: TinyClassifierEnv, tst: Option<TstSimEnv>) -> Self {
        Self { classifier, tst }
    }

    /// Two-class classifier over 30 tokens plus a 30-token style simulator.
    pub fn desk(seed: u64) -> Result<Self> {
        let classifier = TinyClassifierEnv::generate(
            30,
            2,
            TinyClassifierConfig {
                seed,
                ..TinyClassifierConfig::default()
            },
        )?;
        let tst = TstSimEnv::generate(
            30,
            TstSimConfig {
                seed,
                ..TstSimConfig::default()
            },
        )?;
        Ok(Self::new(classifier, Some(tst)))
    }

    pub fn classifier(&self) -> &TinyClassifierEnv {
        &self.classifier
    }

    pub fn tst(&self) -> Option<&TstSimEnv> {
        self.tst.as_ref()
    }

    pub fn info(&self) -> InfoResponse {
        let vocab = self.classifier.vocab();
        InfoResponse {
            name: self.classifier.name().to_string(),
            mask_marker: self.classifier.mask_marker().to_string(),
            classes: Some(
                self.classifier
                    .verbalizers()
                    .class_tokens()
                    .iter()
                    .map(|&t| vocab.token(t).unwrap_or_default().to_string())
                    .collect(),
            ),
            deterministic_supported: true,
        }
    }

    pub fn evaluate(&self, req: &EvaluateRequest) -> Result<EvaluateResponse, String> {
        if req.prompts.len().saturating_mul(req.inputs.len()) > MAX_CELLS {
            return Err(format!("request exceeds {MAX_CELLS} cells"));
        }
        match req.task {
            WireTask::Classification => self.classify(req),
            WireTask::StyleTransfer => self.transfer(req),
        }
    }

    fn classify(&self, req: &EvaluateRequest) -> Result<EvaluateResponse, String> {
        let template = Template::classification(req.template.as_str()).map_err(|e| e.to_string())?;
        let labels = req.labels.as_ref().ok_or("classification requires labels")?;
        if labels.len() != req.inputs.len() {
            return Err(format!("{} labels for {} inputs", labels.len(), req.inputs.len()));
        }
        let k = self.classifier.num_classes();
        if let Some(l) = labels.iter().find(|&&l| l >= k) {
            return Err(format!("label {l} >= {k} classes"));
        }
        let cfg = &self.classifier.config().reward;
        let mut rewards = Vec::with_capacity(req.prompts.len());
        let mut probs = Vec::with_capacity(req.prompts.len());
        for p in &req.prompts {
            let text = p.join(" ");
            let (mut rr, mut pr) = (Vec::new(), Vec::new());
            for (input, &label) in req.inputs.iter().zip(labels) {
                let rendered = template.render(&text, input, self.classifier.mask_marker());
                let cp = self.classifier.probabilities_for_rendered(&rendered);
                rr.push(piecewise_reward(&cp, label, cfg));
                pr.push(cp);
            }
            rewards.push(rr);
            probs.push(pr);
        }
        Ok(EvaluateResponse {
            rewards,
            class_probs: Some(probs),
            outputs: None,
        })
    }

    fn transfer(&self, req: &EvaluateRequest) -> Result<EvaluateResponse, String> {
        let tst = self.tst.as_ref().ok_or("style transfer is not served here")?;
        Template::generation(req.template.as_str()).map_err(|e| e.to_string())?;
        let style = req.style_target.ok_or("style_transfer requires style_target")?;
        if style >= tst.num_styles() {
            return Err(format!("style_target {style} >= {} styles", tst.num_styles()));
        }
        let owned;
        let tst = match req.num_candidates {
            Some(n) if n != tst.config().num_candidates => {
                if n > 1024 {
                    return Err("num_candidates above 1024".into());
                }
                owned = tst.with_num_candidates(n).map_err(|e| e.to_string())?;
                &owned
            }
            _ => tst,
        };
        let seed = req.seed.unwrap_or(0);
        let mut rewards = Vec::with_capacity(req.prompts.len());
        let mut outputs = Vec::with_capacity(req.prompts.len());
        for p in &req.prompts {
            let ids = tst.vocab().encode_tokens(p).map_err(|e| e.to_string())?;
            let (mut rr, mut out) = (Vec::new(), Vec::new());
            for input in &req.inputs {
                let ex = crate::text::Example::styled(input.clone(), style);
                let best = tst.best_candidate(&ids, &ex, seed).map_err(|e| e.to_string())?;
                rr.push(best.combined);
                out.push(best.text);
            }
            rewards.push(rr);
            outputs.push(out);
        }
        Ok(EvaluateResponse {
            rewards,
            class_probs: None,
            outputs: Some(outputs),
        })
    }
}

impl Handler for StubBackend {
    fn handle(&self, method: &str, path: &str, body: &str) -> (u16, String) {
        match (method, path) {
            ("GET", INFO_PATH) => (200, serde_json::to_string(&self.info()).expect("serializable")),
            ("POST", EVALUATE_PATH) => {
                let req: EvaluateRequest = match serde_json::from_str(body) {
                    Ok(r) => r,
                    Err(e) => return error(400, format!("malformed request: {e}")),
                };
                match self.evaluate(&req) {
                    Ok(resp) => (200, serde_json::to_string(&resp).expect("serializable")),
                    Err(e) => error(400, e),
                }
            }
            (_, INFO_PATH) | (_, EVALUATE_PATH) => error(405, format!("method {method} not allowed")),
            _ => error(404, format!("no route for {path}")),
        }
    }
}

/// Threaded HTTP server; stops on [`StubServer::shutdown`] or drop.
pub struct StubServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl StubServer {
    /// Binds `addr` (port 0 picks a free port) and serves with `workers` threads.
    pub fn start(addr: &str, handler: Arc<dyn Handler>, workers: usize) -> Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::Io(std::io::Error::other("server is not bound to an IP address")))?;
        let server = Arc::new(server);
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let handler = Arc::clone(&handler);
                std::thread::spawn(move || serve(&server, handler.as_ref()))
            })
            .collect();
        log::info!("stub server listening on {bound}");
        Ok(Self {
            server,
            addr: bound,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server is shut down from another thread.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve(server: &tiny_http::Server, handler: &dyn Handler) {
    while let Ok(mut req) = server.recv() {
        let mut body = String::new();
        let (status, text) = if req.as_reader().read_to_string(&mut body).is_err() {
            error(400, "request body is not UTF-8")
        } else {
            let method = req.method().as_str().to_string();
            let path = req.url().split('?').next().unwrap_or("").to_string();
            catch_unwind(AssertUnwindSafe(|| handler.handle(&method, &path, &body)))
                .unwrap_or_else(|_| error(500, "internal error"))
        };
        let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
        let resp = tiny_http::Response::from_string(text).with_status_code(status).with_header(header);
        if let Err(e) = req.respond(resp) {
            log::debug!("failed to send response: {e}");
        }
    }
}

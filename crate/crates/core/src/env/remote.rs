//! HTTP client for the `/v1` evaluation protocol.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{Example, Prompt, Template, Vocabulary};

use super::wire::{EvaluateRequest, EvaluateResponse, InfoResponse, WireTask, EVALUATE_PATH, INFO_PATH};
use super::{validate_request, Environment, Evaluation, RewardMatrix, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RemoteTask {
    Classification,
    StyleTransfer { num_candidates: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub url: String,
    pub template: String,
    pub task: RemoteTask,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Extra attempts after a transport failure or HTTP 503.
    #[serde(default = "default_retries")]
    pub retries: usize,
    /// Max prompts per request.
    #[serde(default = "default_batch_cap")]
    pub batch_cap: usize,
    /// Max concurrent requests.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    #[serde(default = "default_length_bounds")]
    pub prompt_length_bounds: (usize, usize),
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retries() -> usize {
    3
}
fn default_batch_cap() -> usize {
    16
}
fn default_parallelism() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_length_bounds() -> (usize, usize) {
    (1, 16)
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>, template: impl Into<String>, task: RemoteTask) -> Self {
        Self {
            url: url.into(),
            template: template.into(),
            task,
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
            batch_cap: default_batch_cap(),
            parallelism: default_parallelism(),
            deterministic: true,
            prompt_length_bounds: default_length_bounds(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_cap == 0 || self.parallelism == 0 || self.timeout_ms == 0 {
            return Err(Error::InvalidConfig("batch_cap, parallelism and timeout_ms must be positive".into()));
        }
        let (lo, hi) = self.prompt_length_bounds;
        if lo > hi {
            return Err(Error::InvalidConfig(format!("empty prompt length range [{lo}, {hi}]")));
        }
        match self.task {
            RemoteTask::Classification => Template::classification(self.template.as_str()).map(|_| ()),
            RemoteTask::StyleTransfer { num_candidates: 0 } => {
                Err(Error::InvalidConfig("num_candidates must be positive".into()))
            }
            RemoteTask::StyleTransfer { .. } => Template::generation(self.template.as_str()).map(|_| ()),
        }
    }
}

pub struct RemoteEnv {
    config: RemoteConfig,
    vocab: Vocabulary,
    info: InfoResponse,
    agent: ureq::Agent,
    calls: AtomicUsize,
}

impl std::fmt::Debug for RemoteEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEnv")
            .field("config", &self.config)
            .field("info", &self.info)
            .finish_non_exhaustive()
    }
}

enum Attempt {
    Done(String),
    Retry(Error),
    Fail(Error),
}

impl RemoteEnv {
    /// Fetches `/v1/info` and checks it against `config`.
    pub fn connect(config: RemoteConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let mut env = Self {
            config,
            vocab,
            info: InfoResponse {
                name: String::new(),
                mask_marker: String::new(),
                classes: None,
                deterministic_supported: false,
            },
            agent,
            calls: AtomicUsize::new(0),
        };
        let body = env.request_with_retries(INFO_PATH, None)?;
        env.info = serde_json::from_str(&body).map_err(|e| Error::SchemaError(format!("bad /v1/info body: {e}")))?;
        if env.config.task == RemoteTask::Classification && env.info.classes.as_ref().is_none_or(|c| c.len() < 2) {
            return Err(Error::SchemaError("classification server must list at least two classes".into()));
        }
        if env.config.deterministic && !env.info.deterministic_supported {
            log::warn!("{} does not support deterministic mode", env.config.url);
        }
        Ok(env)
    }

    pub fn info(&self) -> &InfoResponse {
        &self.info
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// Evaluate requests sent so far, retries included.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.url.trim_end_matches('/'), path)
    }

    fn attempt(&self, path: &str, body: Option<&str>) -> Attempt {
        let url = self.url(path);
        let res = match body {
            Some(b) => {
                self.calls.fetch_add(1, Ordering::SeqCst);
                self.agent.post(&url).header("content-type", "application/json").send(b)
            }
            None => self.agent.get(&url).call(),
        };
        match res {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string();
                match (status, text) {
                    (200, Ok(t)) => Attempt::Done(t),
                    (200, Err(e)) => Attempt::Retry(transport_error(&url, e)),
                    (503, t) => Attempt::Retry(Error::ProtocolError {
                        status,
                        body: t.unwrap_or_default(),
                    }),
                    (_, t) => Attempt::Fail(Error::ProtocolError {
                        status,
                        body: t.unwrap_or_default(),
                    }),
                }
            }
            Err(e) => Attempt::Retry(transport_error(&url, e)),
        }
    }

    fn request_with_retries(&self, path: &str, body: Option<&str>) -> Result<String> {
        let mut last = None;
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(25 << attempt.min(6)));
            }
            match self.attempt(path, body) {
                Attempt::Done(t) => return Ok(t),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    log::debug!("{path}: attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn request(&self, prompts: &[Prompt], examples: &[&Example], seed: u64) -> Result<EvaluateRequest> {
        let prompts = prompts.iter().map(|p| self.vocab.token_strings(p.ids())).collect::<Result<Vec<_>>>()?;
        let inputs = examples.iter().map(|e| e.input_text.clone()).collect();
        let mut req = EvaluateRequest {
            task: WireTask::Classification,
            template: self.config.template.clone(),
            prompts,
            inputs,
            labels: None,
            style_target: None,
            num_candidates: None,
            seed: Some(seed),
            deterministic: self.config.deterministic,
        };
        match self.config.task {
            RemoteTask::Classification => {
                req.labels = Some(examples.iter().map(|e| e.label.expect("validated")).collect());
            }
            RemoteTask::StyleTransfer { num_candidates } => {
                req.task = WireTask::StyleTransfer;
                req.style_target = examples.first().and_then(|e| e.style_target);
                req.num_candidates = Some(num_candidates);
            }
        }
        Ok(req)
    }

    fn call(&self, req: &EvaluateRequest) -> Result<EvaluateResponse> {
        let body = serde_json::to_string(req)?;
        let text = self.request_with_retries(EVALUATE_PATH, Some(&body))?;
        let resp: EvaluateResponse =
            serde_json::from_str(&text).map_err(|e| Error::SchemaError(format!("bad /v1/evaluate body: {e}")))?;
        resp.check_shape(req.prompts.len(), req.inputs.len()).map_err(Error::SchemaError)?;
        if self.config.task == RemoteTask::Classification && resp.class_probs.is_none() {
            return Err(Error::SchemaError("classification response without class_probs".into()));
        }
        Ok(resp)
    }
}

fn transport_error(url: &str, e: ureq::Error) -> Error {
    match e {
        ureq::Error::Timeout(t) => Error::Timeout(format!("{url}: {t}")),
        other => Error::RemoteUnavailable(format!("{url}: {other}")),
    }
}

/// One request: a block of prompt rows against a group of example columns.
struct Job {
    rows: std::ops::Range<usize>,
    cols: Vec<usize>,
}

impl Environment for RemoteEnv {
    fn name(&self) -> &str {
        &self.info.name
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn task(&self) -> TaskKind {
        match self.config.task {
            RemoteTask::Classification => TaskKind::Classification {
                num_classes: self.info.classes.as_ref().map_or(0, Vec::len),
                mask_marker: self.info.mask_marker.clone(),
            },
            RemoteTask::StyleTransfer { num_candidates } => TaskKind::StyleTransfer { num_candidates },
        }
    }

    fn prompt_length_bounds(&self) -> (usize, usize) {
        self.config.prompt_length_bounds
    }

    fn is_deterministic(&self) -> bool {
        self.config.deterministic && self.info.deterministic_supported
    }

    fn evaluate(&self, prompts: &[Prompt], examples: &[Example], seed: u64) -> Result<Evaluation> {
        validate_request(self, prompts, examples)?;
        // The protocol carries one style target per request.
        let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
        for (j, ex) in examples.iter().enumerate() {
            let key = match self.config.task {
                RemoteTask::Classification => None,
                RemoteTask::StyleTransfer { .. } => ex.style_target,
            };
            groups.entry(key).or_default().push(j);
        }
        let mut jobs = Vec::new();
        for cols in groups.into_values() {
            let mut start = 0;
            while start < prompts.len() {
                let end = (start + self.config.batch_cap).min(prompts.len());
                jobs.push(Job {
                    rows: start..end,
                    cols: cols.clone(),
                });
                start = end;
            }
        }

        let results: Mutex<Vec<Option<Result<EvaluateResponse>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.config.parallelism.min(jobs.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(job) = jobs.get(i) else { break };
                    let exs: Vec<&Example> = job.cols.iter().map(|&j| &examples[j]).collect();
                    let out = self.request(&prompts[job.rows.clone()], &exs, seed).and_then(|r| self.call(&r));
                    let failed = out.is_err();
                    results.lock().expect("results lock")[i] = Some(out);
                    if failed {
                        break;
                    }
                });
            }
        });

        let mut rewards = RewardMatrix::zeros(prompts.len(), examples.len());
        let mut class_probs: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); examples.len()]; prompts.len()];
        let mut outputs: Vec<Vec<String>> = vec![vec![String::new(); examples.len()]; prompts.len()];
        let (mut any_probs, mut any_outputs) = (false, false);
        let results = results.into_inner().expect("results lock");
        for (job, res) in jobs.iter().zip(results) {
            let resp = res.ok_or_else(|| Error::RemoteUnavailable("request abandoned after an earlier failure".into()))??;
            for (a, i) in job.rows.clone().enumerate() {
                for (b, &j) in job.cols.iter().enumerate() {
                    rewards.set(i, j, resp.rewards[a][b]);
                    if let Some(cp) = &resp.class_probs {
                        class_probs[i][j] = cp[a][b].clone();
                        any_probs = true;
                    }
                    if let Some(out) = &resp.outputs {
                        outputs[i][j] = out[a][b].clone();
                        any_outputs = true;
                    }
                }
            }
        }
        Ok(Evaluation {
            rewards,
            class_probs: any_probs.then_some(class_probs),
            outputs: any_outputs.then_some(outputs),
        })
    }

    fn class_probabilities(&self, prompt: &Prompt, example: &Example) -> Result<Vec<f64>> {
        if self.config.task != RemoteTask::Classification {
            return Err(Error::NotAClassifier);
        }
        let eval = self.evaluate(std::slice::from_ref(prompt), std::slice::from_ref(example), 0)?;
        Ok(eval.class_probs.expect("checked in call").remove(0).remove(0))
    }
}

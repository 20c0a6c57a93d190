//! HTTP annotation service for interactive active adaptation.
//!
//! The trainer thread talks to HTTP handlers only through [`Shared`]: it
//! publishes a round's queue and blocks at the epoch boundary until every
//! item is labeled or the operator advances the round. Handlers never touch
//! training state directly.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

use crate::error::{Error, Result};
use crate::mdi::{AnnotationOracle, AnnotationSet, Category, QueryItem, RoundOutcome};
use crate::trainer::{EpochMetrics, Mode, RunObserver};

pub const DEFAULT_ADDR: &str = "127.0.0.1:8490";

const POLL: Duration = Duration::from_millis(50);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub score: f32,
}

/// One queued sample as shown to the annotator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub sample_id: usize,
    pub category: Category,
    pub un_score: f32,
    pub top_classes_vision: Vec<ClassScore>,
    pub top_classes_text: Vec<ClassScore>,
    pub media_ref: Option<String>,
    pub round: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub sample_id: usize,
    pub label: u32,
    #[serde(default)]
    pub annotator: String,
    #[serde(default)]
    pub timestamp: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Status {
    pub mode: Mode,
    pub epoch: usize,
    pub max_epoch: usize,
    pub budget_total: usize,
    pub budget_used: usize,
    pub paused: bool,
    pub classes: Vec<String>,
}

#[derive(Debug)]
struct OpenRound {
    index: usize,
    items: Vec<AnnotationRequest>,
    labels: BTreeMap<usize, u32>,
}

impl OpenRound {
    fn complete(&self) -> bool {
        self.labels.len() == self.items.len()
    }
}

#[derive(Debug)]
struct State {
    mode: Mode,
    epoch: usize,
    max_epoch: usize,
    budget_total: usize,
    /// Labels committed to the trainer's annotation set.
    committed: usize,
    paused: bool,
    classes: Vec<String>,
    /// Sample ids already labeled in earlier rounds.
    labeled: Vec<bool>,
    metrics: Option<EpochMetrics>,
    round: Option<OpenRound>,
    rounds_opened: usize,
    advance: bool,
    log: Option<BufWriter<File>>,
}

impl State {
    fn budget_used(&self) -> usize {
        self.committed + self.round.as_ref().map_or(0, |r| r.labels.len())
    }

    fn status(&self) -> Status {
        Status {
            mode: self.mode,
            epoch: self.epoch,
            max_epoch: self.max_epoch,
            budget_total: self.budget_total,
            budget_used: self.budget_used(),
            paused: self.paused,
            classes: self.classes.clone(),
        }
    }
}

/// State shared between the trainer thread and HTTP handlers.
#[derive(Debug)]
pub struct Shared {
    state: Mutex<State>,
    changed: Condvar,
}

#[derive(Clone, Debug)]
pub struct SessionInfo {
    pub mode: Mode,
    pub max_epoch: usize,
    pub budget_total: usize,
    pub class_names: Vec<String>,
    pub n_target: usize,
    /// Optional media reference per target sample.
    pub media_refs: Option<Vec<String>>,
    /// Append-only log of accepted label submissions.
    pub response_log: Option<PathBuf>,
}

impl Shared {
    pub fn new(info: &SessionInfo) -> Result<Arc<Self>> {
        let log = match &info.response_log {
            Some(p) => Some(BufWriter::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            )),
            None => None,
        };
        Ok(Arc::new(Self {
            state: Mutex::new(State {
                mode: info.mode,
                epoch: 0,
                max_epoch: info.max_epoch,
                budget_total: info.budget_total,
                committed: 0,
                paused: false,
                classes: info.class_names.clone(),
                labeled: vec![false; info.n_target],
                metrics: None,
                round: None,
                rounds_opened: 0,
                advance: false,
                log,
            }),
            changed: Condvar::new(),
        }))
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn status(&self) -> Status {
        self.lock().status()
    }

    /// Unlabeled items of the open round, in selection order.
    pub fn queue(&self) -> Vec<AnnotationRequest> {
        let st = self.lock();
        match &st.round {
            Some(r) => r
                .items
                .iter()
                .filter(|it| !r.labels.contains_key(&it.sample_id))
                .cloned()
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn metrics(&self) -> Option<EpochMetrics> {
        self.lock().metrics.clone()
    }

    /// Accepts one label, mapping rejections to an HTTP status and reason.
    pub fn submit(&self, resp: &AnnotationResponse) -> std::result::Result<usize, (u16, String)> {
        let mut st = self.lock();
        let k = st.classes.len();
        if resp.label as usize >= k {
            return Err((400, format!("label {} out of range for {k} classes", resp.label)));
        }
        if st.labeled.get(resp.sample_id).copied().unwrap_or(false) {
            return Err((409, "duplicate".into()));
        }
        let Some(round) = st.round.as_ref() else {
            return Err((404, format!("sample {} is not in the queue", resp.sample_id)));
        };
        if !round.items.iter().any(|it| it.sample_id == resp.sample_id) {
            return Err((404, format!("sample {} is not in the queue", resp.sample_id)));
        }
        if round.labels.contains_key(&resp.sample_id) {
            return Err((409, "duplicate".into()));
        }
        if st.budget_used() >= st.budget_total {
            return Err((409, "budget".into()));
        }
        let round_index = round.index;
        if let Some(log) = st.log.as_mut() {
            let line = json!({"round": round_index, "response": resp});
            // The log is advisory; a failed write must not reject the label.
            let _ = writeln!(log, "{line}").and_then(|_| log.flush());
        }
        st.round
            .as_mut()
            .expect("round checked above")
            .labels
            .insert(resp.sample_id, resp.label);
        let used = st.budget_used();
        drop(st);
        self.changed.notify_all();
        Ok(used)
    }

    pub fn control(&self, action: &str) -> std::result::Result<(), String> {
        let mut st = self.lock();
        match action {
            "pause" => st.paused = true,
            "resume" => st.paused = false,
            "advance_round" => st.advance = true,
            other => return Err(format!("unknown action {other:?}")),
        }
        drop(st);
        self.changed.notify_all();
        Ok(())
    }
}

/// Trainer-side adapter: an annotation oracle that waits for human labels,
/// and an observer that honors pause and publishes metrics.
pub struct ServiceLink {
    shared: Arc<Shared>,
    media_refs: Option<Vec<String>>,
    interrupt: Option<Arc<AtomicBool>>,
}

impl ServiceLink {
    pub fn new(shared: Arc<Shared>, info: &SessionInfo, interrupt: Option<Arc<AtomicBool>>) -> Self {
        Self {
            shared,
            media_refs: info.media_refs.clone(),
            interrupt,
        }
    }

    fn interrupted(&self) -> bool {
        self.interrupt.as_ref().is_some_and(|f| f.load(Ordering::SeqCst))
    }

    /// Blocks until `done` holds, waking on every state change.
    fn wait_until(&self, mut done: impl FnMut(&mut State) -> bool) -> Result<MutexGuard<'_, State>> {
        let mut st = self.shared.lock();
        loop {
            if done(&mut st) {
                return Ok(st);
            }
            if self.interrupted() {
                return Err(Error::Interrupted);
            }
            st = self
                .shared
                .changed
                .wait_timeout(st, POLL)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    fn class_scores(&self, classes: &[String], top: &[(usize, f32)]) -> Vec<ClassScore> {
        top.iter()
            .map(|&(c, score)| ClassScore {
                class: classes.get(c).cloned().unwrap_or_else(|| c.to_string()),
                score,
            })
            .collect()
    }
}

impl AnnotationOracle for ServiceLink {
    fn annotate(&mut self, queries: &[QueryItem]) -> Result<RoundOutcome> {
        {
            let mut st = self.shared.lock();
            st.rounds_opened += 1;
            let index = st.rounds_opened;
            let items = queries
                .iter()
                .map(|q| AnnotationRequest {
                    sample_id: q.index,
                    category: q.category,
                    un_score: q.un_score,
                    top_classes_vision: self.class_scores(&st.classes, &q.top_vision),
                    top_classes_text: self.class_scores(&st.classes, &q.top_text),
                    media_ref: self.media_refs.as_ref().and_then(|m| m.get(q.index).cloned()),
                    round: index,
                })
                .collect();
            st.advance = false;
            st.round = Some(OpenRound {
                index,
                items,
                labels: BTreeMap::new(),
            });
        }
        self.shared.changed.notify_all();
        let mut st = self.wait_until(|st| {
            let r = st.round.as_ref().expect("round open");
            r.complete() || st.advance || st.budget_used() >= st.budget_total
        })?;
        st.advance = false;
        let round = st.round.take().expect("round open");
        let pairs: Vec<(usize, u32)> = round
            .items
            .iter()
            .filter_map(|it| round.labels.get(&it.sample_id).map(|&l| (it.sample_id, l)))
            .collect();
        for &(i, _) in &pairs {
            st.labeled[i] = true;
        }
        st.committed += pairs.len();
        drop(st);
        self.shared.changed.notify_all();
        Ok(RoundOutcome::Labeled(pairs))
    }
}

impl RunObserver for ServiceLink {
    fn on_metrics(&mut self, metrics: &EpochMetrics, annotations: &AnnotationSet) {
        let mut st = self.shared.lock();
        st.epoch = metrics.epoch;
        st.committed = annotations.len();
        st.metrics = Some(metrics.clone());
    }

    fn at_boundary(&mut self, epoch: usize) -> Result<()> {
        let mut st = self.wait_until(|st| !st.paused)?;
        st.epoch = epoch;
        Ok(())
    }
}

/// A running HTTP server; dropped or [`ServiceHandle::shutdown`] stops it.
pub struct ServiceHandle {
    pub addr: SocketAddr,
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Binds `addr` and serves requests on a background thread.
pub fn serve(addr: &str, shared: Arc<Shared>) -> Result<ServiceHandle> {
    let server = Server::http(addr).map_err(|e| Error::Service(format!("cannot bind {addr}: {e}")))?;
    let bound = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Service(format!("{addr} is not an IP address")))?;
    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));
    let thread = {
        let server = Arc::clone(&server);
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || {
            for req in server.incoming_requests() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                handle(req, &shared);
            }
        })
    };
    Ok(ServiceHandle {
        addr: bound,
        server,
        stop,
        thread: Some(thread),
    })
}

fn json_response(status: u16, body: &Value) -> Response<std::io::Cursor<Vec<u8>>> {
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(header)
}

fn error_body(reason: &str) -> Value {
    json!({ "error": reason })
}

fn read_json<T: for<'de> Deserialize<'de>>(req: &mut Request) -> std::result::Result<T, String> {
    let mut body = String::new();
    req.as_reader()
        .read_to_string(&mut body)
        .map_err(|e| format!("unreadable body: {e}"))?;
    serde_json::from_str(&body).map_err(|e| format!("invalid JSON: {e}"))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlBody {
    action: String,
}

fn route(req: &mut Request, shared: &Shared) -> (u16, Value) {
    let path = req.url().split('?').next().unwrap_or("").to_string();
    match (req.method(), path.as_str()) {
        (Method::Get, "/status") => (200, serde_json::to_value(shared.status()).expect("status")),
        (Method::Get, "/queue") => (200, serde_json::to_value(shared.queue()).expect("queue")),
        (Method::Get, "/metrics") => match shared.metrics() {
            Some(m) => (200, serde_json::to_value(m).expect("metrics")),
            None => (404, error_body("no metrics yet")),
        },
        (Method::Post, "/labels") => match read_json::<AnnotationResponse>(req) {
            Ok(resp) => match shared.submit(&resp) {
                Ok(used) => (200, json!({ "sample_id": resp.sample_id, "budget_used": used })),
                Err((code, reason)) => (code, error_body(&reason)),
            },
            Err(e) => (400, error_body(&e)),
        },
        (Method::Post, "/control") => match read_json::<ControlBody>(req) {
            Ok(body) => match shared.control(&body.action) {
                Ok(()) => (200, json!({ "action": body.action })),
                Err(e) => (400, error_body(&e)),
            },
            Err(e) => (400, error_body(&e)),
        },
        _ => (404, error_body("not found")),
    }
}

fn handle(mut req: Request, shared: &Shared) {
    let (status, body) = route(&mut req, shared);
    // A client that hung up is not the server's problem.
    let _ = req.respond(json_response(status, &body));
}

//! Cloud–device channel, privacy guard and the session pipeline.
//!
//! Device and cloud exchange [`WireMessage`]s only. Request payloads are
//! built from [`Abstract`] and plan fields, so no history or raw query type
//! can be serialized into them, and every device→cloud message is also
//! scanned by [`guard_message`] before it is sent.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{CloudAgent, CloudError};
use crate::device::{privacy_terms, DeviceAgent, DeviceError};
use crate::domain::{Abstract, CandidateSet, Query, RecommendationList, StrategyPlan, UserHistory};
use crate::eval::geo_filter;
use crate::vecmath::Embedding;

/// Largest accepted frame on the socket transport.
const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    PlanRequest,
    PlanResponse,
    RetrieveRequest,
    RetrieveResponse,
    /// Cloud-side failure reply.
    Failure,
}

impl MessageKind {
    pub fn is_request(self) -> bool {
        matches!(self, Self::PlanRequest | Self::RetrieveRequest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveRequest {
    #[serde(rename = "abstract")]
    pub abstract_: Abstract,
    pub alpha: f64,
    pub tag_weights: IndexMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResponse {
    pub plan: StrategyPlan,
    pub attempts: u32,
    pub repaired: bool,
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub semantic: Embedding,
    pub alpha_used: f64,
    pub candidates: CandidateSet,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum Payload {
    PlanRequest {
        #[serde(rename = "abstract")]
        abstract_: Abstract,
    },
    PlanResponse(PlanResponse),
    RetrieveRequest(RetrieveRequest),
    RetrieveResponse(RetrieveResponse),
    Failure {
        message: String,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::PlanRequest { .. } => MessageKind::PlanRequest,
            Self::PlanResponse(_) => MessageKind::PlanResponse,
            Self::RetrieveRequest(_) => MessageKind::RetrieveRequest,
            Self::RetrieveResponse(_) => MessageKind::RetrieveResponse,
            Self::Failure { .. } => MessageKind::Failure,
        }
    }
}

/// A serialized message as it travels over the channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    kind: MessageKind,
    bytes: Vec<u8>,
}

impl WireMessage {
    pub fn encode(payload: &Payload) -> Self {
        Self {
            kind: payload.kind(),
            bytes: serde_json::to_vec(payload).expect("payload serializes"),
        }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ChannelError> {
        let payload: Payload = serde_json::from_slice(&bytes).map_err(|e| ChannelError::Codec(e.to_string()))?;
        Ok(Self {
            kind: payload.kind(),
            bytes,
        })
    }

    pub fn decode(&self) -> Result<Payload, ChannelError> {
        serde_json::from_slice(&self.bytes).map_err(|e| ChannelError::Codec(e.to_string()))
    }

    pub fn kind(&self) -> MessageKind {
        self.kind
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn byte_size(&self) -> usize {
        self.bytes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("privacy violation: payload contains {offending:?}")]
pub struct PrivacyViolation {
    pub offending: Vec<String>,
}

fn string_leaves<'a>(value: &'a serde_json::Value, out: &mut Vec<&'a str>) {
    match value {
        serde_json::Value::String(s) => out.push(s),
        serde_json::Value::Array(items) => items.iter().for_each(|v| string_leaves(v, out)),
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                out.push(k);
                string_leaves(v, out);
            }
        }
        _ => {}
    }
}

/// Scans the serialized payload, and each decoded string in it, for every
/// forbidden substring.
pub fn guard_message(msg: &WireMessage, forbidden: &BTreeSet<String>) -> Result<(), PrivacyViolation> {
    let text = String::from_utf8_lossy(&msg.bytes);
    let value: serde_json::Value = serde_json::from_slice(&msg.bytes).unwrap_or(serde_json::Value::Null);
    let mut leaves = Vec::new();
    string_leaves(&value, &mut leaves);
    let offending: Vec<String> = forbidden
        .iter()
        .filter(|f| !f.is_empty())
        .filter(|f| text.contains(f.as_str()) || leaves.iter().any(|l| l.contains(f.as_str())))
        .cloned()
        .collect();
    if offending.is_empty() {
        Ok(())
    } else {
        Err(PrivacyViolation { offending })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub one_way_delay_ms: f64,
    /// Throughput; zero means unlimited.
    pub bytes_per_ms: f64,
}

impl Default for ChannelProfile {
    fn default() -> Self {
        Self {
            one_way_delay_ms: 5.0,
            bytes_per_ms: 1000.0,
        }
    }
}

impl ChannelProfile {
    pub const INSTANT: Self = Self {
        one_way_delay_ms: 0.0,
        bytes_per_ms: 0.0,
    };
}

/// Delivery delay in milliseconds: `one_way + bytes / throughput`.
pub fn simulate_channel(msg: &WireMessage, profile: &ChannelProfile) -> f64 {
    let transfer = if profile.bytes_per_ms > 0.0 {
        msg.byte_size() as f64 / profile.bytes_per_ms
    } else {
        0.0
    };
    profile.one_way_delay_ms.max(0.0) + transfer
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("malformed message: {0}")]
    Codec(String),
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("cloud node failed: {0}")]
    Remote(String),
    #[error("unexpected {got:?} reply to {sent:?}")]
    Unexpected { sent: MessageKind, got: MessageKind },
}

/// Time source for latency accounting.
pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        thread::sleep(d);
    }
}

thread_local! {
    static VIRTUAL_NOW: Cell<Duration> = const { Cell::new(Duration::ZERO) };
}

/// Per-thread virtual time: `sleep` advances the calling thread's clock
/// instantly and nothing else does. Durations measured on one thread are
/// therefore exact.
#[derive(Debug, Clone, Copy, Default)]
pub struct VirtualClock;

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        VIRTUAL_NOW.with(Cell::get)
    }

    fn sleep(&self, d: Duration) {
        VIRTUAL_NOW.with(|t| t.set(t.get() + d));
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// The cloud side of the channel.
pub struct CloudNode {
    agent: CloudAgent,
    clock: Arc<dyn Clock>,
    /// Extra cost charged inside every retrieve request.
    retrieve_cost: Duration,
}

impl CloudNode {
    pub fn new(agent: CloudAgent) -> Self {
        Self {
            agent,
            clock: Arc::new(SystemClock::default()),
            retrieve_cost: Duration::ZERO,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_retrieve_cost(mut self, cost: Duration) -> Self {
        self.retrieve_cost = cost;
        self
    }

    pub fn agent(&self) -> &CloudAgent {
        &self.agent
    }

    pub fn handle(&self, msg: &WireMessage) -> WireMessage {
        let reply = match msg.decode() {
            Ok(payload) => self
                .dispatch(payload)
                .unwrap_or_else(|e| Payload::Failure { message: e.to_string() }),
            Err(e) => Payload::Failure { message: e.to_string() },
        };
        WireMessage::encode(&reply)
    }

    fn dispatch(&self, payload: Payload) -> Result<Payload, CloudError> {
        match payload {
            Payload::PlanRequest { abstract_ } => {
                let out = self.agent.plan_strategy(&abstract_)?;
                Ok(Payload::PlanResponse(PlanResponse {
                    plan: out.plan,
                    attempts: out.attempts,
                    repaired: out.repaired,
                    fallback: out.fallback,
                }))
            }
            Payload::RetrieveRequest(req) => {
                if !self.retrieve_cost.is_zero() {
                    self.clock.sleep(self.retrieve_cost);
                }
                let sem = self.agent.semantic_user_embedding(&req.abstract_, req.alpha)?;
                let candidates = self.agent.retrieve(&sem.embedding, &req.tag_weights)?;
                Ok(Payload::RetrieveResponse(RetrieveResponse {
                    semantic: sem.embedding,
                    alpha_used: sem.alpha_used,
                    candidates,
                    warning: sem.warning,
                }))
            }
            other => Ok(Payload::Failure {
                message: format!("cloud node cannot handle {:?}", other.kind()),
            }),
        }
    }
}

/// Request/response transport from the device to the cloud node.
pub trait Channel: Send + Sync {
    fn call(&self, msg: &WireMessage) -> Result<WireMessage, ChannelError>;
}

/// Same-process transport; messages still cross as bytes.
pub struct InProcessChannel {
    node: Arc<CloudNode>,
}

impl InProcessChannel {
    pub fn new(node: Arc<CloudNode>) -> Self {
        Self { node }
    }
}

impl Channel for InProcessChannel {
    fn call(&self, msg: &WireMessage) -> Result<WireMessage, ChannelError> {
        let received = WireMessage::from_bytes(msg.bytes.clone())?;
        WireMessage::from_bytes(self.node.handle(&received).bytes)
    }
}

pub fn write_frame<W: Write>(out: &mut W, msg: &WireMessage) -> Result<(), ChannelError> {
    let len = u32::try_from(msg.byte_size()).map_err(|_| ChannelError::FrameTooLarge(msg.byte_size()))?;
    out.write_all(&len.to_be_bytes())?;
    out.write_all(&msg.bytes)?;
    out.flush()?;
    Ok(())
}

/// `None` on a clean end of stream before a frame starts.
pub fn read_frame<R: Read>(input: &mut R) -> Result<Option<WireMessage>, ChannelError> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(ChannelError::FrameTooLarge(len));
    }
    let mut bytes = vec![0u8; len];
    input.read_exact(&mut bytes)?;
    WireMessage::from_bytes(bytes).map(Some)
}

/// Serves frames on one connection until the peer closes it.
pub fn serve_connection(mut stream: TcpStream, node: &CloudNode) -> Result<(), ChannelError> {
    while let Some(msg) = read_frame(&mut stream)? {
        write_frame(&mut stream, &node.handle(&msg))?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve(listener: TcpListener, node: Arc<CloudNode>) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let node = node.clone();
        thread::spawn(move || {
            if let Err(e) = serve_connection(stream, &node) {
                log::warn!("cloud connection ended: {e}");
            }
        });
    }
    Ok(())
}

/// Binds an ephemeral local port and serves on a background thread.
pub fn spawn_local_server(node: Arc<CloudNode>) -> io::Result<SocketAddr> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    thread::spawn(move || serve(listener, node));
    Ok(addr)
}

/// Socket transport with length-prefixed frames.
pub struct TcpChannel {
    stream: Mutex<TcpStream>,
}

impl TcpChannel {
    pub fn connect(addr: SocketAddr) -> Result<Self, ChannelError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream: Mutex::new(stream),
        })
    }
}

impl Channel for TcpChannel {
    fn call(&self, msg: &WireMessage) -> Result<WireMessage, ChannelError> {
        let mut stream = self.stream.lock().unwrap_or_else(|p| p.into_inner());
        write_frame(&mut *stream, msg)?;
        read_frame(&mut *stream)?.ok_or_else(|| {
            ChannelError::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "cloud closed the connection",
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOptions {
    pub k: usize,
    pub explain: bool,
    pub mode: ExecutionMode,
    pub channel: ChannelProfile,
    /// Reference time for recency, seconds since epoch.
    pub now: i64,
    pub staleness_days: i64,
    /// Fixed plan used instead of asking the planner.
    pub plan_override: Option<StrategyPlan>,
    /// Retrieval tag counts used instead of the plan's.
    pub retrieval_override: Option<IndexMap<String, u32>>,
    /// Keep only candidates within this many km of the user's last location.
    pub geo_radius_km: Option<f64>,
    /// Extra cost charged to the device's structured stage.
    pub device_cost_ms: u64,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            k: 10,
            explain: false,
            mode: ExecutionMode::Parallel,
            channel: ChannelProfile::default(),
            now: 0,
            staleness_days: 30,
            plan_override: None,
            retrieval_override: None,
            geo_radius_km: None,
            device_cost_ms: 0,
        }
    }
}

/// Per-session timings in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyLedger {
    /// abstract, plan, semantic_retrieval, structured, rank, explain
    pub stages: IndexMap<String, f64>,
    /// Simulated delivery delay per message.
    pub channel: Vec<(MessageKind, f64)>,
    pub cloud_branch_ms: f64,
    pub device_branch_ms: f64,
    /// Contribution of the cloud/device segment to the end-to-end time.
    pub concurrent_segment_ms: f64,
    pub end_to_end_ms: f64,
}

impl LatencyLedger {
    pub fn channel_total_ms(&self) -> f64 {
        self.channel.iter().map(|(_, d)| d).sum()
    }

    /// One `stage: ms` line per entry.
    pub fn execution_log(&self) -> String {
        let mut lines: Vec<String> = self.stages.iter().map(|(s, d)| format!("{s}: {d:.2} ms")).collect();
        lines.push(format!("channel: {:.2} ms", self.channel_total_ms()));
        lines.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub recommendations: RecommendationList,
    pub explanation: Option<String>,
    pub ledger: LatencyLedger,
    pub abstract_: Abstract,
    pub plan: StrategyPlan,
    pub candidates: usize,
    /// Device→cloud messages, as sent.
    pub outbound: Vec<WireMessage>,
    /// Messages the guard stopped before sending.
    pub blocked: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("{stage}: {source}")]
    Channel {
        stage: &'static str,
        #[source]
        source: ChannelError,
    },
    #[error("{stage}: {source}")]
    Device {
        stage: &'static str,
        #[source]
        source: DeviceError,
    },
    #[error("{stage}: {source}")]
    Privacy {
        stage: &'static str,
        #[source]
        source: PrivacyViolation,
    },
}

/// Sent messages and their simulated delays, in order.
type Traffic = (Vec<WireMessage>, Vec<(MessageKind, f64)>);

/// Device-side session runner.
pub struct Session<'a> {
    pub device: &'a DeviceAgent,
    pub channel: &'a dyn Channel,
    pub clock: &'a dyn Clock,
}

struct Timer<'c> {
    clock: &'c dyn Clock,
    start: Duration,
}

impl<'c> Timer<'c> {
    fn start(clock: &'c dyn Clock) -> Self {
        Self {
            clock,
            start: clock.now(),
        }
    }

    fn ms(&self) -> f64 {
        ms(self.clock.now().saturating_sub(self.start))
    }
}

impl Session<'_> {
    fn send(
        &self,
        stage: &'static str,
        payload: &Payload,
        expect: MessageKind,
        forbidden: &BTreeSet<String>,
        result: &mut Traffic,
        profile: &ChannelProfile,
    ) -> Result<Payload, SessionError> {
        let msg = WireMessage::encode(payload);
        guard_message(&msg, forbidden).map_err(|source| SessionError::Privacy { stage, source })?;
        result.1.push((msg.kind(), simulate_channel(&msg, profile)));
        let reply = self
            .channel
            .call(&msg)
            .map_err(|source| SessionError::Channel { stage, source })?;
        let sent = msg.kind();
        result.0.push(msg);
        result.1.push((reply.kind(), simulate_channel(&reply, profile)));
        let payload = reply
            .decode()
            .map_err(|source| SessionError::Channel { stage, source })?;
        match payload {
            Payload::Failure { message } => Err(SessionError::Channel {
                stage,
                source: ChannelError::Remote(message),
            }),
            p if p.kind() == expect => Ok(p),
            p => Err(SessionError::Channel {
                stage,
                source: ChannelError::Unexpected { sent, got: p.kind() },
            }),
        }
    }

    /// Runs one recommendation session end to end.
    ///
    /// Abstract, then plan over the channel, then the cloud branch
    /// (semantic embedding and retrieval) and the device branch (structured
    /// encoder) concurrently, then ranking and the optional explanation.
    /// Channel delays are simulated from message sizes and added to the
    /// measured time, never slept.
    pub fn run(
        &self,
        query: &Query,
        history: &UserHistory,
        opts: &SessionOptions,
    ) -> Result<SessionResult, SessionError> {
        let device = self.device;
        let forbidden = privacy_terms(query, history, device.catalog());
        let mut ledger = LatencyLedger::default();
        let mut warnings = Vec::new();
        let mut wire = (Vec::new(), Vec::new());
        let mut blocked = 0;
        let session_timer = Timer::start(self.clock);

        let t = Timer::start(self.clock);
        let outcome = device
            .generate_abstract(query, history, opts.now, opts.staleness_days)
            .map_err(|source| SessionError::Device {
                stage: "abstract",
                source,
            })?;
        if let Some(reason) = outcome.fallback {
            warnings.push(format!("abstract fallback: {reason}"));
        }
        let mut abs = outcome.abstract_;
        let probe = WireMessage::encode(&Payload::PlanRequest { abstract_: abs.clone() });
        if let Err(v) = guard_message(&probe, &forbidden) {
            blocked += 1;
            log::warn!("{v}; resending with the deterministic abstract");
            warnings.push(format!("guard blocked the abstract: {v}"));
            abs = device.fallback_abstract(query, history, opts.now, opts.staleness_days);
        }
        ledger.stages.insert("abstract".into(), t.ms());

        let t = Timer::start(self.clock);
        let plan = match &opts.plan_override {
            Some(plan) => plan.clone(),
            None => {
                let reply = self.send(
                    "plan",
                    &Payload::PlanRequest { abstract_: abs.clone() },
                    MessageKind::PlanResponse,
                    &forbidden,
                    &mut wire,
                    &opts.channel,
                )?;
                let Payload::PlanResponse(resp) = reply else {
                    unreachable!()
                };
                if let Some(reason) = resp.fallback {
                    warnings.push(format!("plan fallback: {reason}"));
                }
                resp.plan
            }
        };
        ledger.stages.insert("plan".into(), t.ms());

        let request = Payload::RetrieveRequest(RetrieveRequest {
            abstract_: abs.clone(),
            alpha: plan.alpha,
            tag_weights: opts
                .retrieval_override
                .clone()
                .unwrap_or_else(|| plan.tag_weights.clone()),
        });
        let cloud_branch = |wire: &mut Traffic| {
            let t = Timer::start(self.clock);
            let reply = self.send(
                "semantic_retrieval",
                &request,
                MessageKind::RetrieveResponse,
                &forbidden,
                wire,
                &opts.channel,
            );
            (reply, t.ms())
        };
        let device_branch = || {
            let t = Timer::start(self.clock);
            let out = device.structured_user_embedding(history, &plan);
            if opts.device_cost_ms > 0 && plan.structured_enabled {
                self.clock.sleep(Duration::from_millis(opts.device_cost_ms));
            }
            (out, t.ms())
        };

        let segment = Timer::start(self.clock);
        let ((cloud, cloud_ms), (structured, device_ms)) = match opts.mode {
            // the cloud branch stays on this thread: it may use the rayon pool,
            // which must not wait behind a blocked worker
            ExecutionMode::Parallel => thread::scope(|s| {
                let handle = s.spawn(device_branch);
                let cloud = cloud_branch(&mut wire);
                (cloud, handle.join().expect("device branch panicked"))
            }),
            ExecutionMode::Sequential => {
                let cloud = cloud_branch(&mut wire);
                (cloud, device_branch())
            }
        };
        let segment_wall = segment.ms();
        let Payload::RetrieveResponse(retrieved) = cloud? else {
            unreachable!()
        };
        let (structured, warning) = structured.map_err(|source| SessionError::Device {
            stage: "structured",
            source,
        })?;
        warnings.extend(retrieved.warning);
        warnings.extend(warning);
        ledger.stages.insert("semantic_retrieval".into(), cloud_ms);
        if plan.structured_enabled {
            ledger.stages.insert("structured".into(), device_ms);
        }
        ledger.cloud_branch_ms = cloud_ms;
        ledger.device_branch_ms = if plan.structured_enabled { device_ms } else { 0.0 };
        // per-thread clocks cannot see the join, so never report less than the branches
        ledger.concurrent_segment_ms = match opts.mode {
            ExecutionMode::Parallel => segment_wall.max(ledger.cloud_branch_ms.max(ledger.device_branch_ms)),
            ExecutionMode::Sequential => segment_wall.max(ledger.cloud_branch_ms + ledger.device_branch_ms),
        };

        let t = Timer::start(self.clock);
        let mut candidates = retrieved.candidates;
        if let Some(radius) = opts.geo_radius_km {
            match history.last_geo() {
                Some(user_geo) => {
                    let (kept, missing) = geo_filter(&candidates, user_geo, radius, device.catalog());
                    if missing > 0 {
                        warnings.push(format!("{missing} candidates without coordinates dropped"));
                    }
                    candidates = kept;
                }
                None => warnings.push("no user location; geo filter skipped".into()),
            }
        }
        let beta = if structured.is_some() { plan.beta } else { 1.0 };
        let (recommendations, diag) = device
            .final_rank(&retrieved.semantic, structured.as_ref(), beta, &candidates, opts.k)
            .map_err(|source| SessionError::Device { stage: "rank", source })?;
        warnings.extend(diag);
        ledger.stages.insert("rank".into(), t.ms());

        let explanation = if opts.explain && !recommendations.ranked.is_empty() {
            let t = Timer::start(self.clock);
            let text = device
                .generate_explanation(&plan, &recommendations, &ledger.execution_log())
                .map_err(|source| SessionError::Device {
                    stage: "explain",
                    source,
                })?;
            ledger.stages.insert("explain".into(), t.ms());
            Some(text)
        } else {
            None
        };

        ledger.channel = wire.1;
        let sequential_parts: f64 = ledger
            .stages
            .iter()
            .filter(|(s, _)| !matches!(s.as_str(), "semantic_retrieval" | "structured"))
            .map(|(_, d)| d)
            .sum();
        let measured = session_timer.ms() - segment_wall;
        ledger.end_to_end_ms =
            measured.max(sequential_parts) + ledger.concurrent_segment_ms + ledger.channel_total_ms();

        Ok(SessionResult {
            recommendations,
            explanation,
            ledger,
            abstract_: abs,
            plan,
            candidates: candidates.len(),
            outbound: wire.0,
            blocked,
            warnings,
        })
    }
}

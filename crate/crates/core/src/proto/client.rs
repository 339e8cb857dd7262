use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{read_message, write_message, ErrorCode, Message, RemoteError, Served};
use super::ProtoError;
use crate::channel::{ChannelConfig, PhaseMetrics, TransferReport};
use crate::checksum::Digest;
use crate::codec::{decode_timed, Payload};
use crate::evalnet::{forward, MlpSpec};
use crate::model::{Bitwidth, ModelManifest, TensorModel};
use crate::quant::dequantize;
use crate::update::apply_update;

/// Where a client is in the delivery workflow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionState {
    Idle,
    AwaitingModel,
    ServingLowPrec,
    /// The low-precision model keeps serving while the update is in flight.
    AwaitingUpdate,
    ServingProxy,
}

impl SessionState {
    pub fn can_infer(self) -> bool {
        matches!(
            self,
            SessionState::ServingLowPrec | SessionState::AwaitingUpdate | SessionState::ServingProxy
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Low(Bitwidth),
    Proxy { base: Bitwidth, update: Bitwidth },
}

/// The model a session currently answers inference with.
#[derive(Clone, Debug, PartialEq)]
pub struct ServedModel {
    pub weights: TensorModel,
    pub precision: Precision,
}

/// When the update is requested after the base arrives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TriggerPolicy {
    Immediate,
    AfterDelay(Duration),
    /// Only when [`ClientSession::fetch_update`] is called.
    Manual,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FetchOptions {
    /// Used to fill in the simulated transfer time of each phase.
    pub channel: ChannelConfig,
    /// Passed to the server to choose the update bitwidth; `None` asks for
    /// a 32-bit update.
    pub tolerance: Option<f64>,
    /// Connect, read and write timeout for each request.
    pub timeout: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        FetchOptions {
            channel: ChannelConfig::default(),
            tolerance: None,
            timeout: Duration::from_secs(30),
        }
    }
}

struct Base {
    low: TensorModel,
    checksum: Digest,
    metrics: PhaseMetrics,
}

struct Inner {
    state: SessionState,
    serving: Option<Arc<ServedModel>>,
    base: Option<Base>,
    update: Option<(PhaseMetrics, f64, Bitwidth)>,
    base_refetches: u32,
}

/// Client side of one progressive delivery.
///
/// The session can be shared between threads: one can call
/// [`ClientSession::infer`] while another runs [`ClientSession::fetch_update`].
/// The served model is replaced by a single pointer swap, so an inference
/// sees either the whole low-precision model or the whole proxy.
pub struct ClientSession {
    addr: SocketAddr,
    model_id: String,
    bitwidth: Bitwidth,
    opts: FetchOptions,
    inner: RwLock<Inner>,
    fetching: Mutex<()>,
}

fn request(addr: SocketAddr, timeout: Duration, msg: &Message) -> Result<Message, ProtoError> {
    let stream = TcpStream::connect_timeout(&addr, timeout).map_err(super::wire::WireError::from)?;
    stream.set_read_timeout(Some(timeout)).ok();
    stream.set_write_timeout(Some(timeout)).ok();
    stream.set_nodelay(true).ok();
    let mut writer = BufWriter::new(stream.try_clone().map_err(super::wire::WireError::from)?);
    write_message(&mut writer, msg)?;
    read_message(&mut BufReader::new(stream))?.ok_or(ProtoError::ConnectionClosed)
}

fn resolve(addr: impl ToSocketAddrs) -> Result<SocketAddr, ProtoError> {
    addr.to_socket_addrs()
        .map_err(super::wire::WireError::from)?
        .next()
        .ok_or(ProtoError::ConnectionClosed)
}

/// Asks the server for its manifests.
pub fn list_models(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Vec<ModelManifest>, ProtoError> {
    match request(resolve(addr)?, timeout, &Message::ListModels)? {
        Message::ModelList(m) => Ok(m),
        _ => Err(ProtoError::UnexpectedReply),
    }
}

impl ClientSession {
    pub fn new(
        addr: impl ToSocketAddrs,
        model_id: impl Into<String>,
        bitwidth: Bitwidth,
        opts: FetchOptions,
    ) -> Result<Self, ProtoError> {
        Ok(ClientSession {
            addr: resolve(addr)?,
            model_id: model_id.into(),
            bitwidth,
            opts,
            inner: RwLock::new(Inner {
                state: SessionState::Idle,
                serving: None,
                base: None,
                update: None,
                base_refetches: 0,
            }),
            fetching: Mutex::new(()),
        })
    }

    pub fn state(&self) -> SessionState {
        self.inner.read().unwrap().state
    }

    fn set_state(&self, state: SessionState) {
        self.inner.write().unwrap().state = state;
    }

    fn expect_state(&self, want: SessionState, action: &'static str) -> Result<(), ProtoError> {
        let state = self.state();
        if state != want {
            return Err(ProtoError::InvalidState { state, action });
        }
        Ok(())
    }

    /// The model inference should use right now.
    pub fn current_model(&self) -> Result<Arc<ServedModel>, ProtoError> {
        let inner = self.inner.read().unwrap();
        match (&inner.serving, inner.state.can_infer()) {
            (Some(m), true) => Ok(m.clone()),
            _ => Err(ProtoError::NotReady(inner.state)),
        }
    }

    /// Logits of the current model at `x`.
    pub fn infer(&self, spec: &MlpSpec, x: &[f32]) -> Result<Vec<f32>, ProtoError> {
        let model = self.current_model()?;
        Ok(forward(spec, &model.weights, x)?)
    }

    fn download_base(&self) -> Result<Base, ProtoError> {
        let msg = Message::ModelRequest {
            model_id: self.model_id.clone(),
            bitwidth: self.bitwidth.bits() as u8,
        };
        let served = match request(self.addr, self.opts.timeout, &msg)? {
            Message::ModelResponse(r) => r.map_err(ProtoError::Remote)?,
            _ => return Err(ProtoError::UnexpectedReply),
        };
        let (payload, decode_t) = decode_timed(&served.bitstream)?;
        let q = match payload {
            Payload::Model(q) if q.bitwidth() == self.bitwidth && q.name() == self.model_id => q,
            _ => return Err(ProtoError::UnexpectedReply),
        };
        let start = Instant::now();
        let low = dequantize(&q);
        let dequantize_s = start.elapsed().as_secs_f64();
        Ok(Base {
            low,
            checksum: served.bitstream.checksum(),
            metrics: phase(&served, decode_t, dequantize_s, &self.opts.channel),
        })
    }

    fn install_base(&self, base: Base, state: SessionState) {
        let serving = Arc::new(ServedModel {
            weights: base.low.clone(),
            precision: Precision::Low(self.bitwidth),
        });
        let mut inner = self.inner.write().unwrap();
        inner.base = Some(base);
        inner.serving = Some(serving);
        inner.state = state;
    }

    /// Requests and installs the low-precision model. Valid only from `Idle`;
    /// on failure the session returns to `Idle`.
    pub fn fetch_base(&self) -> Result<(), ProtoError> {
        let _guard = self.fetching.lock().unwrap();
        self.expect_state(SessionState::Idle, "fetch the base model")?;
        self.set_state(SessionState::AwaitingModel);
        match self.download_base() {
            Ok(base) => {
                self.install_base(base, SessionState::ServingLowPrec);
                Ok(())
            }
            Err(e) => {
                self.set_state(SessionState::Idle);
                Err(e)
            }
        }
    }

    fn download_update(&self, checksum: Digest) -> Result<Served, ProtoError> {
        let msg = Message::UpdateRequest {
            model_id: self.model_id.clone(),
            base_bitwidth: self.bitwidth.bits() as u8,
            base_checksum: checksum,
            tolerance: self.opts.tolerance,
        };
        match request(self.addr, self.opts.timeout, &msg)? {
            Message::UpdateResponse(r) => r.map_err(ProtoError::Remote),
            _ => Err(ProtoError::UnexpectedReply),
        }
    }

    fn base_checksum(&self) -> Digest {
        self.inner.read().unwrap().base.as_ref().expect("base installed").checksum
    }

    fn upgrade(&self) -> Result<(), ProtoError> {
        let served = match self.download_update(self.base_checksum()) {
            Err(ProtoError::Remote(RemoteError {
                code: ErrorCode::ChecksumMismatch,
                ..
            })) => {
                // The server's encoding changed under us. Re-fetch the base
                // once, keep serving it, and ask again.
                let base = self.download_base()?;
                self.install_base(base, SessionState::AwaitingUpdate);
                self.inner.write().unwrap().base_refetches += 1;
                self.download_update(self.base_checksum())?
            }
            other => other?,
        };
        let (payload, decode_t) = decode_timed(&served.bitstream)?;
        let update = match payload {
            Payload::Update(u) if u.base_bitwidth() == self.bitwidth && u.model_id() == self.model_id => u,
            _ => return Err(ProtoError::UnexpectedReply),
        };
        let (low, checksum) = {
            let inner = self.inner.read().unwrap();
            let b = inner.base.as_ref().expect("base installed");
            (b.low.clone(), b.checksum)
        };
        let start = Instant::now();
        let proxy = apply_update(&low, &checksum, &update)?;
        let apply_s = start.elapsed().as_secs_f64();
        let serving = Arc::new(ServedModel {
            weights: proxy,
            precision: Precision::Proxy {
                base: self.bitwidth,
                update: update.update_bitwidth(),
            },
        });
        let mut inner = self.inner.write().unwrap();
        inner.update = Some((
            phase(&served, decode_t, 0.0, &self.opts.channel),
            apply_s,
            update.update_bitwidth(),
        ));
        inner.serving = Some(serving);
        inner.state = SessionState::ServingProxy;
        Ok(())
    }

    /// Requests the update and swaps in the proxy. Valid only from
    /// `ServingLowPrec`; on failure the session keeps serving the
    /// low-precision model. A checksum refusal triggers one automatic
    /// re-fetch of the base.
    pub fn fetch_update(&self) -> Result<(), ProtoError> {
        let _guard = self.fetching.lock().unwrap();
        self.expect_state(SessionState::ServingLowPrec, "fetch the update")?;
        self.set_state(SessionState::AwaitingUpdate);
        self.upgrade().inspect_err(|_| self.set_state(SessionState::ServingLowPrec))
    }

    pub fn low_model(&self) -> Option<TensorModel> {
        self.inner.read().unwrap().base.as_ref().map(|b| b.low.clone())
    }

    pub fn low_checksum(&self) -> Option<Digest> {
        self.inner.read().unwrap().base.as_ref().map(|b| b.checksum)
    }

    pub fn proxy_model(&self) -> Option<TensorModel> {
        let inner = self.inner.read().unwrap();
        match (&inner.serving, inner.state) {
            (Some(m), SessionState::ServingProxy) => Some(m.weights.clone()),
            _ => None,
        }
    }

    pub fn update_bitwidth(&self) -> Option<Bitwidth> {
        self.inner.read().unwrap().update.map(|u| u.2)
    }

    /// How many times the base was downloaded again after a checksum refusal.
    pub fn base_refetches(&self) -> u32 {
        self.inner.read().unwrap().base_refetches
    }

    /// Accounting for what has been delivered so far. The base phase reflects
    /// the most recent base download.
    pub fn report(&self) -> Option<TransferReport> {
        let inner = self.inner.read().unwrap();
        let base = inner.base.as_ref()?;
        Some(TransferReport::new(
            base.metrics,
            inner.update.map(|u| u.0),
            inner.update.map_or(0.0, |u| u.1),
        ))
    }
}

fn phase(served: &Served, decode: Duration, dequantize_s: f64, channel: &ChannelConfig) -> PhaseMetrics {
    PhaseMetrics {
        encoded_bytes: served.bitstream.len() as u64,
        encode_s: served.prepare_s,
        channel_s: 0.0,
        decode_s: decode.as_secs_f64(),
        dequantize_s,
    }
    .over(channel)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Base,
    Update,
}

/// A phase that did not complete.
#[derive(Debug)]
pub struct PhaseFailure {
    pub phase: Phase,
    pub error: ProtoError,
}

/// Result of [`fetch_progressive`]. The low-precision model is always present;
/// the proxy is absent when the update was not triggered or failed.
#[derive(Debug)]
pub struct FetchOutcome {
    pub low: TensorModel,
    pub low_checksum: Digest,
    pub proxy: Option<TensorModel>,
    pub update_bitwidth: Option<Bitwidth>,
    pub report: TransferReport,
    pub failure: Option<PhaseFailure>,
    pub base_refetches: u32,
}

/// Runs the whole client workflow: fetch the base, then (depending on
/// `trigger`) fetch and apply the update. A failed base fetch is an error;
/// a failed update still returns the low-precision model with the failure
/// recorded.
pub fn fetch_progressive(
    addr: impl ToSocketAddrs,
    model_id: &str,
    bitwidth: Bitwidth,
    trigger: TriggerPolicy,
    opts: FetchOptions,
) -> Result<FetchOutcome, ProtoError> {
    let session = ClientSession::new(addr, model_id, bitwidth, opts)?;
    session.fetch_base()?;
    let failure = match trigger {
        TriggerPolicy::Manual => None,
        TriggerPolicy::Immediate | TriggerPolicy::AfterDelay(_) => {
            if let TriggerPolicy::AfterDelay(d) = trigger {
                thread::sleep(d);
            }
            session.fetch_update().err().map(|error| PhaseFailure {
                phase: Phase::Update,
                error,
            })
        }
    };
    Ok(FetchOutcome {
        low: session.low_model().expect("base fetched"),
        low_checksum: session.low_checksum().expect("base fetched"),
        proxy: session.proxy_model(),
        update_bitwidth: session.update_bitwidth(),
        report: session.report().expect("base fetched"),
        failure,
        base_refetches: session.base_refetches(),
    })
}

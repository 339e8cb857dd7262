use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use super::wire::{read_message, write_message, ErrorCode, Message, RemoteError, Served};
use crate::checksum::Digest;
use crate::codec::encode;
use crate::model::{Bitwidth, ManifestEntry, ModelManifest, TensorModel};
use crate::quant::{dequantize, quantize};
use crate::store::{load_model, StoreError};
use crate::update::{compute_update, select_update_bitwidth};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum CacheKey {
    Model(Bitwidth),
    Update { base: Bitwidth, update: Bitwidth },
}

struct HostedModel {
    source: TensorModel,
    /// `dequantize(quantize(source, 32))`, the reference every update aims at.
    high: TensorModel,
    cache: Mutex<HashMap<CacheKey, Arc<Served>>>,
}

impl HostedModel {
    fn cached(&self, key: CacheKey, make: impl FnOnce() -> Served) -> Arc<Served> {
        if let Some(s) = self.cache.lock().unwrap().get(&key) {
            return s.clone();
        }
        // Built outside the lock; a concurrent builder produces identical
        // bytes and whichever lands first is kept.
        let fresh = Arc::new(make());
        self.cache.lock().unwrap().entry(key).or_insert(fresh).clone()
    }

    fn base(&self, bitwidth: Bitwidth) -> Arc<Served> {
        self.cached(CacheKey::Model(bitwidth), || {
            let start = Instant::now();
            let bitstream = encode(&quantize(&self.source, bitwidth));
            Served {
                bitstream,
                prepare_s: start.elapsed().as_secs_f64(),
            }
        })
    }
}

fn refuse(code: ErrorCode, message: impl Into<String>) -> RemoteError {
    RemoteError {
        code,
        message: message.into(),
    }
}

/// Models the server can deliver, keyed by id, with a memo of every
/// bitstream it has produced.
///
/// Each model is kept at full precision; a request for bitwidth `b` is
/// answered with `encode(quantize(model, b))`, and updates are computed
/// against `dequantize(quantize(model, 32))`. Replacing a model drops its
/// cached bitstreams.
#[derive(Default)]
pub struct ServerRepository {
    models: RwLock<BTreeMap<String, Arc<HostedModel>>>,
}

impl ServerRepository {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a model. The stored copy is renamed to `id`.
    pub fn insert(&self, id: impl Into<String>, model: TensorModel) {
        let id = id.into();
        let source = model.with_name(id.clone());
        let high = dequantize(&quantize(&source, Bitwidth::B32));
        let hosted = HostedModel {
            source,
            high,
            cache: Mutex::new(HashMap::new()),
        };
        self.models.write().unwrap().insert(id, Arc::new(hosted));
    }

    pub fn remove(&self, id: &str) -> bool {
        self.models.write().unwrap().remove(id).is_some()
    }

    /// Loads every `*.p2um` file in `dir`; the file stem becomes the id.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let repo = ServerRepository::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "p2um"))
            .collect();
        paths.sort();
        for p in paths {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            repo.insert(id, load_model(&p)?);
        }
        Ok(repo)
    }

    pub fn is_empty(&self) -> bool {
        self.models.read().unwrap().is_empty()
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.models.read().unwrap().keys().cloned().collect()
    }

    fn get(&self, id: &str) -> Result<Arc<HostedModel>, RemoteError> {
        self.models
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| refuse(ErrorCode::UnknownModel, format!("unknown model `{id}`")))
    }

    /// The 32-bit reference model `W^h` that proxies converge to.
    pub fn high_precision(&self, id: &str) -> Option<TensorModel> {
        self.get(id).ok().map(|m| m.high.clone())
    }

    fn bitwidth(bits: u8) -> Result<Bitwidth, RemoteError> {
        Bitwidth::from_bits(bits as u32).map_err(|_| {
            refuse(ErrorCode::UnsupportedBitwidth, format!("unsupported bitwidth {bits}"))
        })
    }

    pub fn model_bitstream(&self, id: &str, bits: u8) -> Result<Arc<Served>, RemoteError> {
        let bitwidth = Self::bitwidth(bits)?;
        Ok(self.get(id)?.base(bitwidth))
    }

    /// Update from the base at `base_bits` to the 32-bit reference, provided
    /// `base_checksum` names the server's own encoding of that base.
    pub fn update_bitstream(
        &self,
        id: &str,
        base_bits: u8,
        base_checksum: &Digest,
        tolerance: Option<f64>,
    ) -> Result<Arc<Served>, RemoteError> {
        let base_bw = Self::bitwidth(base_bits)?;
        let hosted = self.get(id)?;
        let base = hosted.base(base_bw);
        let ours = base.bitstream.checksum();
        if ours != *base_checksum {
            return Err(refuse(
                ErrorCode::ChecksumMismatch,
                format!("base {base_checksum} is not the current {base_bits}-bit encoding; re-fetch it"),
            ));
        }
        let start = Instant::now();
        let low = dequantize(&quantize(&hosted.source, base_bw));
        let update_bw = match tolerance {
            None => Bitwidth::B32,
            Some(t) => select_update_bitwidth(&hosted.high, &low, t)
                .map_err(|e| refuse(ErrorCode::BadRequest, e.to_string()))?,
        };
        let setup_s = start.elapsed().as_secs_f64();
        let key = CacheKey::Update {
            base: base_bw,
            update: update_bw,
        };
        Ok(hosted.cached(key, || {
            let start = Instant::now();
            let update = compute_update(&hosted.high, &low, update_bw, base_bw, ours)
                .expect("layouts match and the bitwidth is an update bitwidth");
            let bitstream = encode(&update);
            Served {
                bitstream,
                prepare_s: setup_s + start.elapsed().as_secs_f64(),
            }
        }))
    }

    /// Lists every model at every bitwidth (encoding any that are missing).
    pub fn manifests(&self) -> Vec<ModelManifest> {
        let models: Vec<(String, Arc<HostedModel>)> = self
            .models
            .read()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        models
            .into_iter()
            .map(|(id, m)| {
                let entries = Bitwidth::ALL
                    .iter()
                    .map(|&b| {
                        let s = m.base(b);
                        ManifestEntry {
                            bitwidth: b,
                            encoded_size: s.bitstream.len() as u64,
                            checksum: s.bitstream.checksum(),
                        }
                    })
                    .collect();
                ModelManifest::new(id, entries).expect("one entry per bitwidth")
            })
            .collect()
    }

    /// Reply to one request, or `None` if the message is not a request.
    pub fn handle(&self, msg: Message) -> Option<Message> {
        let unwrap = |r: Result<Arc<Served>, RemoteError>| r.map(|s| (*s).clone());
        Some(match msg {
            Message::ModelRequest { model_id, bitwidth } => {
                Message::ModelResponse(unwrap(self.model_bitstream(&model_id, bitwidth)))
            }
            Message::UpdateRequest {
                model_id,
                base_bitwidth,
                base_checksum,
                tolerance,
            } => Message::UpdateResponse(unwrap(self.update_bitstream(
                &model_id,
                base_bitwidth,
                &base_checksum,
                tolerance,
            ))),
            Message::ListModels => Message::ModelList(self.manifests()),
            _ => return None,
        })
    }
}

fn handle_connection(repo: &ServerRepository, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    // Any framing error or non-request message ends the connection.
    while let Ok(Some(msg)) = read_message(&mut reader) {
        let Some(reply) = repo.handle(msg) else {
            break;
        };
        if write_message(&mut writer, &reply).is_err() {
            break;
        }
    }
}

/// A server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    repo: Arc<ServerRepository>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn repository(&self) -> &Arc<ServerRepository> {
        &self.repo
    }

    /// Stops accepting connections and waits for the accept loop to exit.
    /// Connections already open run until their client disconnects.
    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        if let Some(t) = self.accept.take() {
            self.stop.store(true, Ordering::SeqCst);
            // Wake the blocking accept.
            let _ = TcpStream::connect(self.addr);
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

fn accept_loop(listener: TcpListener, repo: Arc<ServerRepository>, stop: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let repo = repo.clone();
        thread::spawn(move || handle_connection(&repo, stream));
    }
}

fn bind(repo: &ServerRepository, addr: impl ToSocketAddrs) -> io::Result<TcpListener> {
    if repo.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "repository is empty"));
    }
    TcpListener::bind(addr)
}

/// Starts a server on a background thread. Bind to port 0 to get a free port.
pub fn spawn(repo: Arc<ServerRepository>, addr: impl ToSocketAddrs) -> io::Result<ServerHandle> {
    let listener = bind(&repo, addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let accept = {
        let (repo, stop) = (repo.clone(), stop.clone());
        thread::spawn(move || accept_loop(listener, repo, stop))
    };
    Ok(ServerHandle {
        addr,
        stop,
        accept: Some(accept),
        repo,
    })
}

/// Serves on the calling thread until the process ends.
pub fn serve(repo: Arc<ServerRepository>, addr: impl ToSocketAddrs) -> io::Result<()> {
    let listener = bind(&repo, addr)?;
    serve_listener(repo, listener)
}

/// [`serve`] on a listener the caller has already bound, so the address can
/// be announced before the first connection arrives.
pub fn serve_listener(repo: Arc<ServerRepository>, listener: TcpListener) -> io::Result<()> {
    if repo.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "repository is empty"));
    }
    accept_loop(listener, repo, Arc::new(AtomicBool::new(false)));
    Ok(())
}

//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::io::{BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use p2u::codec::Bitstream;
use p2u::evalnet::MlpSpec;
use p2u::model::TensorModel;
use p2u::proto::wire::{read_message, write_message};
use p2u::proto::{Message, Served, ServerRepository};
use p2u::synth::gaussian_mlp;

pub fn mlp_fixture(seed: u64) -> (MlpSpec, TensorModel, Arc<ServerRepository>) {
    let spec = MlpSpec::new(vec![6, 24, 24, 4]).unwrap();
    let model = gaussian_mlp(&spec, seed);
    let repo = Arc::new(ServerRepository::new());
    repo.insert("mlp", model.clone());
    (spec, model, repo)
}

/// What a [`FaultyServer`] does to a reply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Flip one byte in the middle of the returned bitstream.
    CorruptBitstream,
    /// Read the request and hang up without answering.
    Hangup,
    /// Send only the first half of the reply frame.
    TruncateFrame,
}

/// Answers from a real repository, but damages the replies to the requests
/// whose zero-based arrival index is listed in `faulty`.
pub struct FaultyServer {
    pub addr: SocketAddr,
    pub requests: Arc<AtomicUsize>,
}

fn damage(reply: Message) -> Message {
    let flip = |s: Served| {
        let mut bytes = s.bitstream.into_bytes();
        let i = bytes.len() / 2;
        bytes[i] ^= 0x5a;
        Served {
            bitstream: Bitstream::from_bytes(bytes),
            prepare_s: s.prepare_s,
        }
    };
    match reply {
        Message::ModelResponse(Ok(s)) => Message::ModelResponse(Ok(flip(s))),
        Message::UpdateResponse(Ok(s)) => Message::UpdateResponse(Ok(flip(s))),
        other => other,
    }
}

fn answer(repo: &ServerRepository, stream: TcpStream, fault: Option<Fault>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let Ok(Some(msg)) = read_message(&mut reader) else { return };
    let Some(reply) = repo.handle(msg) else { return };
    let mut w = stream;
    match fault {
        None => write_message(&mut w, &reply).unwrap(),
        Some(Fault::CorruptBitstream) => write_message(&mut w, &damage(reply)).unwrap(),
        Some(Fault::Hangup) => {}
        Some(Fault::TruncateFrame) => {
            let frame = reply.to_frame();
            w.write_all(&frame[..frame.len() / 2]).unwrap();
        }
    }
}

impl FaultyServer {
    pub fn spawn(repo: Arc<ServerRepository>, fault: Fault, faulty: &[usize]) -> Self {
        let faulty = faulty.to_vec();
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(AtomicUsize::new(0));
        let seen = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let n = seen.fetch_add(1, Ordering::SeqCst);
                let f = faulty.contains(&n).then_some(fault);
                answer(&repo, stream, f);
            }
        });
        FaultyServer { addr, requests }
    }
}

//! A server and a client in one process: the client serves the 4-bit model
//! straight away, then upgrades to the proxy while inference keeps running.
//!
//! cargo run --example progressive_fetch

use std::sync::Arc;

use p2u::evalnet::{forward, MlpSpec};
use p2u::model::Bitwidth;
use p2u::proto::{spawn, ClientSession, FetchOptions, ServerRepository};
use p2u::report::transfer_grid;
use p2u::synth::{gaussian_inputs, gaussian_mlp};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = MlpSpec::new(vec![16, 64, 64, 4])?;
    let repo = Arc::new(ServerRepository::new());
    repo.insert("classifier", gaussian_mlp(&spec, 3));
    let server = spawn(repo.clone(), "127.0.0.1:0")?;

    let session = ClientSession::new(server.local_addr(), "classifier", Bitwidth::B4, FetchOptions::default())?;
    let x = &gaussian_inputs(16, 1, 9)[0];
    println!("before base: {}", session.infer(&spec, x).unwrap_err());

    session.fetch_base()?;
    let low = session.infer(&spec, x)?;
    println!("{:?}: {low:?}", session.current_model()?.precision);

    session.fetch_update()?;
    let proxy = session.infer(&spec, x)?;
    println!("{:?}: {proxy:?}", session.current_model()?.precision);

    let high = forward(&spec, &repo.high_precision("classifier").unwrap(), x)?;
    println!("reference 32-bit: {high:?}\n");
    print!("{}", transfer_grid(&session.report().unwrap()).to_table());
    server.shutdown();
    Ok(())
}

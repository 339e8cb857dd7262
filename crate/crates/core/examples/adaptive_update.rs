//! Choosing the update bitwidth from an error tolerance instead of always
//! sending 32-bit codes.
//!
//! cargo run --example adaptive_update

use p2u::codec::encode;
use p2u::model::{model_delta_norms, Bitwidth};
use p2u::quant::{dequantize, quantize};
use p2u::synth::gaussian_model;
use p2u::update::{apply_update, compute_update, select_update_bitwidth};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let layout = vec![("w".to_string(), vec![512, 128]), ("b".to_string(), vec![512])];
    let high = dequantize(&quantize(&gaussian_model("m", &layout, 0.05, 4), Bitwidth::B32));
    let q = quantize(&high, Bitwidth::B4);
    let base = encode(&q);
    let low = dequantize(&q);
    println!("4-bit base: {} bytes\n", base.len());

    println!("{:>10} {:>6} {:>12} {:>14}", "tolerance", "bits", "update B", "max |W' - W|");
    for tol in [1e-2, 1e-3, 1e-5, 1e-7, 1e-10] {
        let b = select_update_bitwidth(&high, &low, tol)?;
        let u = compute_update(&high, &low, b, Bitwidth::B4, base.checksum())?;
        let proxy = apply_update(&low, &base.checksum(), &u)?;
        let gap = model_delta_norms(&proxy, &high)?.global_max_abs;
        println!("{tol:>10.0e} {:>6} {:>12} {gap:>14.3e}", b.bits(), encode(&u).len());
    }
    Ok(())
}

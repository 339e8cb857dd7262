//! Trains a small classifier on a checkerboard, then compares Top-1 and
//! output divergence of each low-precision model against its proxy.
//!
//! cargo run --release --example proxy_fidelity

use p2u::codec::encode;
use p2u::evalnet::{output_divergence, top1_accuracy, train_classifier, MlpSpec, TrainConfig};
use p2u::model::Bitwidth;
use p2u::quant::{dequantize, quantize};
use p2u::synth::checkerboard;
use p2u::update::{apply_update, compute_update};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = MlpSpec::new(vec![2, 32, 32, 2])?;
    let train = checkerboard(4000, 4, 0);
    let test = checkerboard(2000, 4, 1);
    let cfg = TrainConfig {
        epochs: 60,
        ..Default::default()
    };
    let high = dequantize(&quantize(&train_classifier(&spec, &train, &cfg)?, Bitwidth::B32));
    let xs = test.features().to_vec();
    println!("32-bit Top-1: {:.2}%\n", 100.0 * top1_accuracy(&spec, &high, &test)?);

    println!("{:>5} {:>10} {:>10} {:>14} {:>14}", "bits", "low %", "proxy %", "low max|df|", "proxy max|df|");
    for b in [Bitwidth::B4, Bitwidth::B8, Bitwidth::B16] {
        let q = quantize(&high, b);
        let sum = encode(&q).checksum();
        let low = dequantize(&q);
        let proxy = apply_update(&low, &sum, &compute_update(&high, &low, Bitwidth::B32, b, sum)?)?;
        println!(
            "{:>5} {:>10.2} {:>10.2} {:>14.3e} {:>14.3e}",
            b.bits(),
            100.0 * top1_accuracy(&spec, &low, &test)?,
            100.0 * top1_accuracy(&spec, &proxy, &test)?,
            output_divergence(&spec, &low, &high, &xs)?.max_abs,
            output_divergence(&spec, &proxy, &high, &xs)?.max_abs,
        );
    }
    Ok(())
}

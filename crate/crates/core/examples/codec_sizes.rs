//! Encoded size of one Gaussian model at every bitwidth, next to the raw
//! packed size and the 32-bit update that would lift each base.
//!
//! cargo run --release --example codec_sizes

use p2u::codec::{decode, encode, raw_packed_size};
use p2u::model::Bitwidth;
use p2u::quant::{dequantize, quantize};
use p2u::synth::gaussian_model;
use p2u::update::compute_update;

fn main() {
    let layout = vec![
        ("conv.weight".to_string(), vec![256, 256]),
        ("fc.weight".to_string(), vec![160, 256]),
        ("fc.bias".to_string(), vec![160]),
    ];
    let high = gaussian_model("demo", &layout, 0.05, 1);
    let n = high.num_parameters();
    println!("{n} parameters\n");
    println!("{:>5} {:>10} {:>10} {:>8} {:>14}", "bits", "raw", "encoded", "ratio", "32-bit update");
    for b in Bitwidth::ALL {
        let q = quantize(&high, b);
        let bs = encode(&q);
        assert_eq!(decode(&bs).unwrap().into_model().unwrap(), q);
        let raw = raw_packed_size(n, b);
        let update = compute_update(&high, &dequantize(&q), Bitwidth::B32, b, bs.checksum()).unwrap();
        println!(
            "{:>5} {:>10} {:>10} {:>8.3} {:>14}",
            b.bits(),
            raw,
            bs.len(),
            bs.len() as f64 / raw as f64,
            encode(&update).len()
        );
    }
}

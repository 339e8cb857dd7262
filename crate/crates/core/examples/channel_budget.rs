//! How long a download takes over a given link, and what the progressive
//! scheme costs in propagation delay and peak bandwidth.
//!
//! cargo run --example channel_budget

use std::time::Duration;

use p2u::channel::{
    bandwidth_requirement, channel_time, p2u_delay_overhead, ChannelConfig, DeliveryMode, PhaseMetrics,
    TransferReport,
};

fn phase(bytes: u64, cfg: &ChannelConfig) -> PhaseMetrics {
    PhaseMetrics {
        encoded_bytes: bytes,
        encode_s: 0.0,
        channel_s: 0.0,
        decode_s: 0.0,
        dequantize_s: 0.0,
    }
    .over(cfg)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ChannelConfig::new(100_000_000, Duration::from_millis(10))?;
    println!("528 MB over 100 Mbps with 10 ms delay: {} s", channel_time(528_000_000, &cfg));
    println!("extra delay of a second phase: {} s\n", p2u_delay_overhead(&cfg));

    // A 8.69 MB base followed by a 0.02 MB update.
    let r = TransferReport::new(phase(8_690_000, &cfg), Some(phase(20_000, &cfg)), 0.0);
    r.validate()?;
    println!("low-precision model usable after {:.4} s", r.startup_latency_low_s);
    println!("proxy usable after {:.4} s", r.startup_latency_proxy_s.unwrap());
    println!(
        "peak bytes: sequenced {} / parallel {}",
        bandwidth_requirement(&r, DeliveryMode::Sequenced),
        bandwidth_requirement(&r, DeliveryMode::Parallel)
    );

    println!("\n{:>10} {:>12}", "Mbps", "528 MB (s)");
    for mbps in [10, 50, 100, 1000] {
        let c = ChannelConfig::new(mbps * 1_000_000, Duration::from_millis(10))?;
        println!("{mbps:>10} {:>12.3}", channel_time(528_000_000, &c));
    }
    Ok(())
}

//! Simulated channel and delivery accounting.
//!
//! Transfer over the channel is modelled analytically as
//! `bytes * 8 / bandwidth + C`; measured compute phases (encode, decode,
//! dequantize, apply) are kept separate so the two can be composed or
//! reported independently.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("bandwidth must be positive")]
    ZeroBandwidth,
    #[error("inconsistent report: {0}")]
    Inconsistent(String),
}

/// Link capacity and one-way propagation delay `C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    bandwidth_bps: u64,
    delay: Duration,
}

impl ChannelConfig {
    pub fn new(bandwidth_bps: u64, delay: Duration) -> Result<Self, ChannelError> {
        if bandwidth_bps == 0 {
            return Err(ChannelError::ZeroBandwidth);
        }
        Ok(ChannelConfig {
            bandwidth_bps,
            delay,
        })
    }

    pub fn bandwidth_bps(&self) -> u64 {
        self.bandwidth_bps
    }

    pub fn delay(&self) -> Duration {
        self.delay
    }
}

impl Default for ChannelConfig {
    /// 100 Mbps with 10 ms delay.
    fn default() -> Self {
        ChannelConfig {
            bandwidth_bps: 100_000_000,
            delay: Duration::from_millis(10),
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `num / den` as f64 via integer quotient plus remainder fraction, so dyadic
/// results are exact.
fn ratio_to_f64(num: u128, den: u128) -> f64 {
    let g = gcd(num, den).max(1);
    let (num, den) = (num / g, den / g);
    (num / den) as f64 + (num % den) as f64 / den as f64
}

/// Seconds to move `bytes` across the channel: serialization plus `C`.
pub fn channel_time(bytes: u64, cfg: &ChannelConfig) -> f64 {
    let bw = cfg.bandwidth_bps as u128;
    let num = bytes as u128 * 8 * 1_000_000_000 + cfg.delay.as_nanos() * bw;
    ratio_to_f64(num, bw * 1_000_000_000)
}

/// Extra propagation delay of a two-phase delivery over a direct one: `2C - C`.
pub fn p2u_delay_overhead(cfg: &ChannelConfig) -> f64 {
    cfg.delay.as_secs_f64()
}

/// Whether the update waits for the base to finish (sequenced) or shares the
/// link with it (parallel).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeliveryMode {
    Sequenced,
    Parallel,
}

/// Sizes and timings of one delivered bitstream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub encoded_bytes: u64,
    pub encode_s: f64,
    pub channel_s: f64,
    pub decode_s: f64,
    pub dequantize_s: f64,
}

impl PhaseMetrics {
    /// Fills in `channel_s` from the channel model.
    pub fn over(mut self, cfg: &ChannelConfig) -> Self {
        self.channel_s = channel_time(self.encoded_bytes, cfg);
        self
    }
}

/// Accounting for one progressive delivery (base, then optional update).
///
/// Derived fields are stored so serialized reports are self-contained;
/// [`TransferReport::validate`] recomputes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub base: PhaseMetrics,
    pub update: Option<PhaseMetrics>,
    /// Time to dequantize the update and add it to the base.
    pub apply_s: f64,
    pub startup_latency_low_s: f64,
    pub startup_latency_proxy_s: Option<f64>,
    pub total_bytes: u64,
    pub max_phase_bytes: u64,
}

fn latency_low(base: &PhaseMetrics) -> f64 {
    base.encode_s + base.channel_s + base.decode_s + base.dequantize_s
}

fn latency_proxy(base: &PhaseMetrics, update: &PhaseMetrics, apply_s: f64) -> f64 {
    latency_low(base) + update.encode_s + update.channel_s + update.decode_s + apply_s
}

impl TransferReport {
    pub fn new(base: PhaseMetrics, update: Option<PhaseMetrics>, apply_s: f64) -> Self {
        let update_bytes = update.map_or(0, |u| u.encoded_bytes);
        TransferReport {
            base,
            update,
            apply_s: if update.is_some() { apply_s } else { 0.0 },
            startup_latency_low_s: latency_low(&base),
            startup_latency_proxy_s: update.map(|u| latency_proxy(&base, &u, apply_s)),
            total_bytes: base.encoded_bytes + update_bytes,
            max_phase_bytes: base.encoded_bytes.max(update_bytes),
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let expect = TransferReport::new(self.base, self.update, self.apply_s);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        if !close(self.startup_latency_low_s, expect.startup_latency_low_s) {
            return Err(ChannelError::Inconsistent("startup latency (low)".into()));
        }
        match (self.startup_latency_proxy_s, expect.startup_latency_proxy_s) {
            (None, None) => {}
            (Some(a), Some(b)) if close(a, b) => {}
            _ => return Err(ChannelError::Inconsistent("startup latency (proxy)".into())),
        }
        if self.total_bytes != expect.total_bytes {
            return Err(ChannelError::Inconsistent("total bytes".into()));
        }
        if self.max_phase_bytes != expect.max_phase_bytes {
            return Err(ChannelError::Inconsistent("max phase bytes".into()));
        }
        Ok(())
    }

    /// Sum of the per-phase channel times: each phase pays `C` once.
    pub fn sequenced_channel_s(&self) -> f64 {
        self.base.channel_s + self.update.map_or(0.0, |u| u.channel_s)
    }
}

/// Peak bytes the link must carry for the delivery: the larger stream when the
/// update follows the base, both streams when they overlap.
pub fn bandwidth_requirement(report: &TransferReport, mode: DeliveryMode) -> u64 {
    match mode {
        DeliveryMode::Sequenced => report.max_phase_bytes,
        DeliveryMode::Parallel => report.total_bytes,
    }
}

/// Median of `samples`; 0 for an empty slice.
pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Append-only collection of reports, shareable between threads.
#[derive(Debug, Default)]
pub struct MetricsLog {
    reports: Mutex<Vec<TransferReport>>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates and appends.
    pub fn record(&self, report: TransferReport) -> Result<(), ChannelError> {
        report.validate()?;
        self.reports.lock().unwrap().push(report);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.reports.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<TransferReport> {
        self.reports.lock().unwrap().clone()
    }
}

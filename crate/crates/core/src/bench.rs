//! Direct delivery versus progressive delivery, side by side.
//!
//! For each base bitwidth the model goes through an in-process server: the
//! baseline ships the quantized model alone, the progressive path ships the
//! same base followed by a 32-bit update. Compute phases are timed (median
//! over repetitions, fresh server cache each time); transfer time comes from
//! the channel model.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::channel::{
    bandwidth_requirement, channel_time, median, ChannelConfig, ChannelError, DeliveryMode, PhaseMetrics,
    TransferReport,
};
use crate::codec::{decode_timed, CodecError};
use crate::evalnet::{top1_accuracy, EvalError, LabeledDataset, Mlp, MlpSpec};
use crate::model::{Bitwidth, TensorModel};
use crate::proto::{RemoteError, ServerRepository};
use crate::quant::dequantize;
use crate::report::{fmt_mb, fmt_s, Grid};
use crate::update::{apply_update, UpdateError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0}")]
    BadOptions(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("server refused: {}", .0.message)]
    Remote(RemoteError),
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub channel: ChannelConfig,
    pub repetitions: usize,
    /// Network and test data for the Top-1 column.
    pub eval: Option<(MlpSpec, LabeledDataset)>,
    /// Report only modelled transfer time (compute phases count as zero),
    /// which makes the output a pure function of the inputs.
    pub channel_only: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            channel: ChannelConfig::default(),
            repetitions: 5,
            eval: None,
            channel_only: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Method {
    Baseline,
    P2U,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RowKind {
    Direct,
    LowPrec,
    Update,
    Proxy,
}

impl RowKind {
    fn label(self) -> &'static str {
        match self {
            RowKind::Direct => "Direct",
            RowKind::LowPrec => "Low-Prec.",
            RowKind::Update => "Update",
            RowKind::Proxy => "Proxy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Top1 {
    Accuracy(f64),
    /// Not meaningful for this row (the update alone is not a model).
    NotReported,
    /// No evaluation data was supplied.
    Unavailable,
}

impl Top1 {
    fn cell(self) -> String {
        match self {
            Top1::Accuracy(a) => format!("{:.2}", 100.0 * a),
            Top1::NotReported => "-".into(),
            Top1::Unavailable => "n/a".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: Method,
    pub bitwidth: u32,
    pub row: RowKind,
    pub bytes: u64,
    /// Bytes the link must carry at once (sequenced delivery).
    pub peak_bytes: u64,
    pub time_s: f64,
    pub top1: Top1,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// One progressive-delivery report per base bitwidth.
    pub reports: Vec<(u32, TransferReport)>,
}

impl BenchResult {
    pub fn grid(&self) -> Grid {
        let mut g = Grid::new(&[
            "Method",
            "Bits",
            "Row",
            "Bytes",
            "Size (MB)",
            "Peak (MB)",
            "Time (s)",
            "Top-1 (%)",
        ]);
        for r in &self.rows {
            g.push(vec![
                format!("{:?}", r.method),
                r.bitwidth.to_string(),
                r.row.label().into(),
                r.bytes.to_string(),
                fmt_mb(r.bytes),
                fmt_mb(r.peak_bytes),
                fmt_s(r.time_s),
                r.top1.cell(),
            ]);
        }
        g
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

struct Sample {
    base: PhaseMetrics,
    update: PhaseMetrics,
    apply_s: f64,
    low: TensorModel,
    proxy: TensorModel,
}

fn run_once(model: &TensorModel, bitwidth: Bitwidth) -> Result<Sample, BenchError> {
    let repo = ServerRepository::new();
    repo.insert("bench", model.clone());
    let bits = bitwidth.bits() as u8;

    let served = repo.model_bitstream("bench", bits).map_err(BenchError::Remote)?;
    let (payload, decode_t) = decode_timed(&served.bitstream)?;
    let q = payload
        .into_model()
        .ok_or_else(|| BenchError::BadOptions("server returned an update for a model request".into()))?;
    let start = Instant::now();
    let low = dequantize(&q);
    let base = PhaseMetrics {
        encoded_bytes: served.bitstream.len() as u64,
        encode_s: served.prepare_s,
        channel_s: 0.0,
        decode_s: decode_t.as_secs_f64(),
        dequantize_s: start.elapsed().as_secs_f64(),
    };

    let checksum = served.bitstream.checksum();
    let served = repo
        .update_bitstream("bench", bits, &checksum, None)
        .map_err(BenchError::Remote)?;
    let (payload, decode_t) = decode_timed(&served.bitstream)?;
    let u = payload
        .into_update()
        .ok_or_else(|| BenchError::BadOptions("server returned a model for an update request".into()))?;
    let start = Instant::now();
    let proxy = apply_update(&low, &checksum, &u)?;
    let apply_s = start.elapsed().as_secs_f64();
    let update = PhaseMetrics {
        encoded_bytes: served.bitstream.len() as u64,
        encode_s: served.prepare_s,
        channel_s: 0.0,
        decode_s: decode_t.as_secs_f64(),
        dequantize_s: 0.0,
    };
    Ok(Sample {
        base,
        update,
        apply_s,
        low,
        proxy,
    })
}

fn median_phase(samples: &[PhaseMetrics], channel: &ChannelConfig, channel_only: bool) -> PhaseMetrics {
    let m = |f: fn(&PhaseMetrics) -> f64| {
        if channel_only {
            0.0
        } else {
            median(&samples.iter().map(f).collect::<Vec<_>>())
        }
    };
    let bytes = samples[0].encoded_bytes;
    PhaseMetrics {
        encoded_bytes: bytes,
        encode_s: m(|p| p.encode_s),
        channel_s: channel_time(bytes, channel),
        decode_s: m(|p| p.decode_s),
        dequantize_s: m(|p| p.dequantize_s),
    }
}

pub fn run_bench(
    model: &TensorModel,
    bitwidths: &[Bitwidth],
    opts: &BenchOptions,
) -> Result<BenchResult, BenchError> {
    if opts.repetitions == 0 {
        return Err(BenchError::BadOptions("repetitions must be at least 1".into()));
    }
    if let Some((spec, data)) = &opts.eval {
        Mlp::from_model(spec, model)?;
        data.check_against(spec)?;
    }
    let accuracy = |w: &TensorModel| -> Result<Top1, BenchError> {
        Ok(match &opts.eval {
            Some((spec, data)) => Top1::Accuracy(top1_accuracy(spec, w, data)?),
            None => Top1::Unavailable,
        })
    };

    let mut baseline = Vec::new();
    let mut progressive = Vec::new();
    let mut reports = Vec::new();
    for &b in bitwidths {
        let samples = (0..opts.repetitions)
            .map(|_| run_once(model, b))
            .collect::<Result<Vec<_>, _>>()?;
        let base: Vec<PhaseMetrics> = samples.iter().map(|s| s.base).collect();
        let update: Vec<PhaseMetrics> = samples.iter().map(|s| s.update).collect();
        let apply = if opts.channel_only {
            0.0
        } else {
            median(&samples.iter().map(|s| s.apply_s).collect::<Vec<_>>())
        };
        let base = median_phase(&base, &opts.channel, opts.channel_only);
        let update = median_phase(&update, &opts.channel, opts.channel_only);

        let direct = TransferReport::new(base, None, 0.0);
        let report = TransferReport::new(base, Some(update), apply);
        direct.validate()?;
        report.validate()?;

        let last = samples.last().expect("at least one repetition");
        let low_acc = accuracy(&last.low)?;
        let proxy_acc = accuracy(&last.proxy)?;
        let bits = b.bits();
        baseline.push(BenchRow {
            method: Method::Baseline,
            bitwidth: bits,
            row: RowKind::Direct,
            bytes: direct.total_bytes,
            peak_bytes: bandwidth_requirement(&direct, DeliveryMode::Sequenced),
            time_s: direct.startup_latency_low_s,
            top1: low_acc,
        });
        progressive.extend([
            BenchRow {
                method: Method::P2U,
                bitwidth: bits,
                row: RowKind::LowPrec,
                bytes: base.encoded_bytes,
                peak_bytes: base.encoded_bytes,
                time_s: report.startup_latency_low_s,
                top1: low_acc,
            },
            BenchRow {
                method: Method::P2U,
                bitwidth: bits,
                row: RowKind::Update,
                bytes: update.encoded_bytes,
                peak_bytes: update.encoded_bytes,
                time_s: update.encode_s + update.channel_s + update.decode_s + apply,
                top1: Top1::NotReported,
            },
            BenchRow {
                method: Method::P2U,
                bitwidth: bits,
                row: RowKind::Proxy,
                bytes: report.total_bytes,
                peak_bytes: bandwidth_requirement(&report, DeliveryMode::Sequenced),
                time_s: report.startup_latency_proxy_s.expect("update present"),
                top1: proxy_acc,
            },
        ]);
        reports.push((bits, report));
    }
    baseline.extend(progressive);
    Ok(BenchResult {
        rows: baseline,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gaussian_mlp;

    #[test]
    fn rows_are_consistent() {
        let spec = MlpSpec::new(vec![8, 16, 4]).unwrap();
        let model = gaussian_mlp(&spec, 1);
        let opts = BenchOptions {
            repetitions: 1,
            channel_only: true,
            ..Default::default()
        };
        let r = run_bench(&model, &[Bitwidth::B16, Bitwidth::B8, Bitwidth::B4], &opts).unwrap();
        assert_eq!(r.rows.len(), 3 + 3 * 3);
        for chunk in r.rows[3..].chunks(3) {
            assert_eq!(chunk[2].bytes, chunk[0].bytes + chunk[1].bytes);
            assert_eq!(chunk[2].peak_bytes, chunk[0].bytes.max(chunk[1].bytes));
            assert_eq!(chunk[1].top1, Top1::NotReported);
        }
        for (base, p2u) in r.rows[..3].iter().zip(r.rows[3..].chunks(3)) {
            assert_eq!(base.bytes, p2u[0].bytes);
            assert_eq!(base.time_s, p2u[0].time_s);
        }
        assert_eq!(r, run_bench(&model, &[Bitwidth::B16, Bitwidth::B8, Bitwidth::B4], &opts).unwrap());
    }
}

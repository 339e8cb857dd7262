//! Exit gate: one PASS/FAIL line per acceptance criterion. Runs as a plain
//! binary (no test harness) and exits nonzero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use common::{mlp_fixture, Fault, FaultyServer};
use p2u::channel::{
    bandwidth_requirement, channel_time, ChannelConfig, DeliveryMode, PhaseMetrics, TransferReport,
};
use p2u::checksum::Digest;
use p2u::codec::{decode, encode, Payload};
use p2u::evalnet::{
    first_order_check, forward, per_input_divergence, taylor_residual_check, top1_accuracy, train_classifier,
    Mlp, MlpSpec, SlopeFit, TaylorOptions, TrainConfig,
};
use p2u::model::{Bitwidth, QTensor, QuantizedModel, Tensor, TensorModel};
use p2u::proto::{
    spawn, ClientSession, ErrorCode, FetchOptions, Precision, ProtoError, ServerRepository, SessionState,
};
use p2u::quant::{dequantize, quantize};
use p2u::synth::{checkerboard, gaussian_inputs, gaussian_model, gaussian_mlp};
use p2u::update::{apply_update, compute_update, UpdateModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ulp(x: f32) -> f64 {
    let x = x.abs();
    f32::from_bits(x.to_bits() + 1) as f64 - x as f64
}

/// Splits `n` elements into a shape whose product is exactly `n`.
fn random_shape(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut shape = vec![n];
    if n > 1 && rng.random_bool(0.5) {
        let divisors: Vec<usize> = (2..=n.isqrt()).filter(|d| n.is_multiple_of(*d)).collect();
        if let Some(&d) = divisors.get(rng.random_range(0..divisors.len().max(1))) {
            shape = vec![d, n / d];
        }
    }
    shape
}

fn random_codes(n: usize, b: Bitwidth, regime: usize, rng: &mut ChaCha8Rng) -> Vec<i32> {
    let q = b.qmax();
    (0..n)
        .map(|_| match regime {
            // Full-range uniform.
            0 => rng.random_range(-q..=q),
            // Bell-shaped, like quantized weights.
            1 => {
                let g: f64 = StandardNormal.sample(rng);
                (g * q as f64 / 4.0).round().clamp(-q as f64, q as f64) as i32
            }
            // Mostly zero with occasional extremes.
            _ => match rng.random_range(0..20) {
                0 => q,
                1 => -q,
                2 => rng.random_range(-q..=q),
                _ => 0,
            },
        })
        .collect()
}

fn random_tensors(b: Bitwidth, regime: usize, rng: &mut ChaCha8Rng) -> Vec<QTensor> {
    // Total size log-uniform in [1, 1e5].
    let total = 10f64.powf(rng.random_range(0.0..5.0)).round().max(1.0) as usize;
    let count = rng.random_range(1..=4usize).min(total);
    let mut left = total;
    (0..count)
        .map(|i| {
            let n = if i + 1 == count { left } else { rng.random_range(1..=left - (count - 1 - i)) };
            left -= n;
            let scale = 10f32.powf(rng.random_range(-6.0..3.0));
            let shape = random_shape(n, rng);
            QTensor::new(format!("t{i}"), shape, random_codes(n, b, regime, rng), scale, b).unwrap()
        })
        .collect()
}

fn lossless_codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    let mut codes = 0usize;
    for i in 0..1000 {
        let regime = i % 3;
        let ok = if i % 2 == 0 {
            let b = Bitwidth::ALL[rng.random_range(0..4)];
            let m = QuantizedModel::new(format!("m{i}"), b, random_tensors(b, regime, &mut rng)).unwrap();
            codes += m.num_parameters();
            let bs = encode(&m);
            decode(&bs) == Ok(Payload::Model(m.clone())) && encode(&m) == bs
        } else {
            let b = Bitwidth::UPDATE[rng.random_range(0..3)];
            let base = Bitwidth::ALL[rng.random_range(0..4)];
            let sum = Digest::from_bytes(rng.random());
            let u = UpdateModel::new(format!("u{i}"), base, b, sum, random_tensors(b, regime, &mut rng)).unwrap();
            codes += u.num_parameters();
            let bs = encode(&u);
            decode(&bs) == Ok(Payload::Update(u.clone())) && encode(&u) == bs
        };
        failures += usize::from(!ok);
    }
    check(
        failures == 0,
        format!("{failures} of 1000 payloads failed roundtrip/determinism ({codes} codes)"),
    )
}

fn reconstruction_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    let mut worst = 0.0f64;
    for t in 0..200 {
        let layout: Vec<(String, Vec<usize>)> = (0..rng.random_range(1..4))
            .map(|i| (format!("t{i}"), random_shape(rng.random_range(1..4000), &mut rng)))
            .collect();
        let std = 10f64.powf(rng.random_range(-3.0..2.0));
        let high = gaussian_model("h", &layout, std, t);
        let bl = [Bitwidth::B4, Bitwidth::B8, Bitwidth::B16][rng.random_range(0..3)];
        let bu = Bitwidth::UPDATE[rng.random_range(0..3)];
        let low = dequantize(&quantize(&high, bl));
        let sum = Digest::from_bytes([t as u8; 32]);
        let u = compute_update(&high, &low, bu, bl, sum).unwrap();
        let proxy = apply_update(&low, &sum, &u).unwrap();
        for ((h, l), p) in high.tensors().iter().zip(low.tensors()).zip(proxy.tensors()) {
            let dmax = h
                .values()
                .iter()
                .zip(l.values())
                .map(|(&a, &b)| (a as f64 - b as f64).abs())
                .fold(0.0, f64::max);
            let half_step = dmax / bu.qmax() as f64 / 2.0;
            for ((&hv, &lv), &pv) in h.values().iter().zip(l.values()).zip(p.values()) {
                let d = (hv as f64 - lv as f64).abs() as f32;
                let bound = half_step + 4.0 * ulp(hv.abs().max(d));
                let err = (pv as f64 - hv as f64).abs();
                if err > bound {
                    violations += 1;
                }
                if bound > 0.0 {
                    worst = worst.max(err / bound);
                }
            }
        }
    }
    check(
        violations == 0,
        format!("{violations} elements over bound in 200 triples (worst err/bound {worst:.3})"),
    )
}

fn gaussian_big(seed: u64) -> TensorModel {
    let layout = vec![
        ("conv.weight".to_string(), vec![256, 256]),
        ("fc.weight".to_string(), vec![160, 256]),
        ("fc.bias".to_string(), vec![160]),
    ];
    gaussian_model("g", &layout, 0.05, seed)
}

fn size_ordering() -> Outcome {
    let mut violations = 0;
    let mut example = String::new();
    for seed in 0..20 {
        let m = gaussian_big(seed);
        assert!(m.num_parameters() >= 100_000);
        let s: Vec<usize> = [Bitwidth::B4, Bitwidth::B8, Bitwidth::B16]
            .iter()
            .map(|&b| encode(&quantize(&m, b)).len())
            .collect();
        if !(s[0] < s[1] && s[1] < s[2]) {
            violations += 1;
        }
        if seed == 0 {
            example = format!("seed 0: {} < {} < {} bytes", s[0], s[1], s[2]);
        }
    }
    check(violations == 0, format!("{violations} of 20 seeds out of order; {example}"))
}

fn update_compactness() -> Outcome {
    let mut worst = 0.0f64;
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let high = gaussian_big(100 + seed);
        let q = quantize(&high, Bitwidth::B8);
        let base = encode(&q);
        let low = dequantize(&q);
        let u = compute_update(&high, &low, Bitwidth::B32, Bitwidth::B8, base.checksum()).unwrap();
        let ratio = encode(&u).len() as f64 / base.len() as f64;
        worst = worst.max(ratio);
        ratios.push(format!("{ratio:.3}"));
    }
    check(
        worst < 0.60,
        format!("update/base size ratio {} (threshold 0.60)", ratios.join(", ")),
    )
}

fn proxy_dominance() -> Outcome {
    let spec = MlpSpec::new(vec![16, 64, 64, 10]).unwrap();
    let (mut dominated, mut total) = (0usize, 0usize);
    for seed in 0..50 {
        let high = dequantize(&quantize(&gaussian_mlp(&spec, seed), Bitwidth::B32));
        let q = quantize(&high, Bitwidth::B4);
        let sum = encode(&q).checksum();
        let low = dequantize(&q);
        let u = compute_update(&high, &low, Bitwidth::B32, Bitwidth::B4, sum).unwrap();
        let proxy = apply_update(&low, &sum, &u).unwrap();
        let xs = gaussian_inputs(16, 100, 1000 + seed);
        let dp = per_input_divergence(&spec, &proxy, &high, &xs).unwrap();
        let dl = per_input_divergence(&spec, &low, &high, &xs).unwrap();
        dominated += dp.iter().zip(&dl).filter(|(p, l)| p <= l).count();
        total += xs.len();
    }
    let share = dominated as f64 / total as f64;

    // Trained classifier on a 4x4 checkerboard.
    let cb = MlpSpec::new(vec![2, 32, 32, 2]).unwrap();
    let train = checkerboard(4000, 4, 0);
    let test = checkerboard(2000, 4, 1);
    let cfg = TrainConfig {
        epochs: 60,
        seed: 0,
        ..Default::default()
    };
    let trained = train_classifier(&cb, &train, &cfg).unwrap();
    let high = dequantize(&quantize(&trained, Bitwidth::B32));
    let q4 = quantize(&high, Bitwidth::B4);
    let sum = encode(&q4).checksum();
    let low = dequantize(&q4);
    let u = compute_update(&high, &low, Bitwidth::B32, Bitwidth::B4, sum).unwrap();
    let proxy = apply_update(&low, &sum, &u).unwrap();
    let acc = |w: &TensorModel| 100.0 * top1_accuracy(&cb, w, &test).unwrap();
    let (ah, al, ap) = (acc(&high), acc(&low), acc(&proxy));
    check(
        share >= 0.95 && ah - al >= 5.0 && (ap - ah).abs() <= 0.5,
        format!(
            "proxy <= 4-bit divergence in {dominated}/{total} ({:.2}%); top-1 32-bit {ah:.2}%, 4-bit {al:.2}%, proxy {ap:.2}%",
            100.0 * share
        ),
    )
}

fn scale_model(m: &TensorModel, dir: &TensorModel, by: f64) -> TensorModel {
    let tensors = m
        .tensors()
        .iter()
        .zip(dir.tensors())
        .map(|(t, d)| {
            let v = t
                .values()
                .iter()
                .zip(d.values())
                .map(|(&a, &b)| (a as f64 + by * b as f64) as f32)
                .collect();
            Tensor::new(t.name(), t.shape().to_vec(), v).unwrap()
        })
        .collect();
    TensorModel::new(m.name(), tensors).unwrap()
}

fn taylor_scaling() -> Outcome {
    let spec = MlpSpec::new(vec![8, 32, 32, 4]).unwrap();
    let mut slopes = Vec::new();
    let mut fails = Vec::new();
    let mut worst_rel = 0.0f64;
    for seed in 0..10u64 {
        let high = gaussian_mlp(&spec, 500 + seed);
        let net = Mlp::from_model(&spec, &high).unwrap();
        let w_inf = high.tensors().iter().map(|t| t.max_abs() as f64).fold(0.0, f64::max);

        // Smooth region: the candidate input farthest from any ReLU kink.
        let mut xs = gaussian_inputs(8, 64, 900 + seed);
        xs.sort_by(|a, b| net.kink_margin(b).unwrap().total_cmp(&net.kink_margin(a).unwrap()));
        let x = &xs[0];

        // Four octaves below 1e-3 * ||W||inf.
        let deltas: Vec<f64> = (0..5).map(|k| 1e-3 * w_inf / 2f64.powi(k)).collect();
        let opts = TaylorOptions {
            direction_seed: seed,
            ..Default::default()
        };
        let r = taylor_residual_check(&spec, &high, x, &deltas, opts).unwrap();
        let slope = match r.remainder_fit {
            SlopeFit::Slope(s) => s,
            SlopeFit::WithinNoise => f64::NAN,
        };
        slopes.push(slope);

        // First-order term along a random direction at delta = 1e-3 ||W||inf.
        let dir = gaussian_model("d", &spec.tensor_layout(), 1.0, 700 + seed);
        let dmax = dir.tensors().iter().map(|t| t.max_abs() as f64).fold(0.0, f64::max);
        let low = scale_model(&high, &dir, -1e-3 * w_inf / dmax);
        let fo = first_order_check(&spec, &high, &low, x).unwrap();
        worst_rel = worst_rel.max(fo.relative_error);

        if !(slope >= 1.8) || r.crossed_kink || !fo.smooth || fo.relative_error > 0.10 {
            fails.push(seed);
        }
    }
    let shown: Vec<String> = slopes.iter().map(|s| format!("{s:.3}")).collect();
    check(
        fails.is_empty(),
        format!(
            "remainder slopes [{}]; worst first-order rel. error {worst_rel:.2e}; failing nets {fails:?}",
            shown.join(", ")
        ),
    )
}

fn channel_arithmetic() -> Outcome {
    let cfg = ChannelConfig::new(100_000_000, Duration::from_millis(10)).unwrap();
    let t = channel_time(528_000_000, &cfg);
    let phase = |bytes| {
        PhaseMetrics {
            encoded_bytes: bytes,
            encode_s: 0.0,
            channel_s: 0.0,
            decode_s: 0.0,
            dequantize_s: 0.0,
        }
        .over(&cfg)
    };
    let (b, u) = (8_690_000u64, 20_000u64);
    let r = TransferReport::new(phase(b), Some(phase(u)), 0.0);
    let serialization = (b + u) as f64 * 8.0 / 1e8;
    let propagation = r.sequenced_channel_s() - serialization;
    let seq = bandwidth_requirement(&r, DeliveryMode::Sequenced);
    let par = bandwidth_requirement(&r, DeliveryMode::Parallel);
    check(
        t == 42.25 && (propagation - 0.02).abs() < 1e-12 && seq == b.max(u) && par == b + u && r.validate().is_ok(),
        format!("528 MB -> {t} s; two-phase propagation {propagation:.6} s; sequenced {seq} B, parallel {par} B"),
    )
}

fn protocol() -> Outcome {
    let opts = FetchOptions {
        timeout: Duration::from_secs(5),
        ..Default::default()
    };
    let mut notes = Vec::new();
    let fail = |what: &str| Err(what.to_string());

    // Steps 1-8 with concurrent inference during the upgrade.
    let (spec, _, repo) = mlp_fixture(42);
    let server = spawn(repo.clone(), "127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = server.local_addr();
    let s = Arc::new(ClientSession::new(addr, "mlp", Bitwidth::B4, opts).map_err(|e| e.to_string())?);
    let x = vec![0.25f32; 6];
    if !matches!(s.infer(&spec, &x), Err(ProtoError::NotReady(SessionState::Idle))) {
        return fail("inference allowed before the base arrived");
    }
    notes.push("pre-base inference rejected");
    s.fetch_base().map_err(|e| e.to_string())?;
    let low = s.low_model().unwrap();

    let stop = Arc::new(AtomicBool::new(false));
    let reader = {
        let (s, stop, spec, x) = (s.clone(), stop.clone(), spec.clone(), x.clone());
        thread::spawn(move || {
            let mut seen = Vec::new();
            while !stop.load(Ordering::SeqCst) {
                let m = s.current_model().unwrap();
                seen.push((m.precision, forward(&spec, &m.weights, &x).unwrap()));
            }
            seen
        })
    };
    s.fetch_update().map_err(|e| e.to_string())?;
    thread::sleep(Duration::from_millis(10));
    stop.store(true, Ordering::SeqCst);
    let seen = reader.join().unwrap();
    let proxy = s.proxy_model().ok_or("no proxy after update")?;
    let (yl, yp) = (forward(&spec, &low, &x).unwrap(), forward(&spec, &proxy, &x).unwrap());
    let torn = seen.iter().any(|(p, y)| match p {
        Precision::Low(_) => *y != yl,
        Precision::Proxy { .. } => *y != yp,
    });
    if torn || s.state() != SessionState::ServingProxy {
        return fail("model handle did not upgrade atomically");
    }
    let high = repo.high_precision("mlp").unwrap();
    let gap = p2u::model::model_delta_norms(&proxy, &high).unwrap().global_max_abs;
    notes.push("atomic upgrade");

    // Server restarts with a changed model: stale checksum, one re-fetch.
    let s2 = ClientSession::new(addr, "mlp", Bitwidth::B8, opts).map_err(|e| e.to_string())?;
    s2.fetch_base().map_err(|e| e.to_string())?;
    let old = s2.low_checksum().unwrap();
    server.shutdown();
    let repo2 = Arc::new(ServerRepository::new());
    repo2.insert("mlp", gaussian_mlp(&spec, 43));
    let server = spawn(repo2.clone(), addr).map_err(|e| e.to_string())?;
    if repo2.update_bitstream("mlp", 8, &old, None).map(|_| ()).map_err(|e| e.code)
        != Err(ErrorCode::ChecksumMismatch)
    {
        return fail("stale checksum accepted");
    }
    s2.fetch_update().map_err(|e| e.to_string())?;
    if s2.base_refetches() != 1 || s2.low_checksum() == Some(old) {
        return fail("stale base not recovered by exactly one re-fetch");
    }
    notes.push("stale checksum refused, 1 re-fetch");
    server.shutdown();

    // Fault injection: damaged replies never install a model.
    for fault in [Fault::CorruptBitstream, Fault::Hangup, Fault::TruncateFrame] {
        let (_, _, repo) = mlp_fixture(44);
        let fs = FaultyServer::spawn(repo, fault, &[0, 2]);
        let c = ClientSession::new(fs.addr, "mlp", Bitwidth::B8, opts).map_err(|e| e.to_string())?;
        let base_rejected = c.fetch_base().is_err() && c.state() == SessionState::Idle;
        c.fetch_base().map_err(|e| e.to_string())?;
        let update_rejected = c.fetch_update().is_err() && c.state() == SessionState::ServingLowPrec;
        c.fetch_update().map_err(|e| e.to_string())?;
        if !(base_rejected && update_rejected && c.state() == SessionState::ServingProxy) {
            return Err(format!("fault {fault:?} not contained"));
        }
    }
    notes.push("3 fault kinds contained");
    check(
        gap < 1e-6,
        format!("{}; proxy gap to 32-bit {gap:.2e}", notes.join(", ")),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("lossless codec", lossless_codec),
        ("reconstruction bound", reconstruction_bound),
        ("size ordering", size_ordering),
        ("update compactness", update_compactness),
        ("proxy dominance", proxy_dominance),
        ("taylor scaling", taylor_scaling),
        ("channel arithmetic", channel_arithmetic),
        ("protocol end-to-end", protocol),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} {}. {name}: {detail} [{:.1}s]",
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

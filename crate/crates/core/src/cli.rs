//! The `p2u` command line.
//!
//! Exit codes: 0 success, 2 usage, 3 remote or protocol failure, 4 bad data
//! or file format, 5 internal error.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{run_bench, BenchError, BenchOptions};
use crate::channel::ChannelConfig;
use crate::codec::encode_timed;
use crate::evalnet::{train_classifier, EvalError, LabeledDataset, MlpSpec, TrainConfig};
use crate::model::{Bitwidth, TensorModel};
use crate::proto::{
    fetch_progressive, list_models, serve_listener, FetchOptions, ProtoError, ServerRepository, TriggerPolicy,
};
use crate::quant::quantize;
use crate::report::{fmt_mb, fmt_s, transfer_grid, Grid};
use crate::store::{load_model, save_model, StoreError};
use crate::synth::{checkerboard, gaussian_mlp};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_REMOTE: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

const DEFAULT_ADDR: &str = "127.0.0.1:7878";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

fn fail(code: i32, message: impl std::fmt::Display) -> CliError {
    CliError {
        code,
        message: message.to_string(),
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        fail(EXIT_DATA, e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        fail(EXIT_DATA, e)
    }
}

impl From<ProtoError> for CliError {
    fn from(e: ProtoError) -> Self {
        let code = match e {
            ProtoError::Codec(_) | ProtoError::Update(_) | ProtoError::Eval(_) => EXIT_DATA,
            _ => EXIT_REMOTE,
        };
        fail(code, e)
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        let code = match e {
            BenchError::BadOptions(_) => EXIT_USAGE,
            BenchError::Eval(_) | BenchError::Codec(_) | BenchError::Update(_) => EXIT_DATA,
            BenchError::Channel(_) | BenchError::Remote(_) => EXIT_INTERNAL,
        };
        fail(code, e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum OutputFormat {
    Table,
    Csv,
    Json,
}

/// `4`, `8`, `16` or `32`.
pub fn parse_bitwidth(s: &str) -> Result<Bitwidth, String> {
    s.trim()
        .parse::<u32>()
        .ok()
        .and_then(|b| Bitwidth::from_bits(b).ok())
        .ok_or_else(|| format!("`{s}` is not a supported bitwidth (4, 8, 16 or 32)"))
}

/// Bits per second, with an optional `k`/`M`/`G` prefix and optional `bps`:
/// `100M`, `100Mbps`, `2500000`.
pub fn parse_bandwidth(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let t = t.strip_suffix("bps").unwrap_or(t);
    let (num, mult) = match t.chars().last() {
        Some('k' | 'K') => (&t[..t.len() - 1], 1e3),
        Some('M') => (&t[..t.len() - 1], 1e6),
        Some('G') => (&t[..t.len() - 1], 1e9),
        _ => (t, 1.0),
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("bad bandwidth `{s}`"))?;
    let bps = (v * mult).round();
    if !(bps >= 1.0 && bps < u64::MAX as f64) {
        return Err(format!("bandwidth `{s}` must be at least 1 bit/s"));
    }
    Ok(bps as u64)
}

/// A duration with unit `s`, `ms` or `us`: `10ms`, `0.5s`.
pub fn parse_delay(s: &str) -> Result<Duration, String> {
    let t = s.trim();
    let (num, scale) = if let Some(n) = t.strip_suffix("ms") {
        (n, 1e-3)
    } else if let Some(n) = t.strip_suffix("us") {
        (n, 1e-6)
    } else if let Some(n) = t.strip_suffix('s') {
        (n, 1.0)
    } else {
        return Err(format!("delay `{s}` needs a unit (s, ms or us)"));
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("bad delay `{s}`"))?;
    Duration::try_from_secs_f64(v * scale).map_err(|_| format!("bad delay `{s}`"))
}

/// `immediate`, `manual`, or `after:SECONDS`.
pub fn parse_trigger(s: &str) -> Result<TriggerPolicy, String> {
    match s.trim() {
        "immediate" => Ok(TriggerPolicy::Immediate),
        "manual" => Ok(TriggerPolicy::Manual),
        other => other
            .strip_prefix("after:")
            .and_then(|d| d.parse::<f64>().ok())
            .and_then(|d| Duration::try_from_secs_f64(d).ok())
            .map(TriggerPolicy::AfterDelay)
            .ok_or_else(|| format!("bad trigger `{s}` (immediate, manual or after:SECONDS)")),
    }
}

fn parse_spec(s: &str) -> Result<MlpSpec, String> {
    let p = Path::new(s);
    let result = if p.is_file() {
        std::fs::read_to_string(p)
            .map_err(|e| e.to_string())
            .and_then(|t| MlpSpec::parse_config(&t).map_err(|e| e.to_string()))
    } else {
        s.parse::<MlpSpec>().map_err(|e| e.to_string())
    };
    result.map_err(|e| format!("bad network `{s}`: {e}"))
}

#[derive(Parser, Debug)]
#[command(
    name = "p2u",
    version,
    about = "Ship a low-precision model first, then the update that restores full precision",
    after_help = "Exit codes: 0 success, 2 usage, 3 remote/protocol, 4 data/format, 5 internal.\n\
                  A --config file holds `key = value` lines using the long flag names \
                  (repo-dir, channel-bandwidth, channel-delay, repetitions, seed, output, listen, addr); \
                  flags on the command line win."
)]
struct Cli {
    /// key = value defaults for the flags below.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory of .p2um models served by `serve` (file stem = model id).
    #[arg(long, global = true, value_name = "DIR")]
    repo_dir: Option<PathBuf>,
    /// Simulated link capacity, e.g. 100M or 100Mbps [default: 100M].
    #[arg(long, global = true, value_parser = parse_bandwidth, value_name = "BPS")]
    channel_bandwidth: Option<u64>,
    /// Simulated propagation delay C, e.g. 10ms [default: 10ms].
    #[arg(long, global = true, value_parser = parse_delay, value_name = "DELAY")]
    channel_delay: Option<Duration>,
    /// Timing repetitions; the median is reported [default: 5].
    #[arg(long, global = true, value_name = "N")]
    repetitions: Option<usize>,
    /// Seed for every randomized step [default: 0].
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,
    /// Report format [default: table].
    #[arg(long, global = true, value_enum)]
    output: Option<OutputFormat>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a .p2um model and write the encoded .p2ub bitstream.
    Quantize(QuantizeArgs),
    /// Compare direct delivery with progressive delivery at several bitwidths.
    Bench(BenchArgs),
    /// Serve the models in --repo-dir.
    Serve(ServeArgs),
    /// Fetch a model progressively and report sizes and timings.
    Fetch(FetchArgs),
    /// List the models a server offers.
    List(ListArgs),
    /// Write a random MLP (optionally trained on a checkerboard task).
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    input: PathBuf,
    output_path: PathBuf,
    #[arg(long, short, value_parser = parse_bitwidth)]
    bitwidth: Bitwidth,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Model to benchmark (.p2um).
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    model: Option<PathBuf>,
    /// Use a seeded random MLP with these layer widths instead, e.g. 64,256,10.
    #[arg(long, value_name = "DIMS")]
    synthetic: Option<String>,
    /// Base bitwidths to compare.
    #[arg(long, value_delimiter = ',', value_parser = parse_bitwidth, default_value = "16,8,4")]
    bitwidths: Vec<Bitwidth>,
    /// Network layout for the Top-1 column: layer widths or a config file.
    #[arg(long, value_name = "DIMS|FILE")]
    mlp_spec: Option<String>,
    /// Labelled CSV test data for the Top-1 column.
    #[arg(long, value_name = "CSV")]
    dataset: Option<PathBuf>,
    /// Count compute phases as zero so output depends only on the inputs.
    #[arg(long)]
    channel_only: bool,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Address to listen on [default: 127.0.0.1:7878].
    #[arg(long, value_name = "ADDR")]
    listen: Option<String>,
}

#[derive(Args, Debug)]
struct FetchArgs {
    /// Server address [default: 127.0.0.1:7878].
    #[arg(long, value_name = "ADDR")]
    addr: Option<String>,
    /// Model id.
    #[arg(long)]
    model: String,
    /// Bitwidth of the first delivery.
    #[arg(long, short, value_parser = parse_bitwidth, default_value = "8")]
    bitwidth: Bitwidth,
    /// When to request the update: immediate, manual, after:SECONDS.
    #[arg(long, value_parser = parse_trigger, default_value = "immediate")]
    trigger: TriggerPolicy,
    /// Stop after the low-precision model.
    #[arg(long)]
    no_update: bool,
    /// Largest acceptable proxy error; lets the server pick a narrower update.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Write the low-precision model here (.p2um).
    #[arg(long, value_name = "PATH")]
    out_low: Option<PathBuf>,
    /// Write the proxy model here (.p2um).
    #[arg(long, value_name = "PATH")]
    out_proxy: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ListArgs {
    /// Server address [default: 127.0.0.1:7878].
    #[arg(long, value_name = "ADDR")]
    addr: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    output_path: PathBuf,
    /// Layer widths.
    #[arg(long, default_value = "16,64,10")]
    dims: String,
    /// Train on a 4x4 checkerboard (needs 2 inputs and 2 outputs) and write
    /// held-out test rows to this CSV.
    #[arg(long, value_name = "CSV")]
    checkerboard: Option<PathBuf>,
}

/// Flags after merging the config file and defaults.
struct Settings {
    repo_dir: Option<PathBuf>,
    channel: ChannelConfig,
    repetitions: usize,
    seed: u64,
    output: OutputFormat,
    listen: Option<String>,
    addr: Option<String>,
}

fn read_config(path: &Path) -> Result<HashMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| fail(EXIT_USAGE, format!("cannot read config {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fail(EXIT_USAGE, format!("config line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        const KEYS: [&str; 8] = [
            "repo-dir",
            "channel-bandwidth",
            "channel-delay",
            "repetitions",
            "seed",
            "output",
            "listen",
            "addr",
        ];
        if !KEYS.contains(&k) {
            return Err(fail(EXIT_USAGE, format!("config line {}: unknown key `{k}`", i + 1)));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn settle(cli: &Cli) -> Result<Settings, CliError> {
    let cfg = match &cli.config {
        Some(p) => read_config(p)?,
        None => HashMap::new(),
    };
    let from_cfg = |key: &str| cfg.get(key).map(String::as_str);
    let usage = |e: String| fail(EXIT_USAGE, format!("config: {e}"));
    let bandwidth = match (cli.channel_bandwidth, from_cfg("channel-bandwidth")) {
        (Some(b), _) => b,
        (None, Some(s)) => parse_bandwidth(s).map_err(usage)?,
        (None, None) => ChannelConfig::default().bandwidth_bps(),
    };
    let delay = match (cli.channel_delay, from_cfg("channel-delay")) {
        (Some(d), _) => d,
        (None, Some(s)) => parse_delay(s).map_err(usage)?,
        (None, None) => ChannelConfig::default().delay(),
    };
    let parse_num = |key: &str| -> Result<Option<u64>, CliError> {
        from_cfg(key)
            .map(|s| s.parse::<u64>().map_err(|_| usage(format!("bad {key} `{s}`"))))
            .transpose()
    };
    let output = match (cli.output, from_cfg("output")) {
        (Some(o), _) => o,
        (None, Some(s)) => OutputFormat::from_str(s, true).map_err(usage)?,
        (None, None) => OutputFormat::Table,
    };
    let channel = ChannelConfig::new(bandwidth, delay).map_err(|e| fail(EXIT_USAGE, e))?;
    let repetitions = match cli.repetitions {
        Some(r) => r,
        None => parse_num("repetitions")?.map_or(5, |r| r as usize),
    };
    if repetitions == 0 {
        return Err(fail(EXIT_USAGE, "--repetitions must be at least 1"));
    }
    Ok(Settings {
        repo_dir: cli.repo_dir.clone().or_else(|| from_cfg("repo-dir").map(PathBuf::from)),
        channel,
        repetitions,
        seed: match cli.seed {
            Some(s) => s,
            None => parse_num("seed")?.unwrap_or(0),
        },
        output,
        listen: from_cfg("listen").map(String::from),
        addr: from_cfg("addr").map(String::from),
    })
}

fn emit(out: &mut dyn Write, s: &str) -> Result<(), CliError> {
    out.write_all(s.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| fail(EXIT_INTERNAL, format!("writing output: {e}")))
}

fn render(out: &mut dyn Write, format: OutputFormat, grid: &Grid, json: impl Serialize) -> Result<(), CliError> {
    let text = match format {
        OutputFormat::Table => grid.to_table(),
        OutputFormat::Csv => grid.to_csv(),
        OutputFormat::Json => serde_json::to_string_pretty(&json).expect("plain data") + "\n",
    };
    emit(out, &text)
}

fn cmd_quantize(args: &QuantizeArgs, s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(&args.input)?;
    let start = Instant::now();
    let q = quantize(&model, args.bitwidth);
    let quantize_s = start.elapsed().as_secs_f64();
    let (bitstream, encode_t) = encode_timed(&q);
    std::fs::write(&args.output_path, bitstream.as_bytes())
        .map_err(|e| fail(EXIT_DATA, format!("writing {}: {e}", args.output_path.display())))?;
    #[derive(Serialize)]
    struct Line {
        output: String,
        bitwidth: u32,
        bytes: usize,
        quantize_s: f64,
        encode_s: f64,
        checksum: String,
    }
    let line = Line {
        output: args.output_path.display().to_string(),
        bitwidth: args.bitwidth.bits(),
        bytes: bitstream.len(),
        quantize_s,
        encode_s: encode_t.as_secs_f64(),
        checksum: bitstream.checksum().to_hex(),
    };
    let mut g = Grid::new(&["Output", "Bits", "Bytes", "Size (MB)", "Quantize (s)", "Encode (s)"]);
    g.push(vec![
        line.output.clone(),
        line.bitwidth.to_string(),
        line.bytes.to_string(),
        fmt_mb(line.bytes as u64),
        fmt_s(line.quantize_s),
        fmt_s(line.encode_s),
    ]);
    render(out, s.output, &g, line)
}

fn cmd_bench(args: &BenchArgs, s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let synthetic = args
        .synthetic
        .as_deref()
        .map(parse_spec)
        .transpose()
        .map_err(|e| fail(EXIT_USAGE, e))?;
    let model = match (&args.model, &synthetic) {
        (Some(p), _) => load_model(p)?,
        (None, Some(spec)) => gaussian_mlp(spec, s.seed),
        (None, None) => return Err(fail(EXIT_USAGE, "give --model or --synthetic")),
    };
    let spec = match &args.mlp_spec {
        Some(text) => Some(parse_spec(text).map_err(|e| fail(EXIT_USAGE, e))?),
        None => synthetic,
    };
    let eval = match (&args.dataset, spec) {
        (Some(d), Some(spec)) => Some((spec, LabeledDataset::load_csv(d)?)),
        (Some(_), None) => return Err(fail(EXIT_USAGE, "--dataset needs --mlp-spec")),
        (None, _) => None,
    };
    let opts = BenchOptions {
        channel: s.channel,
        repetitions: s.repetitions,
        eval,
        channel_only: args.channel_only,
    };
    let result = run_bench(&model, &args.bitwidths, &opts)?;
    render(out, s.output, &result.grid(), &result)
}

fn cmd_serve(args: &ServeArgs, s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = s
        .repo_dir
        .as_ref()
        .ok_or_else(|| fail(EXIT_USAGE, "serve needs --repo-dir"))?;
    let repo = ServerRepository::from_dir(dir)?;
    if repo.is_empty() {
        return Err(fail(EXIT_DATA, format!("no .p2um models in {}", dir.display())));
    }
    let addr = args.listen.clone().or(s.listen.clone()).unwrap_or(DEFAULT_ADDR.into());
    let listener = std::net::TcpListener::bind(&addr)
        .map_err(|e| fail(EXIT_REMOTE, format!("cannot listen on {addr}: {e}")))?;
    let bound = listener.local_addr().map_err(|e| fail(EXIT_REMOTE, e))?;
    emit(out, &format!("serving {} on {bound}\n", repo.model_ids().join(", ")))?;
    serve_listener(Arc::new(repo), listener).map_err(|e| fail(EXIT_REMOTE, e))
}

fn cmd_fetch(args: &FetchArgs, s: &Settings, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let addr = args.addr.clone().or(s.addr.clone()).unwrap_or(DEFAULT_ADDR.into());
    let trigger = if args.no_update {
        TriggerPolicy::Manual
    } else {
        args.trigger
    };
    let opts = FetchOptions {
        channel: s.channel,
        tolerance: args.tolerance,
        ..Default::default()
    };
    let outcome = fetch_progressive(addr.as_str(), &args.model, args.bitwidth, trigger, opts)?;
    if let Some(p) = &args.out_low {
        save_model(&outcome.low, p)?;
    }
    if let (Some(p), Some(proxy)) = (&args.out_proxy, &outcome.proxy) {
        save_model(proxy, p)?;
    }
    render(out, s.output, &transfer_grid(&outcome.report), &outcome.report)?;
    if let Some(f) = outcome.failure {
        let _ = writeln!(err, "warning: update phase failed: {}", f.error);
        return Err(CliError::from(f.error));
    }
    Ok(())
}

fn cmd_list(args: &ListArgs, s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let addr = args.addr.clone().or(s.addr.clone()).unwrap_or(DEFAULT_ADDR.into());
    let manifests = list_models(addr.as_str(), Duration::from_secs(30))?;
    let mut g = Grid::new(&["Model", "Bits", "Bytes", "Checksum"]);
    #[derive(Serialize)]
    struct Entry {
        model: String,
        bitwidth: u32,
        bytes: u64,
        checksum: String,
    }
    let mut entries = Vec::new();
    for m in &manifests {
        for e in m.entries() {
            let entry = Entry {
                model: m.model_id().into(),
                bitwidth: e.bitwidth.bits(),
                bytes: e.encoded_size,
                checksum: e.checksum.to_hex(),
            };
            g.push(vec![
                entry.model.clone(),
                entry.bitwidth.to_string(),
                entry.bytes.to_string(),
                entry.checksum.clone(),
            ]);
            entries.push(entry);
        }
    }
    render(out, s.output, &g, entries)
}

fn cmd_synth(args: &SynthArgs, s: &Settings, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = parse_spec(&args.dims).map_err(|e| fail(EXIT_USAGE, e))?;
    let model: TensorModel = match &args.checkerboard {
        None => gaussian_mlp(&spec, s.seed),
        Some(csv) => {
            if spec.input_dim() != 2 || spec.output_dim() != 2 {
                return Err(fail(EXIT_USAGE, "--checkerboard needs 2 inputs and 2 outputs"));
            }
            let train = checkerboard(4000, 4, s.seed);
            let test = checkerboard(2000, 4, s.seed.wrapping_add(1));
            let cfg = TrainConfig {
                epochs: 60,
                seed: s.seed,
                ..Default::default()
            };
            let m = train_classifier(&spec, &train, &cfg)?;
            std::fs::write(csv, test.to_csv())
                .map_err(|e| fail(EXIT_DATA, format!("writing {}: {e}", csv.display())))?;
            m
        }
    };
    save_model(&model, &args.output_path)?;
    emit(
        out,
        &format!(
            "wrote {} ({} parameters)\n",
            args.output_path.display(),
            model.num_parameters()
        ),
    )
}

/// Parses `args` (program name first) and runs the command. Returns the exit
/// code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(text.as_bytes());
            } else {
                let _ = err.write_all(text.as_bytes());
            }
            return code;
        }
    };
    let result = settle(&cli).and_then(|s| match &cli.command {
        Command::Quantize(a) => cmd_quantize(a, &s, out),
        Command::Bench(a) => cmd_bench(a, &s, out),
        Command::Serve(a) => cmd_serve(a, &s, out),
        Command::Fetch(a) => cmd_fetch(a, &s, out, err),
        Command::List(a) => cmd_list(a, &s, out),
        Command::Synth(a) => cmd_synth(a, &s, out),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

//! Direct delivery versus progressive delivery for a synthetic MLP, printed
//! as a table and as CSV.
//!
//! cargo run --release --example bench_table

use p2u::bench::{run_bench, BenchOptions};
use p2u::evalnet::MlpSpec;
use p2u::model::Bitwidth;
use p2u::synth::gaussian_mlp;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = MlpSpec::new(vec![64, 256, 256, 10])?;
    let model = gaussian_mlp(&spec, 0);
    let opts = BenchOptions {
        repetitions: 3,
        ..Default::default()
    };
    let result = run_bench(&model, &[Bitwidth::B16, Bitwidth::B8, Bitwidth::B4], &opts)?;
    print!("{}", result.grid().to_table());
    println!();
    print!("{}", result.grid().to_csv());
    Ok(())
}

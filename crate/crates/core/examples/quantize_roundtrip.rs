//! Save a model, reload it, and measure what each bitwidth loses.
//!
//! cargo run --example quantize_roundtrip

use p2u::evalnet::MlpSpec;
use p2u::model::{model_delta_norms, Bitwidth};
use p2u::quant::{dequantize, quantize};
use p2u::store::{load_model, save_model};
use p2u::synth::gaussian_mlp;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = MlpSpec::new(vec![32, 128, 64, 10])?;
    let model = gaussian_mlp(&spec, 7);

    let dir = std::env::temp_dir().join("p2u-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("mlp.p2um");
    save_model(&model, &path)?;
    assert_eq!(load_model(&path)?, model);
    println!("{} parameters, P2UM file {} bytes", model.num_parameters(), std::fs::metadata(&path)?.len());

    println!("{:>5} {:>14} {:>14}", "bits", "max |w - w'|", "largest scale");
    for b in Bitwidth::ALL {
        let q = quantize(&model, b);
        let gap = model_delta_norms(&model, &dequantize(&q))?;
        let scale = q.tensors().iter().map(|t| t.scale()).fold(0.0f32, f32::max);
        println!("{:>5} {:>14.3e} {:>14.3e}", b.bits(), gap.global_max_abs, scale);
    }
    Ok(())
}

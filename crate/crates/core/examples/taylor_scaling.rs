//! How the proxy's output error shrinks as the base gets closer to the
//! high-precision model. The remainder gap falls with the square of the
//! perturbation; the plain proxy error only linearly, because the coarse
//! update's own rounding scales with it.
//!
//! cargo run --example taylor_scaling

use p2u::evalnet::{first_order_check, taylor_residual_check, Mlp, MlpSpec, SlopeFit, TaylorOptions};
use p2u::model::Bitwidth;
use p2u::quant::{dequantize, quantize};
use p2u::synth::{gaussian_inputs, gaussian_mlp};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = MlpSpec::new(vec![8, 32, 32, 4])?;
    let high = gaussian_mlp(&spec, 11);
    let net = Mlp::from_model(&spec, &high)?;
    let x = gaussian_inputs(8, 64, 2)
        .into_iter()
        .max_by(|a, b| net.kink_margin(a).unwrap().total_cmp(&net.kink_margin(b).unwrap()))
        .unwrap();
    println!("kink margin at x: {:.3}", net.kink_margin(&x)?);

    let deltas: Vec<f64> = (0..6).map(|k| 1e-3 / 2f64.powi(k)).collect();
    let r = taylor_residual_check(&spec, &high, &x, &deltas, TaylorOptions::default())?;
    println!("\n{:>10} {:>14} {:>14}", "delta", "proxy error", "remainder gap");
    for p in &r.points {
        println!("{:>10.3e} {:>14.3e} {:>14.3e}", p.delta, p.proxy_error, p.remainder_gap);
    }
    let show = |f: SlopeFit| match f {
        SlopeFit::Slope(s) => format!("{s:.3}"),
        SlopeFit::WithinNoise => "within noise".into(),
    };
    println!("\nslope: remainder {}, proxy error {}", show(r.remainder_fit), show(r.proxy_error_fit));
    println!("crossed a kink: {}", r.crossed_kink);

    let fo = first_order_check(&spec, &high, &dequantize(&quantize(&high, Bitwidth::B16)), &x)?;
    println!(
        "first-order vs central differences: {:.2e} relative (smooth: {})",
        fo.relative_error, fo.smooth
    );
    Ok(())
}

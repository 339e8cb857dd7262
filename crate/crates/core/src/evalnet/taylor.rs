//! Numerical checks of the first-order picture behind proxy reconstruction.
//!
//! Write `J(W)` for the Jacobian of the logits with respect to the weights and
//! `R(A, B) = f(A) - f(B) - J(B)(A - B)` for the Taylor remainder expanded at
//! `B`. With `W^l = W^h - Δ` and the proxy `W' = W^l + Q(Δ)`:
//!
//! ```text
//! f(W') - f(W^h) = J(W^l)(W' - W^h) + R(W', W^l) - R(W^h, W^l)
//! ```
//!
//! The first term is linear in the update's quantization error; the remainder
//! gap is the part that should shrink quadratically as `Δ` does.
//! [`taylor_residual_check`] measures both over a geometric family of `Δ`
//! and fits the log-log slope of the remainder gap.
//!
//! Everything here runs in f64 with no intermediate rounding, so the checker's
//! own arithmetic stays far below the quantities it measures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EvalError, Layer, Mlp, MlpSpec};
use crate::model::{Bitwidth, TensorModel};
use crate::quant::quantize_values;

/// Central-difference step in weight space.
const FD_STEP: f64 = 1e-4;

fn combine(a: &[Layer], b: &[Layer], t: f64) -> Vec<Layer> {
    a.iter()
        .zip(b)
        .map(|(p, q)| Layer {
            n_in: p.n_in,
            n_out: p.n_out,
            w: p.w.iter().zip(&q.w).map(|(x, y)| x + t * y).collect(),
            b: p.b.iter().zip(&q.b).map(|(x, y)| x + t * y).collect(),
        })
        .collect()
}

fn map_layers(a: &[Layer], mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Vec<Layer> {
    a.iter()
        .map(|p| Layer {
            n_in: p.n_in,
            n_out: p.n_out,
            w: f(&p.w),
            b: f(&p.b),
        })
        .collect()
}

fn max_abs_layers(a: &[Layer]) -> f64 {
    a.iter()
        .flat_map(|p| p.w.iter().chain(&p.b))
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Logits and their directional derivative along `tangent` (forward mode).
fn jvp(layers: &[Layer], tangent: &[Layer], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a = x.to_vec();
    let mut da = vec![0.0; x.len()];
    let last = layers.len() - 1;
    for (i, (p, t)) in layers.iter().zip(tangent).enumerate() {
        let mut z = Vec::with_capacity(p.n_out);
        let mut dz = Vec::with_capacity(p.n_out);
        for j in 0..p.n_out {
            let row = j * p.n_in..(j + 1) * p.n_in;
            let (w, dw) = (&p.w[row.clone()], &t.w[row]);
            let mut v = p.b[j];
            let mut dv = t.b[j];
            for k in 0..p.n_in {
                v += w[k] * a[k];
                dv += dw[k] * a[k] + w[k] * da[k];
            }
            z.push(v);
            dz.push(dv);
        }
        if i < last {
            for (v, dv) in z.iter_mut().zip(&mut dz) {
                if *v <= 0.0 {
                    *v = 0.0;
                    *dv = 0.0;
                }
            }
        }
        a = z;
        da = dz;
    }
    (a, da)
}

fn eval(layers: &[Layer], x: &[f64]) -> Vec<f64> {
    Mlp::from_layers(layers.to_vec()).eval(x)
}

fn pattern(layers: &[Layer], x: &[f64]) -> Vec<bool> {
    Mlp::from_layers(layers.to_vec()).activation_pattern(x)
}

fn prepare(spec: &MlpSpec, model: &TensorModel, x: &[f32]) -> Result<(Vec<Layer>, Vec<f64>), EvalError> {
    let net = Mlp::from_model(spec, model)?.exact();
    net.check_input(x.len())?;
    Ok((net.layers, x.iter().map(|&v| v as f64).collect()))
}

/// Slope of a least-squares line through `(ln x, ln y)`.
fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorOptions {
    /// Seed for the random perturbation direction.
    pub direction_seed: u64,
    /// Bitwidth of the (deliberately coarse) update.
    pub update_bitwidth: Bitwidth,
}

impl Default for TaylorOptions {
    fn default() -> Self {
        TaylorOptions {
            direction_seed: 0,
            update_bitwidth: Bitwidth::B8,
        }
    }
}

/// Measurements at one perturbation size. All values are maxima over the
/// output components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorPoint {
    /// `‖Δ‖∞`.
    pub delta: f64,
    /// `|f(W') - f(W^h)|`.
    pub proxy_error: f64,
    /// `|R(W', W^l) - R(W^h, W^l)|`.
    pub remainder_gap: f64,
    /// `|R(W^h, W^l)|`.
    pub high_remainder: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SlopeFit {
    Slope(f64),
    /// Fewer than two points rose above float noise.
    WithinNoise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaylorReport {
    pub points: Vec<TaylorPoint>,
    /// Fit of `ln remainder_gap` against `ln delta`.
    pub remainder_fit: SlopeFit,
    /// Same fit for `proxy_error`; first order since the update's own
    /// quantization error scales with `Δ`.
    pub proxy_error_fit: SlopeFit,
    /// Some perturbation moved a hidden unit across its ReLU kink at `x`.
    pub crossed_kink: bool,
}

/// Perturbs `high` along a seeded random direction `D` (`‖D‖∞ = 1`) by each
/// size in `deltas`, so `Δ_k = δ_k D` and `W^l_k = W^h - Δ_k`, rebuilds the
/// proxy from a `Δ_k` quantized per tensor at `opts.update_bitwidth`, and
/// fits how the remainder gap scales with `δ`.
pub fn taylor_residual_check(
    spec: &MlpSpec,
    high: &TensorModel,
    x: &[f32],
    deltas: &[f64],
    opts: TaylorOptions,
) -> Result<TaylorReport, EvalError> {
    let (wh, x) = prepare(spec, high, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.direction_seed);
    let dir = map_layers(&wh, |v| v.iter().map(|_| StandardNormal.sample(&mut rng)).collect());
    let norm = max_abs_layers(&dir);
    let dir = map_layers(&dir, |v| v.iter().map(|d| d / norm).collect());

    let fh = eval(&wh, &x);
    let ph = pattern(&wh, &x);
    let floor = 64.0 * f64::EPSILON * (1.0 + max_abs(fh.iter().copied()));
    let mut crossed_kink = false;
    let mut points = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let step = map_layers(&dir, |v| v.iter().map(|d| delta * d).collect());
        let wl = combine(&wh, &step, -1.0);
        // W' - W^h = Q(Δ) - Δ
        let quant_err = map_layers(&step, |v| {
            let m = max_abs(v.iter().copied());
            let (codes, scale) = quantize_values(v, m, opts.update_bitwidth);
            codes.iter().zip(v).map(|(&q, d)| q as f64 * scale as f64 - d).collect()
        });
        let wp = combine(&wh, &quant_err, 1.0);
        crossed_kink |= pattern(&wl, &x) != ph || pattern(&wp, &x) != ph;

        let fp = eval(&wp, &x);
        let (fl, j_delta) = jvp(&wl, &step, &x);
        let (_, j_err) = jvp(&wl, &quant_err, &x);
        let n = fh.len();
        points.push(TaylorPoint {
            delta,
            proxy_error: max_abs((0..n).map(|i| fp[i] - fh[i])),
            remainder_gap: max_abs((0..n).map(|i| fp[i] - fh[i] - j_err[i])),
            high_remainder: max_abs((0..n).map(|i| fh[i] - fl[i] - j_delta[i])),
        });
    }

    let fit = |get: fn(&TaylorPoint) -> f64| {
        let usable: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p.delta > 0.0 && get(p) > floor)
            .map(|p| (p.delta, get(p)))
            .collect();
        if usable.len() < 2 {
            SlopeFit::WithinNoise
        } else {
            SlopeFit::Slope(loglog_slope(&usable))
        }
    };
    Ok(TaylorReport {
        remainder_fit: fit(|p| p.remainder_gap),
        proxy_error_fit: fit(|p| p.proxy_error),
        points,
        crossed_kink,
    })
}

/// First-order prediction of `f(W^h) - f(W^l)` compared with the actual
/// difference.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstOrderCheck {
    /// `f(W^h, x) - f(W^l, x)`.
    pub actual: Vec<f64>,
    /// `J(W^l)(W^h - W^l)` by forward-mode differentiation.
    pub analytic: Vec<f64>,
    /// The same product by central differences along `W^h - W^l`.
    pub finite_difference: Vec<f64>,
    /// `‖actual - finite_difference‖∞ / ‖actual‖∞`.
    pub relative_error: f64,
    /// `‖analytic - finite_difference‖∞ / ‖finite_difference‖∞`.
    pub gradient_mismatch: f64,
    /// No hidden unit changed sign across `W^l ± step` or at `W^h`.
    pub smooth: bool,
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num = max_abs(a.iter().zip(b).map(|(x, y)| x - y));
    let den = max_abs(b.iter().copied());
    if den == 0.0 {
        if num == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        num / den
    }
}

pub fn first_order_check(
    spec: &MlpSpec,
    high: &TensorModel,
    low: &TensorModel,
    x: &[f32],
) -> Result<FirstOrderCheck, EvalError> {
    let (wl, _) = prepare(spec, low, x)?;
    let (wh, x) = prepare(spec, high, x)?;
    let diff = combine(&wh, &wl, -1.0);
    let size = max_abs_layers(&diff);
    let dir = if size > 0.0 {
        map_layers(&diff, |v| v.iter().map(|d| d / size).collect())
    } else {
        diff.clone()
    };
    let (plus, minus) = (combine(&wl, &dir, FD_STEP), combine(&wl, &dir, -FD_STEP));
    let (fp, fm) = (eval(&plus, &x), eval(&minus, &x));
    let finite_difference: Vec<f64> = fp
        .iter()
        .zip(&fm)
        .map(|(a, b)| (a - b) / (2.0 * FD_STEP) * size)
        .collect();
    let (fl, analytic) = jvp(&wl, &diff, &x);
    let actual: Vec<f64> = eval(&wh, &x).iter().zip(&fl).map(|(a, b)| a - b).collect();
    let pl = pattern(&wl, &x);
    let smooth = [&plus, &minus, &wh].iter().all(|w| pattern(w, &x) == pl);
    Ok(FirstOrderCheck {
        relative_error: rel(&finite_difference, &actual),
        gradient_mismatch: rel(&analytic, &finite_difference),
        actual,
        analytic,
        finite_difference,
        smooth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalnet::model_from_layers;

    fn small_net() -> (MlpSpec, TensorModel) {
        let spec = MlpSpec::new(vec![2, 3, 2]).unwrap();
        let m = model_from_layers(
            "t",
            &spec,
            vec![
                (vec![0.9, -0.4, 0.3, 0.8, -0.7, 0.2], vec![0.1, 0.2, 0.3]),
                (vec![0.5, -0.6, 0.7, -0.2, 0.4, 0.9], vec![0.05, -0.05]),
            ],
        )
        .unwrap();
        (spec, m)
    }

    #[test]
    fn jvp_matches_central_differences() {
        let (spec, m) = small_net();
        let (w, x) = prepare(&spec, &m, &[0.7, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = map_layers(&w, |v| v.iter().map(|_| StandardNormal.sample(&mut rng)).collect());
        let (_, d) = jvp(&w, &t, &x);
        let h = 1e-5;
        let fd: Vec<f64> = eval(&combine(&w, &t, h), &x)
            .iter()
            .zip(eval(&combine(&w, &t, -h), &x))
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        assert!(rel(&d, &fd) < 1e-8, "{d:?} vs {fd:?}");
    }

    #[test]
    fn zero_perturbation_is_within_noise() {
        let (spec, m) = small_net();
        let r = taylor_residual_check(&spec, &m, &[0.7, 0.4], &[0.0; 5], TaylorOptions::default())
            .unwrap();
        assert_eq!(r.remainder_fit, SlopeFit::WithinNoise);
        assert_eq!(r.proxy_error_fit, SlopeFit::WithinNoise);
    }

    #[test]
    fn remainder_gap_is_second_order() {
        let (spec, m) = small_net();
        let deltas: Vec<f64> = (0..5).map(|k| 1e-2 / (1 << k) as f64).collect();
        let r = taylor_residual_check(&spec, &m, &[0.7, 0.4], &deltas, TaylorOptions::default())
            .unwrap();
        assert!(!r.crossed_kink);
        match r.remainder_fit {
            SlopeFit::Slope(s) => assert!((s - 2.0).abs() < 0.05, "slope {s}"),
            SlopeFit::WithinNoise => panic!("no signal"),
        }
        match r.proxy_error_fit {
            SlopeFit::Slope(s) => assert!((s - 1.0).abs() < 0.1, "slope {s}"),
            SlopeFit::WithinNoise => panic!("no signal"),
        }
    }

    #[test]
    fn first_order_term_of_identical_models_is_zero() {
        let (spec, m) = small_net();
        let c = first_order_check(&spec, &m, &m, &[0.7, 0.4]).unwrap();
        assert!(c.actual.iter().all(|&v| v == 0.0));
        assert_eq!(c.relative_error, 0.0);
    }
}

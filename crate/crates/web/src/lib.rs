//! Browser demo: the DGM rounding proxy, a fake-quantizer transfer curve
//! with both backward rules, and Gumbel-Softmax bit selection.
//!
//! Each export has a plain Rust twin (`*_impl`) so the numerics can be
//! tested natively.

use dynaquant::autodiff::Graph;
use dynaquant::quant::{dgm_grad, dgm_proxy, fake_quantize, AffineQuantParams, GradientMode, QuantVars};
use dynaquant::selector::gumbel_softmax;
use dynaquant::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// Interleaved `x, g, g'` over `x ∈ [0, 3]`.
pub fn proxy_curve_impl(beta: f64, samples_per_unit: usize) -> Result<Vec<f64>, String> {
    GradientMode::dgm(beta).map_err(|e| e.to_string())?;
    if samples_per_unit == 0 {
        return Err("samples per unit must be positive".into());
    }
    let n = 3 * samples_per_unit;
    let mut out = Vec::with_capacity(3 * (n + 1));
    for i in 0..=n {
        let x = i as f64 / samples_per_unit as f64;
        let t = x - x.floor();
        out.extend([x, dgm_proxy(t, beta), dgm_grad(t, beta)]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn proxy_curve(beta: f64, samples_per_unit: usize) -> Result<Vec<f64>, JsError> {
    proxy_curve_impl(beta, samples_per_unit).map_err(js)
}

/// Interleaved `x, x̃, ∂x̃/∂x (STE), ∂x̃/∂x (DGM)` for `samples` points on
/// `[lo, hi]`.
pub fn fake_quant_curve_impl(
    bits: u32,
    scale: f64,
    zero_point: f64,
    beta: f64,
    lo: f64,
    hi: f64,
    samples: usize,
) -> Result<Vec<f64>, String> {
    if samples < 2 || !(hi > lo) {
        return Err("need at least two samples on a non-empty range".into());
    }
    if !(scale > 0.0) {
        return Err(format!("scale must be positive, got {scale}"));
    }
    let dgm = GradientMode::dgm(beta).map_err(|e| e.to_string())?;
    let p = AffineQuantParams::<f64>::from_scale(&[scale], &[zero_point], bits, 0).map_err(|e| e.to_string())?;
    let xs: Vec<f64> = (0..samples)
        .map(|i| lo + (hi - lo) * i as f64 / (samples - 1) as f64)
        .collect();
    let run = |mode| -> Result<(Vec<f64>, Vec<f64>), dynaquant::Error> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[samples], xs.clone())?, true);
        let vars = QuantVars::from_params(&mut g, &p, false, false)?;
        let y = fake_quantize(&mut g, x, &vars, mode)?;
        let total = g.sum(y);
        g.backward(total)?;
        Ok((g.value(y).data().to_vec(), g.grad(x).unwrap().data().to_vec()))
    };
    let (y, ste) = run(GradientMode::Ste).map_err(|e| e.to_string())?;
    let (_, soft) = run(dgm).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(4 * samples);
    for i in 0..samples {
        out.extend([xs[i], y[i], ste[i], soft[i]]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn fake_quant_curve(
    bits: u32,
    scale: f64,
    zero_point: f64,
    beta: f64,
    lo: f64,
    hi: f64,
    samples: usize,
) -> Result<Vec<f64>, JsError> {
    fake_quant_curve_impl(bits, scale, zero_point, beta, lo, hi, samples).map_err(js)
}

/// `draws` Gumbel-Softmax samples of one logit row. Returns the hard
/// selection frequencies followed by the mean soft probabilities.
pub fn gumbel_histogram_impl(logits: &[f64], tau: f64, draws: usize, seed: u64) -> Result<Vec<f64>, String> {
    let m = logits.len();
    if m < 2 || draws == 0 {
        return Err("need at least two logits and one draw".into());
    }
    let mut freq = vec![0.0; m];
    let mut soft = vec![0.0; m];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<f64> = logits.iter().copied().cycle().take(m * draws).collect();
    for hard in [true, false] {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::new(&[draws, m], rows.clone()).map_err(|e| e.to_string())?, false);
        let y = gumbel_softmax(&mut g, l, tau, hard, Some(&mut rng)).map_err(|e| e.to_string())?;
        let acc = if hard { &mut freq } else { &mut soft };
        for row in g.value(y).data().chunks(m) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / draws as f64;
            }
        }
    }
    freq.extend(soft);
    Ok(freq)
}

#[wasm_bindgen]
pub fn gumbel_histogram(logits: &[f64], tau: f64, draws: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    gumbel_histogram_impl(logits, tau, draws, seed).map_err(js)
}

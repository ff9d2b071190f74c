mod common;

use common::{random, rng};
use dynaquant::autodiff::{register_custom_gradient, Graph};
use dynaquant::quant::{
    calibrate_init, dequantize, dgm_grad, dgm_proxy, dgm_soft_round, fake_quantize, fake_quantize_tensor, quantize,
    AffineQuantParams, GradientMode, QuantVars,
};
use dynaquant::Tensor;

fn per_tensor(s: f64, z: f64, bits: u32) -> AffineQuantParams<f64> {
    AffineQuantParams::from_scale(&[s], &[z], bits, 0).unwrap()
}

#[test]
fn ties_round_away_from_zero() {
    let p = per_tensor(1.0, 0.0, 8);
    let x = Tensor::from_f64(&[4], &[0.5, 1.5, 2.5, 254.5]).unwrap();
    assert_eq!(quantize(&x, &p).unwrap().data(), &[1, 2, 3, 255]);
}

#[test]
fn zero_point_cancels() {
    let p = per_tensor(1.0, 128.0, 8);
    let q = Tensor::new(&[1], vec![128u32]).unwrap();
    assert_eq!(dequantize(&q, &p).unwrap().data(), &[0.0]);
}

#[test]
fn outputs_lie_on_the_grid_and_are_idempotent() {
    let mut r = rng(20);
    let x = random(&[3, 50], -4.0, 4.0, &mut r);
    let p = AffineQuantParams::from_scale(&[0.05, 0.11, 0.3], &[10.3, 0.0, 7.5], 6, 0).unwrap();
    let xt = fake_quantize_tensor(&x, &p).unwrap();
    for (i, &v) in xt.data().iter().enumerate() {
        let ch = i / 50;
        let (s, z) = ([0.05, 0.11, 0.3][ch], [10.3, 0.0, 7.5][ch]);
        let k = v / s + z;
        assert!((k - k.round()).abs() < 1e-9, "{v} is off the grid");
        assert!((0.0..=63.0).contains(&k.round()));
    }
    let again = fake_quantize_tensor(&xt, &p).unwrap();
    for (a, b) in again.data().iter().zip(xt.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn calibrated_params_reconstruct_within_half_step() {
    let mut r = rng(21);
    let x = random(&[4, 3, 5, 5], -2.0, 3.0, &mut r);
    for bits in [4, 6, 8] {
        let p = calibrate_init(&x, bits, 1).unwrap();
        let xt = fake_quantize_tensor(&x, &p).unwrap();
        let s: Vec<f64> = p.scale();
        for (i, (a, b)) in x.data().iter().zip(xt.data()).enumerate() {
            let ch = (i / 25) % 3;
            assert!((a - b).abs() <= s[ch] / 2.0 + 1e-12);
        }
    }
}

#[test]
fn more_bits_never_increase_mean_error() {
    let mut r = rng(22);
    let x = random(&[2, 4, 8, 8], -1.0, 1.0, &mut r);
    let err = |bits| {
        let p = calibrate_init(&x, bits, 1).unwrap();
        let xt = fake_quantize_tensor(&x, &p).unwrap();
        x.data().iter().zip(xt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64
    };
    for bits in [2, 4, 6, 8] {
        assert!(err(bits + 2) <= err(bits));
    }
}

#[test]
fn proxy_endpoints_and_centre() {
    for beta in [0.5, 1.0, 2.0, 5.0, 10.0] {
        assert!(dgm_proxy(0.0, beta).abs() < 1e-15);
        assert!((dgm_proxy(1.0, beta) - 1.0).abs() < 1e-15);
        assert_eq!(dgm_proxy(0.5, beta), 0.5);
        // continuity of soft_round and its slope across an integer
        let eps = 1e-9;
        assert!((dgm_soft_round(3.0 - eps, beta) - dgm_soft_round(3.0, beta)).abs() < 1e-7);
        assert!((dgm_grad(0.0, beta) - dgm_grad(1.0, beta)).abs() < 1e-12);
    }
}

#[test]
fn dgm_slope_is_positive_and_peaks_mid_cell() {
    for beta in [1.0, 2.0, 5.0, 10.0] {
        let grid: Vec<f64> = (0..=1000).map(|i| dgm_grad(i as f64 / 1000.0, beta)).collect();
        assert!(grid.iter().all(|&v| v > 0.0));
        let max = grid.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(grid[500], max);
    }
}

/// Round on the way forward, DGM slope on the way back, assembled from the
/// public custom-gradient hook, agrees with the quantizer's own backward.
#[test]
fn custom_dgm_round_matches_fake_quantize() {
    let beta = 5.0;
    let (s, z, bits) = (0.07, 3.2, 8);
    let mut r = rng(23);
    let x = random(&[64], -0.2, 15.0, &mut r);

    let round_dgm = register_custom_gradient::<f64, _, _>(
        "round_dgm",
        |xs| Ok((xs[0].map(|v| v.round()), Vec::new())),
        move |up, _, xs| {
            let d: Vec<f64> = up
                .data()
                .iter()
                .zip(xs[0].data())
                .map(|(g, u)| g * dgm_grad(u - u.floor(), beta))
                .collect();
            Ok(vec![Tensor::new(up.shape(), d)?])
        },
    );
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let u = g.scale(xv, 1.0 / s);
    let u = g.offset(u, z);
    let q = g.apply_custom(&round_dgm, &[u]).unwrap();
    let q = g.offset(q, -z);
    let y = g.scale(q, s);
    let total = g.sum(y);
    g.backward(total).unwrap();
    let by_hand = g.grad(xv).unwrap().clone();

    let mut g = Graph::new();
    let xv = g.leaf(x, true);
    let p = per_tensor(s, z, bits);
    let vars = QuantVars::from_params(&mut g, &p, false, false).unwrap();
    let y = fake_quantize(&mut g, xv, &vars, GradientMode::Dgm { beta }).unwrap();
    let total = g.sum(y);
    g.backward(total).unwrap();
    let built_in = g.grad(xv).unwrap();

    for (a, b) in by_hand.data().iter().zip(built_in.data()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn ste_and_dgm_share_the_forward_value() {
    let mut r = rng(24);
    let x = random(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    let p = calibrate_init(&x, 4, 1).unwrap();
    let run = |mode| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let vars = QuantVars::from_params(&mut g, &p, true, true).unwrap();
        let y = fake_quantize(&mut g, xv, &vars, mode).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(GradientMode::Ste), run(GradientMode::Dgm { beta: 5.0 }));
}

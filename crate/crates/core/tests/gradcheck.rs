mod common;

use common::{gradcheck, random, rng, TOL};
use dynaquant::autodiff::{register_custom_gradient, Graph};
use dynaquant::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_close(name: &str, err: f64) {
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn binary_ops_with_broadcasting() {
    let mut r = rng(1);
    let a = random(&[2, 3], -2.0, 2.0, &mut r);
    let b = random(&[3], -2.0, 2.0, &mut r);
    let pos = random(&[3], 0.5, 2.0, &mut r);
    assert_close("add", gradcheck(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap()));
    assert_close("sub", gradcheck(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap()));
    assert_close("mul", gradcheck(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap()));
    assert_close("div", gradcheck(&[a.clone(), pos], |g, v| g.div(v[0], v[1]).unwrap()));
    let col = random(&[2, 1], -1.0, 1.0, &mut r);
    assert_close("mul column", gradcheck(&[a, col], |g, v| g.mul(v[0], v[1]).unwrap()));
}

#[test]
fn unary_ops() {
    let mut r = rng(2);
    let x = random(&[3, 4], -2.0, 2.0, &mut r);
    let pos = random(&[3, 4], 0.2, 3.0, &mut r);
    assert_close("exp", gradcheck(&[x.clone()], |g, v| g.exp(v[0])));
    assert_close("log", gradcheck(&[pos], |g, v| g.log(v[0])));
    assert_close("tanh", gradcheck(&[x.clone()], |g, v| g.tanh(v[0])));
    assert_close("sigmoid", gradcheck(&[x.clone()], |g, v| g.sigmoid(v[0])));
    assert_close("softplus", gradcheck(&[x.clone()], |g, v| g.softplus(v[0])));
    assert_close("square", gradcheck(&[x.clone()], |g, v| g.square(v[0])));
    assert_close("scale", gradcheck(&[x.clone()], |g, v| g.scale(v[0], -1.7)));
    assert_close("offset", gradcheck(&[x], |g, v| g.offset(v[0], 0.3)));
}

/// Values kept at least `margin` away from every point in `kinks`.
fn avoiding(shape: &[usize], lo: f64, hi: f64, kinks: impl Fn(f64) -> f64, margin: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = r.random_range(lo..hi);
            if kinks(v) > margin {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn piecewise_ops_away_from_kinks() {
    let mut r = rng(3);
    let x = avoiding(&[4, 5], -2.0, 2.0, |v| v.abs(), 1e-3, &mut r);
    assert_close("leaky_relu", gradcheck(&[x], |g, v| g.leaky_relu(v[0], 0.01)));

    let x = avoiding(&[4, 5], -2.0, 2.0, |v| (v + 0.5).abs().min((v - 0.7).abs()), 1e-3, &mut r);
    assert_close("clip", gradcheck(&[x], |g, v| g.clip(v[0], -0.5, 0.7)));

    let x = avoiding(&[4, 5], -3.0, 3.0, |v| (v - v.round()).abs(), 1e-3, &mut r);
    // floor contributes nothing, so d(floor(x) + x)/dx = 1
    let floor_plus = |g: &mut Graph<f64>, v: &[dynaquant::autodiff::Var]| {
        let f = g.floor(v[0]);
        g.add(f, v[0]).unwrap()
    };
    assert_close("floor", gradcheck(&[x.clone()], floor_plus));
    let mut g = Graph::new();
    let v = g.leaf(x, true);
    let y = floor_plus(&mut g, &[v]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 1.0));
}

#[test]
fn reductions_and_losses() {
    let mut r = rng(4);
    let a = random(&[2, 3, 4], -1.0, 1.0, &mut r);
    let b = random(&[2, 3, 4], -1.0, 1.0, &mut r);
    assert_close("sum", gradcheck(&[a.clone()], |g, v| g.sum(v[0])));
    assert_close("mean", gradcheck(&[a.clone()], |g, v| g.mean(v[0])));
    assert_close("mse", gradcheck(&[a, b], |g, v| g.mse(v[0], v[1]).unwrap()));
}

#[test]
fn softmax_over_each_axis() {
    let mut r = rng(5);
    let x = random(&[2, 3, 4], -2.0, 2.0, &mut r);
    for axis in 0..3 {
        assert_close("softmax", gradcheck(&[x.clone()], |g, v| g.softmax(v[0], axis).unwrap()));
    }
}

#[test]
fn matmul_and_linear() {
    let mut r = rng(6);
    let a = random(&[3, 4], -1.0, 1.0, &mut r);
    let b = random(&[4, 2], -1.0, 1.0, &mut r);
    assert_close("matmul", gradcheck(&[a.clone(), b], |g, v| g.matmul(v[0], v[1]).unwrap()));
    let w = random(&[5, 4], -1.0, 1.0, &mut r);
    let bias = random(&[5], -1.0, 1.0, &mut r);
    assert_close("linear", gradcheck(&[a, w, bias], |g, v| g.linear(v[0], v[1], v[2]).unwrap()));
}

#[test]
fn conv2d_strides_and_padding() {
    let mut r = rng(7);
    let x = random(&[2, 3, 6, 5], -1.0, 1.0, &mut r);
    let w = random(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let b = random(&[4], -1.0, 1.0, &mut r);
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        let err = gradcheck(&[x.clone(), w.clone(), b.clone()], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride, padding).unwrap()
        });
        assert_close("conv2d", err);
    }
    let err = gradcheck(&[x, w], |g, v| g.conv2d(v[0], v[1], None, 2, 0).unwrap());
    assert_close("conv2d without bias", err);
}

#[test]
fn resampling_ops() {
    let mut r = rng(8);
    let x = random(&[1, 2, 3, 4], -1.0, 1.0, &mut r);
    assert_close("upsample", gradcheck(&[x], |g, v| g.upsample_nearest(v[0], 2).unwrap()));
    let x = random(&[2, 2, 7, 5], -1.0, 1.0, &mut r);
    for (oh, ow) in [(3, 2), (5, 5), (1, 1)] {
        assert_close("pool", gradcheck(&[x.clone()], |g, v| g.adaptive_avg_pool2d(v[0], oh, ow).unwrap()));
    }
}

#[test]
fn shape_ops() {
    let mut r = rng(9);
    let x = random(&[2, 3, 4], -1.0, 1.0, &mut r);
    let y = random(&[2, 2, 4], -1.0, 1.0, &mut r);
    assert_close("reshape", gradcheck(&[x.clone()], |g, v| g.reshape(v[0], &[6, 4]).unwrap()));
    assert_close("narrow", gradcheck(&[x.clone()], |g, v| g.narrow(v[0], 1, 1, 2).unwrap()));
    assert_close("concat", gradcheck(&[x, y], |g, v| g.concat(&[v[0], v[1]], 1).unwrap()));
}

#[test]
fn dropout_with_fixed_mask() {
    let mut r = rng(10);
    let x = random(&[4, 6], -1.0, 1.0, &mut r);
    let err = gradcheck(&[x.clone()], |g, v| {
        g.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    });
    assert_close("dropout", err);
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = g.dropout(v, 0.3, false, &mut rng(0)).unwrap();
    assert_eq!(g.value(out).data(), x.data());
}

#[test]
fn composite_linear_leaky_relu_mse() {
    let mut r = rng(11);
    let x = random(&[4, 5], -1.0, 1.0, &mut r);
    let w = random(&[3, 5], -1.0, 1.0, &mut r);
    let b = random(&[3], -1.0, 1.0, &mut r);
    let target = random(&[4, 3], -1.0, 1.0, &mut r);
    let err = gradcheck(&[x, w, b, target], |g, v| {
        let h = g.linear(v[0], v[1], v[2]).unwrap();
        let a = g.leaky_relu(h, 0.01);
        g.mse(a, v[3]).unwrap()
    });
    assert_close("composite", err);
}

/// Random chains of smooth primitives on a shared pair of inputs.
#[test]
fn random_composite_graphs() {
    let mut r = rng(12);
    for trial in 0..25 {
        let a = random(&[3, 4], -1.0, 1.0, &mut r);
        let b = random(&[3, 4], -1.0, 1.0, &mut r);
        let ops: Vec<u32> = (0..6).map(|_| r.random_range(0..7)).collect();
        let err = gradcheck(&[a, b], |g, v| {
            let mut x = v[0];
            for &op in &ops {
                x = match op {
                    0 => g.tanh(x),
                    1 => g.add(x, v[1]).unwrap(),
                    2 => g.mul(x, v[1]).unwrap(),
                    3 => g.softmax(x, 1).unwrap(),
                    4 => g.sigmoid(x),
                    5 => {
                        let s = g.square(x);
                        g.offset(s, 0.5)
                    }
                    _ => {
                        let w = g.scale(v[1], 0.5);
                        g.sub(x, w).unwrap()
                    }
                };
            }
            x
        });
        assert!(err < TOL, "trial {trial} ({ops:?}): {err:e}");
    }
}

#[test]
fn sum_and_scalar_mse_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap(), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

    let mut g = Graph::<f64>::new();
    let v = g.leaf(Tensor::scalar(1.5), true);
    let zero = g.constant(Tensor::scalar(0.0));
    let l = g.mse(v, zero).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(v).unwrap().item().unwrap(), 3.0);
}

#[test]
fn backward_visits_each_node_once() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap(), true);
    // diamond: x feeds two branches that merge
    let a = g.tanh(x);
    let b = g.exp(x);
    let c = g.mul(a, b).unwrap();
    let d = g.add(c, a).unwrap();
    let s = g.sum(d);
    g.backward(s).unwrap();
    // five op nodes above one leaf
    assert_eq!(g.len(), 6);
    assert_eq!(g.backward_visits(), 5);
}

#[test]
fn constants_never_accumulate_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
    let c = g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn custom_identity_with_doubled_gradient() {
    let op = register_custom_gradient::<f64, _, _>(
        "double_grad",
        |xs| Ok((xs[0].clone(), Vec::new())),
        |up, _, _| Ok(vec![up.map(|v| 2.0 * v)]),
    );
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_f64(&[4], &[0.3, -1.0, 2.5, 0.0]).unwrap(), true);
    let y = g.apply_custom(&op, &[x]).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0; 4]);
}

#[test]
fn custom_round_with_identity_backward_is_ste() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[4], &[0.4, 0.6, -1.2, 2.5]).unwrap(), true);
    let y = g.round_ste(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, -1.0, 3.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn custom_gradient_shape_mismatch_is_a_contract_error() {
    let op = register_custom_gradient::<f64, _, _>(
        "bad",
        |xs| Ok((xs[0].clone(), Vec::new())),
        |_, _, _| Ok(vec![Tensor::zeros(&[7])]),
    );
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
    let y = g.apply_custom(&op, &[x]).unwrap();
    let s = g.sum(y);
    assert!(matches!(g.backward(s), Err(dynaquant::Error::Contract(_))));
}

#[test]
fn identical_inputs_give_identical_gradients() {
    let run = || {
        let mut r = rng(13);
        let x = random(&[2, 3, 8, 8], -1.0, 1.0, &mut r).cast::<f32>();
        let w = random(&[4, 3, 3, 3], -1.0, 1.0, &mut r).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let xv = g.leaf(x, true);
        let wv = g.leaf(w, true);
        let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let y = g.tanh(y);
        let s = g.mean(y);
        g.backward(s).unwrap();
        (g.grad(xv).unwrap().clone(), g.grad(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#![allow(dead_code)]

use dynaquant::autodiff::{Graph, Var};
use dynaquant::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Builds `f` on fresh leaves and reduces its output against fixed random
/// weights, so upstream gradients are not all ones.
fn scalar_loss(
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    weights: &mut Option<Tensor<f64>>,
) -> (Graph<f64>, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    let shape = g.shape(out).to_vec();
    let w = weights.get_or_insert_with(|| random(&shape, 0.5, 1.5, &mut rng(99))).clone();
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    (g, vars, loss)
}

/// Largest relative error between analytic and central-difference
/// gradients over every input element.
pub fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut weights = None;
    let (mut g, vars, loss) = scalar_loss(inputs, &f, &mut weights);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |xs: &[Tensor<f64>]| {
        let mut w = weights.clone();
        let (g, _, loss) = scalar_loss(xs, &f, &mut w);
        g.value(loss).item().unwrap()
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

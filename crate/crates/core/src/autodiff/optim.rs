use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{c, Real, Tensor};

/// Adam moments and hyperparameters for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f64, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update. `grads[i] == None` leaves parameter `i`
/// and its moments untouched.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() || state.m[i].len() != p.len() {
                return Err(Error::shape(
                    "adam",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for ((w, &gv), (mi, vi)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let gv = gv.as_f64();
            let mn = b1 * *mi as f64 + (1.0 - b1) * gv;
            let vn = b2 * *vi as f64 + (1.0 - b2) * gv * gv;
            *mi = mn as f32;
            *vi = vn as f32;
            let update = state.lr * (mn / bc1) / ((vn / bc2).sqrt() + state.eps);
            *w -= c::<T>(update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::<f64>::zeros(&[3]);
        let mut st = AdamState::new(0.1, [3]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Some(&g)], &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 after bias correction, so the step is lr·1/(1+ε).
        let mut p = Tensor::scalar(0.0f64);
        let g = Tensor::scalar(1.0f64);
        let mut st = AdamState::new(0.1, [1]);
        adam_step(&mut [&mut p], &[Some(&g)], &mut st).unwrap();
        assert!((p.item().unwrap() + 0.1 / (1.0 + 1e-8)).abs() < 1e-6);
    }

    #[test]
    fn two_steps_follow_moment_recursion() {
        let (lr, g) = (0.05, 0.3);
        let mut p = Tensor::scalar(1.0f64);
        let gt = Tensor::scalar(g);
        let mut st = AdamState::new(lr, [1]);
        adam_step(&mut [&mut p], &[Some(&gt)], &mut st).unwrap();
        adam_step(&mut [&mut p], &[Some(&gt)], &mut st).unwrap();

        // scalar recursion by hand
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut w) = (0.0, 0.0, 1.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.item().unwrap() - w).abs() < 1e-6);
        assert!((st.m[0][0] as f64 - m).abs() < 1e-7);
        assert!((st.v[0][0] as f64 - v).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_is_surfaced() {
        let mut p = Tensor::scalar(0.0f32);
        let g = Tensor::scalar(f32::NAN);
        let mut st = AdamState::new(0.1, [1]);
        let err = adam_step(&mut [&mut p], &[Some(&g)], &mut st).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(st.step, 0);
    }
}

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Real, Result, Tensor4};

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64, params: &[Tensor4<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        AdamState { step: 0, lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, first_moment: zeros(), second_moment: zeros() }
    }
}

pub fn adam_step<T: Real>(params: &mut [Tensor4<T>], grads: &[Tensor4<T>], state: &mut AdamState<T>) -> Result<()> {
    let shapes_ok = params.len() == grads.len()
        && params.len() == state.first_moment.len()
        && params.iter().zip(grads).all(|(p, g)| p.dims() == g.dims())
        && params.iter().zip(&state.first_moment).all(|(p, m)| p.len() == m.len());
    if !shapes_ok {
        return Err(AutodiffError::ShapeMismatch("adam parameters, gradients and moments disagree".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let c1 = T::from_f64(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::from_f64(state.lr), T::from_f64(state.epsilon));
    let one = T::one();
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.first_moment).zip(&mut state.second_moment) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![Tensor4::full([1, 1, 1, 2], 0.5f64)];
        let g = vec![Tensor4::zeros([1, 1, 1, 2])];
        let mut st = AdamState::new(0.1, &p);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p[0].data(), &[0.5, 0.5]);
        assert_eq!(st.step, 1);

        st.first_moment[0] = vec![0.2, -0.4];
        st.second_moment[0] = vec![0.5, 0.25];
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!((st.first_moment[0][0] - 0.18).abs() < 1e-15);
        assert!((st.first_moment[0][1] + 0.36).abs() < 1e-15);
        assert!((st.second_moment[0][1] - 0.24975).abs() < 1e-15);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut x = vec![Tensor4::full([1, 1, 1, 1], 1.0f64)];
        let mut st = AdamState::new(0.1, &x);
        let mut hit = None;
        for step in 1..=200 {
            let g = vec![x[0].map(|v| 2.0 * v)];
            adam_step(&mut x, &g, &mut st).unwrap();
            if x[0].data()[0].abs() < 1e-3 {
                hit = Some(step);
                break;
            }
        }
        assert!(hit.is_some(), "x = {}", x[0].data()[0]);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let init = vec![Tensor4::from_vec([1, 1, 1, 3], vec![0.1f32, -0.2, 0.3]).unwrap()];
        let g = vec![Tensor4::from_vec([1, 1, 1, 3], vec![0.7f32, 0.01, -3.0]).unwrap()];
        let (mut a, mut b) = (init.clone(), init.clone());
        let (mut sa, mut sb) = (AdamState::new(1e-3, &a), AdamState::new(1e-3, &b));
        for _ in 0..5 {
            adam_step(&mut a, &g, &mut sa).unwrap();
            adam_step(&mut b, &g, &mut sb).unwrap();
        }
        let bits = |t: &Tensor4<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a[0]), bits(&b[0]));
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![Tensor4::<f32>::zeros([1, 1, 1, 2])];
        let mut st = AdamState::new(0.1, &p);
        assert!(adam_step(&mut p, &[Tensor4::zeros([1, 1, 2, 1])], &mut st).is_err());
    }
}

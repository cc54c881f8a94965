//! Adam with bias-corrected moment estimates.

use super::graph::Gradients;
use super::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// Zeroed moments for parameters of the given shapes.
    pub fn new(params: &[Tensor<T>]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &Gradients<T>, lr: f64) {
        assert_eq!(params.len(), grads.len(), "adam: parameter/gradient count mismatch");
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p.data[j] = p.data[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0f64, -2.0])];
        let g = vec![Tensor::new(vec![2], vec![0.3, -7.0])];
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &g, 0.01);
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        assert!((p[0].data[0] - (1.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((p[0].data[1] - (-2.0 + 0.01 * 7.0 / (7.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = vec![Tensor::new(vec![3], vec![0.5f64, 1.5, -3.0])];
        let g = vec![Tensor::zeros(&[3])];
        let mut opt = Adam::new(&p);
        for _ in 0..50 {
            opt.step(&mut p, &g, 0.1);
        }
        assert_eq!(p[0].data, vec![0.5, 1.5, -3.0]);
    }

    #[test]
    fn two_steps_on_quadratic_match_hand_oracle() {
        // f(x) = 0.5 * a * x^2, gradient a * x.
        let a = 3.0f64;
        let lr = 0.05;
        let mut p = vec![Tensor::new(vec![1], vec![2.0f64])];
        let mut opt = Adam::new(&p);
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = vec![Tensor::new(vec![1], vec![a * p[0].data[0]])];
            opt.step(&mut p, &g, lr);
            let gx = a * x;
            m = 0.9 * m + 0.1 * gx;
            v = 0.999 * v + 0.001 * gx * gx;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((p[0].data[0] - x).abs() < 1e-12);
        }
    }
}

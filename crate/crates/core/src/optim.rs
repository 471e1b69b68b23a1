use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use crate::tensor::Matrix;

/// Adam with bias correction; moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once before the `update`s of
    /// one optimization step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Matrix, grad: &Matrix) {
        debug_assert!(self.step > 0, "begin_step not called");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Matrix::zeros(grad.rows(), grad.cols()), Matrix::zeros(grad.rows(), grad.cols())));
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), mi), vi) in param
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = Adam::new(0.1);
        let mut p = Matrix::from_rows(&[[1.0, -1.0]]);
        opt.begin_step();
        opt.update("p", &mut p, &Matrix::from_rows(&[[2.0, -0.5]]));
        assert!((p.get(0, 0) - 0.9).abs() < 1e-8);
        assert!((p.get(0, 1) + 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut opt = Adam::new(0.0);
        let mut p = Matrix::from_rows(&[[1.0, 2.0]]);
        let before = p.clone();
        opt.begin_step();
        opt.update("p", &mut p, &Matrix::from_rows(&[[3.0, 4.0]]));
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(0.05);
        let mut p = Matrix::from_rows(&[[3.0]]);
        for _ in 0..500 {
            let g = p.scale(2.0);
            opt.begin_step();
            opt.update("p", &mut p, &g);
        }
        assert!(p.get(0, 0).abs() < 1e-2);
    }
}

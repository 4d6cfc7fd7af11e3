use crate::autodiff::ParamStore;
use crate::tensor::{Tensor, TensorError};

/// Adam with bias correction. Frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradient slots. Parameters without a slot
    /// are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), TensorError> {
        for p in params.iter() {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(TensorError::NonFinite { op: "adam" });
                }
            }
        }
        if self.first.len() != params.len() {
            self.first = vec![None; params.len()];
            self.second = vec![None; params.len()];
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let zeros;
            let g = match &p.grad {
                Some(g) => g.data(),
                None => {
                    zeros = vec![0.0; p.value.numel()];
                    &zeros
                }
            };
            for (((w, m), v), &g) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(vec![v]));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(1.5);
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        for _ in 0..3 {
            s.zero_grad();
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.flat_values(), vec![1.5]);
    }

    #[test]
    fn constant_gradient_follows_closed_form() {
        // g = 1 every step: m_t = 1 - b1^t and v_t = 1 - b2^t, so both
        // bias-corrected moments are 1 and every update is lr / (1 + eps).
        let (lr, eps) = (0.01, 1e-8);
        let mut s = store(0.0);
        let mut opt = Adam::new(lr, 0.9, 0.999, eps);
        let id = s.ids().next().unwrap();
        for _ in 0..200 {
            s.get_mut(id).grad = Some(Tensor::from_vec(vec![1.0]));
            opt.step(&mut s).unwrap();
        }
        let expected = -200.0 * lr / (1.0 + eps);
        assert!((s.flat_values()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut s = store(2.0);
        let id = s.ids().next().unwrap();
        s.get_mut(id).grad = Some(Tensor::from_vec(vec![5.0]));
        s.get_mut(id).frozen = true;
        Adam::new(0.1, 0.9, 0.999, 1e-8).step(&mut s).unwrap();
        assert_eq!(s.flat_values()[0].to_bits(), 2.0f64.to_bits());
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut s = store(2.0);
        let id = s.ids().next().unwrap();
        s.get_mut(id).grad = Some(Tensor::from_vec(vec![f64::NAN]));
        assert!(Adam::new(0.1, 0.9, 0.999, 1e-8).step(&mut s).is_err());
        assert_eq!(s.flat_values(), vec![2.0]);
    }
}

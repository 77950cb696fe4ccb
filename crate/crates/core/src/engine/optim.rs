use crate::graph::BnUpdate;
use crate::params::{ParamId, ParamSet};

/// Stochastic gradient descent with heavy-ball momentum:
/// `v = momentum * v + g; p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Parameters without a gradient this step are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(ParamId, Vec<f64>)]) {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for (id, g) in grads {
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
            let p = params.get_mut(*id).data_mut();
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *p -= self.learning_rate * *v;
            }
        }
    }
}

/// `running = (1 - m) * running + m * batch`.
pub fn apply_bn_updates(params: &mut ParamSet, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, b) in params.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in params.get_mut(u.running_var).data_mut().iter_mut().zip(&u.batch_var_unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn momentum_accumulates() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), true);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut ps, &[(id, vec![1.0, 2.0])]);
        assert_eq!(ps.get(id).data(), &[0.9, -1.2]);
        opt.step(&mut ps, &[(id, vec![1.0, 2.0])]);
        // v = 0.9 * 1 + 1 = 1.9 and 0.9 * 2 + 2 = 3.8
        assert!((ps.get(id).data()[0] - (0.9 - 0.19)).abs() < 1e-15);
        assert!((ps.get(id).data()[1] - (-1.2 - 0.38)).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::scalar(2.0), true);
        let mut opt = Sgd::new(0.5, 0.0);
        for _ in 0..3 {
            opt.step(&mut ps, &[(id, vec![1.0])]);
        }
        assert_eq!(ps.get(id).item(), 0.5);
    }
}

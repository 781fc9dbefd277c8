//! Momentum SGD and AdaGrad over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use super::params::ParamStore;

pub const ADAGRAD_EPSILON: f32 = 1e-8;

/// `v <- momentum * v + grad + l2 * w;  w <- w - lr * v`
pub fn sgd_momentum_step(params: &mut ParamStore, lr: f32, momentum: f32, l2: f32) {
    params.for_each_with_slot("velocity", |w, g, v| {
        for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + g + l2 * *w;
            *w -= lr * *v;
        }
    });
    params.bump_step();
}

/// `G <- G + grad^2;  w <- w - lr * grad / (sqrt(G) + epsilon)`
pub fn adagrad_step(params: &mut ParamStore, lr: f32, epsilon: f32) {
    params.for_each_with_slot("adagrad", |w, g, acc| {
        for ((w, &g), a) in w.iter_mut().zip(g).zip(acc.iter_mut()) {
            *a += g * g;
            *w -= lr * g / (a.sqrt() + epsilon);
        }
    });
    params.bump_step();
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    SgdMomentum { lr: f32, momentum: f32, l2: f32 },
    AdaGrad { lr: f32, epsilon: f32 },
}

impl Optimizer {
    /// Coarse-stage recipe: lr 0.01, momentum 0.9, L2 2e-4.
    pub fn coarse_default() -> Self {
        Optimizer::SgdMomentum {
            lr: 0.01,
            momentum: 0.9,
            l2: 0.0002,
        }
    }

    /// Enhancer recipe: AdaGrad with base rate 0.01.
    pub fn enhancer_default() -> Self {
        Optimizer::AdaGrad {
            lr: 0.01,
            epsilon: ADAGRAD_EPSILON,
        }
    }

    pub fn step(&self, params: &mut ParamStore) {
        match *self {
            Optimizer::SgdMomentum { lr, momentum, l2 } => sgd_momentum_step(params, lr, momentum, l2),
            Optimizer::AdaGrad { lr, epsilon } => adagrad_step(params, lr, epsilon),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f32, g: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1], vec![w]).unwrap()).unwrap();
        p.set_grad("w", Tensor::new(&[1], vec![g]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(0.75, 0.0);
        sgd_momentum_step(&mut p, 0.01, 0.9, 0.0);
        assert_eq!(p.value("w").unwrap().data(), &[0.75]);
        adagrad_step(&mut p, 0.01, ADAGRAD_EPSILON);
        assert_eq!(p.value("w").unwrap().data(), &[0.75]);
    }

    #[test]
    fn momentum_two_step_recurrence() {
        // v1 = 1, w1 = 0.99; v2 = 1.9, w2 = 0.971
        let mut p = single(1.0, 1.0);
        sgd_momentum_step(&mut p, 0.01, 0.9, 0.0);
        sgd_momentum_step(&mut p, 0.01, 0.9, 0.0);
        assert!((p.value("w").unwrap().data()[0] - 0.971).abs() < 1e-6);
        assert_eq!(p.step_count(), 2);
    }

    #[test]
    fn adagrad_first_step_is_normalized() {
        let mut p = single(0.0, 2.0);
        adagrad_step(&mut p, 0.01, 0.0);
        assert_eq!(p.value("w").unwrap().data(), &[-0.01]);
        assert_eq!(p.slot("adagrad.w").unwrap().data(), &[4.0]);
    }

    #[test]
    fn adagrad_accumulator_is_monotone() {
        let mut p = single(1.0, 0.0);
        let mut last = 0.0;
        for i in 0..20 {
            p.set_grad("w", Tensor::new(&[1], vec![(i as f32 * 1.7).sin()]).unwrap()).unwrap();
            adagrad_step(&mut p, 0.01, ADAGRAD_EPSILON);
            let g = p.slot("adagrad.w").unwrap().data()[0];
            assert!(g >= last && g >= 0.0);
            last = g;
        }
    }

    #[test]
    fn l2_decay_shrinks_weight() {
        let mut p = single(2.0, 0.0);
        sgd_momentum_step(&mut p, 0.1, 0.0, 0.5);
        assert!((p.value("w").unwrap().data()[0] - 1.9).abs() < 1e-6);
    }
}

use crate::numerics::{Gradients, Matrix, ParamStore};
use crate::{Error, Result};

/// Adam with bias-corrected moments, one moment pair per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .blocks()
            .iter()
            .map(|b| Matrix::zeros(b.value.rows(), b.value.cols()))
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn with_defaults(params: &ParamStore) -> Self {
        Self::new(params, 0.001, 0.9, 0.999, 1e-8)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients are rejected before any
    /// parameter or moment changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.blocks().len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape("gradient layout differs from parameters".into()));
        }
        for (block, g) in params.blocks().iter().zip(grads.blocks()) {
            if g.shape() != block.value.shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for `{}`", block.name)));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(block.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((block, g), (m, v)) in params
            .blocks_mut()
            .iter_mut()
            .zip(grads.blocks())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let theta = block.value.as_mut_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for (j, &gj) in g.as_slice().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                theta[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore {
        let mut p = ParamStore::new();
        let n = values.len();
        p.add("theta", Matrix::from_vec(n, 1, values).unwrap());
        p
    }

    fn grads(p: &ParamStore, values: &[f64]) -> Gradients {
        let mut g = Gradients::zeros_like(p);
        g.blocks_mut()[0].as_mut_slice().copy_from_slice(values);
        g
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(vec![0.5, -1.0, 2.0]);
        let g = grads(&p, &[3.0, -0.02, 0.0]);
        let mut adam = Adam::with_defaults(&p);
        adam.step(&mut p, &g).unwrap();
        let got = p.blocks()[0].value.as_slice();
        // m̂ = g and v̂ = g², so the step is lr·g/(|g|+ε).
        let want = [
            0.5 - 0.001 * 3.0 / (3.0 + 1e-8),
            -1.0 + 0.001 * 0.02 / (0.02 + 1e-8),
            2.0,
        ];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn second_step_matches_hand_computation() {
        let mut p = store(vec![1.0]);
        let mut adam = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
        let g = grads(&p, &[1.0]);
        adam.step(&mut p, &g).unwrap();
        let g = grads(&p, &[-2.0]);
        adam.step(&mut p, &g).unwrap();
        let m = 0.9 * 0.1 + 0.1 * -2.0;
        let v = 0.999 * 0.001 + 0.001 * 4.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let want = 1.0 - 0.1 / (1.0 + 1e-8) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.blocks()[0].value.as_slice()[0] - want).abs() < 1e-14);
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut p = store(vec![1.0, 2.0]);
        let mut adam = Adam::with_defaults(&p);
        let before = (p.clone(), adam.clone());
        let g = grads(&p, &[0.1, f64::NAN]);
        let err = adam.step(&mut p, &g).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "theta"));
        assert_eq!((p, adam), before);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = store(vec![0.3, -0.7]);
            let mut adam = Adam::with_defaults(&p);
            for i in 0..50 {
                let g = grads(&p, &[(i as f64).sin(), p.blocks()[0].value.as_slice()[0]]);
                adam.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}

use crate::error::{Error, Result};
use crate::networks::ParamSet;

pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment gradient descent with bias correction, one instance per network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, betas: (f64, f64)) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Adam {
            lr,
            betas,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam step", params.len(), grads.len()));
        }
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            if g.len() != p.len() {
                return Err(Error::shape("adam step", p.len(), g.len()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Shape4, Tensor4};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(&ps, 0.1, (0.5, 0.999));
        opt.step(&mut ps, &[vec![3.0, -0.5]]).unwrap();
        let d = ps.get(0).data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor4::full(Shape4::new(1, 1, 1, 3), 5.0));
        let mut opt = Adam::new(&ps, 0.1, (0.9, 0.999));
        for _ in 0..500 {
            let g: Vec<f64> = ps.get(0).data().iter().map(|v| 2.0 * v).collect();
            opt.step(&mut ps, &[g]).unwrap();
        }
        assert!(ps.get(0).data().iter().all(|v| v.abs() < 0.05));
    }
}

use super::{ParamGrads, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: usize,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| -> Vec<Tensor<T>> {
            p.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect()
        };
        Self { cfg, step: 0, m: zeros(params), v: zeros(params) }
    }

    /// One update. Non-finite gradients, or an update that overflows, are
    /// rejected before anything is written, so a failed step leaves params
    /// and moments as they were.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if grads.grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape("gradient/moment count differs from parameter count".into()));
        }
        for (name, g) in params.names().iter().zip(&grads.grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(eps);

        let mut next = Vec::with_capacity(params.len());
        for ((((name, p), g), m), v) in params.iter().zip(&grads.grads).zip(&self.m).zip(&self.v) {
            let (mut p, mut m, mut v) = (p.clone(), m.clone(), v.clone());
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
            if !(p.is_finite() && v.is_finite()) {
                self.step -= 1;
                return Err(Error::NonFiniteGradient(format!("{name} (update overflowed)")));
            }
            next.push((p, m, v));
        }
        for (((p, m), v), (np, nm, nv)) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v).zip(next) {
            (*p, *m, *v) = (np, nm, nv);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::vector(vec![x]));
        p
    }

    fn grad(g: f64) -> ParamGrads<f64> {
        ParamGrads { grads: vec![Tensor::vector(vec![g])] }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_store(1.5);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 1.5);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(0.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, &grad(1.0)).unwrap();
        assert!((p.get("x").unwrap().item() + 0.1).abs() < 1e-6);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x, y) = (x − 3)² + 2(y + 1)²
        let mut p = ParamStore::new();
        p.insert("xy", Tensor::vector(vec![0.0, 0.0]));
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg, &p);
        for _ in 0..500 {
            let d = p.get("xy").unwrap().data().to_vec();
            let g = ParamGrads { grads: vec![Tensor::vector(vec![2.0 * (d[0] - 3.0), 4.0 * (d[1] + 1.0)])] };
            opt.step(&mut p, &g).unwrap();
        }
        let d: &[f64] = p.get("xy").unwrap().data();
        let f = (d[0] - 3.0).powi(2) + 2.0 * (d[1] + 1.0).powi(2);
        assert!(f < 1e-6, "objective {f}");
    }

    #[test]
    fn nan_gradient_aborts_and_names_param() {
        let mut p = scalar_store(2.0);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        match opt.step(&mut p, &grad(f64::NAN)) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "x"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
        assert_eq!(p.get("x").unwrap().item(), 2.0);
        assert_eq!(opt.step, 0);
    }
}
